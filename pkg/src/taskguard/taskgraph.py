"""Directed task graph of milestone nodes and the recovery-aware executor.

Each node binds a motion generator and an introspection skill model. On an
anomaly flag the executor reverts along manually annotated dependency
pointers (recursively, to the first node without one), replays a spline
recovery motion with monitoring suspended, and resumes at the target node
with freshly queried goal parameters.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .motion import (
    Trajectory,
    dmp_rollout,
    normalize_quaternions,
    retarget,
    spline_interp,
)
from .obsdata import to_feature_vector

RECOVERY_SPEED = 0.5 / 0.1  # seconds per meter of displacement
RECOVERY_MIN_DURATION = 1.0
SETTLE_TIME = 0.25


class GraphError(Exception):
    """Malformed graph spec: dangling references or dependency cycles."""


@dataclass(frozen=True)
class Node:
    """Milestone: skill model reference, motion spec, goal source, dependency."""

    id: str
    skill_id: str
    motion: str  # "spline:<duration_s>" or "dmp:<name>"
    goal: tuple  # ("static", pose7) or ("scene", object_name)
    dependency: str | None = None


@dataclass(frozen=True)
class TaskGraph:
    nodes: dict  # id -> Node, insertion-ordered
    edges: tuple  # (from_id, to_id) successor pairs
    entry: str

    def __post_init__(self):
        for a, b in self.edges:
            for nid in (a, b):
                if nid not in self.nodes:
                    raise GraphError(f"edge references unknown node {nid!r}")
        if self.entry not in self.nodes:
            raise GraphError(f"entry node {self.entry!r} not defined")
        succ = {}
        for a, b in self.edges:
            if a in succ:
                raise GraphError(f"node {a!r} has multiple successors")
            succ[a] = b
        # The successor relation must reach every node from the entry.
        seen = {self.entry}
        cur = self.entry
        while cur in succ:
            cur = succ[cur]
            if cur in seen:
                raise GraphError("successor relation contains a cycle")
            seen.add(cur)
        missing = set(self.nodes) - seen
        if missing:
            raise GraphError(f"nodes unreachable from entry: {sorted(missing)}")
        for node in self.nodes.values():
            if node.dependency is not None and node.dependency not in self.nodes:
                raise GraphError(
                    f"node {node.id!r} depends on unknown node {node.dependency!r}")
        # Dependency pointers must be acyclic.
        for start in self.nodes:
            trail = [start]
            cur = self.nodes[start].dependency
            while cur is not None:
                if cur in trail:
                    cycle = trail[trail.index(cur):] + [cur]
                    raise GraphError(f"dependency cycle: {' -> '.join(cycle)}")
                trail.append(cur)
                cur = self.nodes[cur].dependency

    def successor(self, node_id) -> str | None:
        for a, b in self.edges:
            if a == node_id:
                return b
        return None

    def predecessor(self, node_id) -> str | None:
        for a, b in self.edges:
            if b == node_id:
                return a
        return None


def resolve_recovery_target(graph: TaskGraph, anomalous: str) -> str:
    """Follow dependency pointers to the first node without one."""
    if anomalous not in graph.nodes:
        raise GraphError(f"unknown node {anomalous!r}")
    cur = anomalous
    while graph.nodes[cur].dependency is not None:
        cur = graph.nodes[cur].dependency
    return cur


def _parse_goal(text):
    if text.startswith("static:"):
        vals = [float(v) for v in text[len("static:"):].split(",")]
        if len(vals) != 7:
            raise GraphError("static goal needs 7 values (x,y,z,qw,qx,qy,qz)")
        return ("static", np.array(vals))
    if text.startswith("scene:"):
        return ("scene", text[len("scene:"):])
    raise GraphError(f"bad goal spec {text!r}")


def load_graph(path) -> TaskGraph:
    """Parse a graph spec file (node/edge/entry lines)."""
    nodes = {}
    edges = []
    entry = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "node":
                    fields = dict(p.split("=", 1) for p in parts[2:])
                    dep = fields.get("dep", "none")
                    nodes[parts[1]] = Node(
                        id=parts[1], skill_id=fields["skill"],
                        motion=fields["motion"], goal=_parse_goal(fields["goal"]),
                        dependency=None if dep == "none" else dep,
                    )
                elif parts[0] == "edge":
                    edges.append((parts[1], parts[2]))
                elif parts[0] == "entry":
                    entry = parts[1]
                else:
                    raise GraphError(f"line {lineno}: unknown directive {parts[0]!r}")
            except (KeyError, IndexError, ValueError) as exc:
                raise GraphError(f"line {lineno}: {exc}") from exc
    if entry is None:
        raise GraphError("missing entry directive")
    return TaskGraph(nodes=nodes, edges=tuple(edges), entry=entry)


def save_graph(graph: TaskGraph, path):
    with open(path, "w") as fh:
        for node in graph.nodes.values():
            kind, value = node.goal
            goal = (
                "static:" + ",".join(f"{v:.17g}" for v in value)
                if kind == "static" else f"scene:{value}"
            )
            dep = node.dependency or "none"
            fh.write(f"node {node.id} skill={node.skill_id} motion={node.motion} "
                     f"goal={goal} dep={dep}\n")
        for a, b in graph.edges:
            fh.write(f"edge {a} {b}\n")
        fh.write(f"entry {graph.entry}\n")


class MotionLibrary:
    """Maps motion references to pose-trajectory generators.

    ``spline:<duration>`` interpolates start to goal with a natural cubic
    spline; ``dmp:<name>`` rolls out a registered 7-D DMP retargeted to the
    goal. Quaternion components are renormalized per step.
    """

    def __init__(self, rate_hz=200.0):
        self.rate_hz = rate_hz
        self._dmps = {}

    def register_dmp(self, name, params):
        self._dmps[name] = params

    def nominal_duration(self, motion_ref) -> float:
        """Unscaled duration of the referenced motion, seconds."""
        if motion_ref.startswith("spline:"):
            return float(motion_ref.split(":", 1)[1])
        if motion_ref.startswith("dmp:"):
            name = motion_ref.split(":", 1)[1]
            if name not in self._dmps:
                raise GraphError(f"unregistered DMP {name!r}")
            return float(self._dmps[name].tau)
        raise GraphError(f"bad motion spec {motion_ref!r}")

    def trajectory(self, motion_ref, start_pose, goal_pose) -> Trajectory:
        start_pose = np.asarray(start_pose, dtype=float)
        goal_pose = np.asarray(goal_pose, dtype=float)
        if motion_ref.startswith("spline:"):
            duration = float(motion_ref.split(":", 1)[1])
            mid = 0.5 * (start_pose + goal_pose)
            traj = spline_interp(
                [(0.0, start_pose), (duration / 2, mid), (duration, goal_pose)],
                rate_hz=self.rate_hz,
            )
        elif motion_ref.startswith("dmp:"):
            name = motion_ref.split(":", 1)[1]
            if name not in self._dmps:
                raise GraphError(f"unregistered DMP {name!r}")
            params = retarget(self._dmps[name], goal_pose)
            params = replace(params, y0=start_pose)
            traj = dmp_rollout(params, y0=start_pose, g=goal_pose,
                               rate_hz=self.rate_hz, duration_scale=1.0)
        else:
            raise GraphError(f"bad motion spec {motion_ref!r}")
        return Trajectory(rate_hz=self.rate_hz,
                          positions=normalize_quaternions(traj.positions))


EVENT_KINDS = (
    "node_entered", "node_completed", "anomaly_flagged", "recovery_started",
    "task_completed", "task_failed",
)


@dataclass
class TraceEvent:
    kind: str
    t_sim: float
    node: str = ""
    target: str = ""
    t_wall: float = 0.0  # informational only; excluded from serialized traces

    def to_line(self) -> str:
        return f"event {self.kind} t={self.t_sim:.9g} node={self.node} target={self.target}"


@dataclass
class ExecutionTrace:
    events: list = field(default_factory=list)

    def add(self, kind, t_sim, node="", target=""):
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        self.events.append(TraceEvent(kind=kind, t_sim=t_sim, node=node,
                                      target=target, t_wall=time.time()))

    def of_kind(self, kind):
        return [e for e in self.events if e.kind == kind]

    @property
    def completed(self) -> bool:
        return any(e.kind == "task_completed" for e in self.events)

    def to_lines(self):
        # Sim-clock timestamps only, so identical runs serialize identically.
        return [e.to_line() for e in self.events]

    def save(self, path):
        with open(path, "w") as fh:
            for line in self.to_lines():
                fh.write(line + "\n")

    @staticmethod
    def load(path) -> "ExecutionTrace":
        trace = ExecutionTrace()
        with open(path) as fh:
            for raw in fh:
                parts = raw.split()
                if not parts or parts[0] != "event":
                    continue
                fields = dict(p.split("=", 1) for p in parts[2:])
                trace.events.append(TraceEvent(
                    kind=parts[1], t_sim=float(fields["t"]),
                    node=fields.get("node", ""), target=fields.get("target", "")))
        return trace


@dataclass
class ExecConfig:
    rate_hz: float = 200.0
    max_recoveries_per_node: int = 10
    settle_time: float = SETTLE_TIME
    record_observations: bool = False
    monitor_log: list | None = None  # optional per-step log sink
    node_entry_jitter: float = 0.0  # m; training-time start pose spread


@dataclass
class ExecutionResult:
    trace: ExecutionTrace
    injections: list  # (t_abs, node_id, profile) ground truth
    node_streams: list  # (node_id, skill_id, t0, [feature13...]) when recorded


def _resolve_goal(node, plant):
    kind, value = node.goal
    if kind == "static":
        return np.array(value)
    return np.array(plant.scene_pose(value))


def execute(graph: TaskGraph, plant, monitor, motions: MotionLibrary,
            config: ExecConfig | None = None, schedule=None) -> ExecutionResult:
    """Run a task graph against a plant with lockstep introspection.

    `monitor` may be None (training data generation: no detection). The
    optional `schedule` supplies one DisturbanceProfile per node attempt.
    """
    config = config or ExecConfig()
    dt = 1.0 / config.rate_hz
    trace = ExecutionTrace()
    injections = []
    node_streams = []
    recoveries = defaultdict(int)

    node_id = graph.entry
    while True:
        node = graph.nodes[node_id]
        goal = _resolve_goal(node, plant)
        plant.clear_offset()  # controller re-plans from the actual pose
        if config.node_entry_jitter > 0:
            plant.perturb(config.node_entry_jitter)
        traj = motions.trajectory(node.motion, plant.current_pose(), goal)
        if monitor is not None:
            monitor.reset(node.skill_id)
        trace.add("node_entered", plant.clock, node=node_id)

        profile = schedule.next_profile(node_id) if schedule is not None else None
        if profile is not None:
            t_onset = plant.inject(profile)
            injections.append((t_onset, node_id, profile))

        stream = []
        t0 = plant.clock
        anomaly = False
        for setpoint in traj.positions:
            obs = plant.step(setpoint, dt)
            vec = to_feature_vector(obs)
            if config.record_observations:
                stream.append(vec)
            if monitor is not None:
                status, f2 = monitor.step(vec)
                if config.monitor_log is not None:
                    config.monitor_log.append(
                        (plant.clock, node_id, dict(monitor.lcurves()), f2, status))
                if status == "anomaly":
                    anomaly = True
                    trace.add("anomaly_flagged", plant.clock, node=node_id)
                    break
        if config.record_observations and stream:
            node_streams.append((node_id, node.skill_id, t0, stream))

        if anomaly:
            plant.cancel_disturbances()
            recoveries[node_id] += 1
            if recoveries[node_id] > config.max_recoveries_per_node:
                trace.add("task_failed", plant.clock, node=node_id)
                break
            target = resolve_recovery_target(graph, node_id)
            trace.add("recovery_started", plant.clock, node=node_id, target=target)
            # Monitoring is suspended for the reverting motion.
            entry_pose = _entry_pose(graph, target, plant, motions)
            _run_recovery_motion(plant, entry_pose, config)
            node_id = target
            continue

        trace.add("node_completed", plant.clock, node=node_id)
        nxt = graph.successor(node_id)
        if nxt is None:
            trace.add("task_completed", plant.clock)
            break
        node_id = nxt
    return ExecutionResult(trace=trace, injections=injections,
                           node_streams=node_streams)


def _entry_pose(graph, node_id, plant, motions):
    """Nominal pose at which a node's motion begins."""
    pred = graph.predecessor(node_id)
    if pred is None:
        return np.array(plant.home_pose)
    return _resolve_goal(graph.nodes[pred], plant)


def _run_recovery_motion(plant, entry_pose, config):
    dt = 1.0 / config.rate_hz
    plant.clear_offset()
    start = plant.current_pose()
    displacement = float(np.linalg.norm(entry_pose[:3] - start[:3]))
    duration = max(RECOVERY_MIN_DURATION, displacement * RECOVERY_SPEED)
    traj = spline_interp(
        [(0.0, start), (duration / 2, 0.5 * (start + entry_pose)),
         (duration, entry_pose)],
        rate_hz=config.rate_hz,
    )
    for setpoint in normalize_quaternions(traj.positions):
        plant.step(setpoint, dt)
    settle_steps = int(round(config.settle_time * config.rate_hz))
    for _ in range(settle_steps):
        plant.step(entry_pose, dt)
