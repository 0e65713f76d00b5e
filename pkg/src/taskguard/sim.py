"""Kinematic end-effector plant with wrench sensing and collision injection.

The plant tracks pose setpoints through a first-order lag and synthesizes a
contact wrench from the tracking error (virtual stiffness). Disturbances are
half-sine force pulses plus a persistent pose offset that models the arm
being shoved off its path; the offset lasts until the controller re-commands
from the measured pose (``clear_offset``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .obsdata import Observation

TRACK_TAU = 0.05  # s, first-order pose tracking lag
STIFFNESS = 500.0  # N/m, virtual contact stiffness
VISCOSITY = 15.0  # N s/m, velocity-proportional drag on the sensed wrench
SIGMA_FORCE = 0.2  # N
SIGMA_TORQUE = 0.02  # N m
SIGMA_POS = 0.0005  # m
TORQUE_LEVER = 0.01  # m, effective lever arm mapping pulse force to torque
_LEVER_AXIS = np.array([0.0, 0.0, 1.0])  # tool axis the contact lever sits on

HOME_POSE = np.array([0.4, 0.0, 0.4, 1.0, 0.0, 0.0, 0.0])

CONDITIONS = ("nominal", "anomaly_no_recovery", "one_per_node", "multi_per_node")


class SimError(Exception):
    """Bad scenario or plant configuration."""


@dataclass(frozen=True)
class DisturbanceProfile:
    """One collision event, scheduled relative to the next node start.

    ``kind`` selects the pulse shape: ``human_collision`` is a half-sine of
    the given amplitude and duration; ``tool_collision`` is a sharper
    quarter-sine at triple amplitude over a third of the duration.
    ``pose_deviation`` is the magnitude of the persistent pose offset applied
    along ``direction`` at pulse onset.
    """

    kind: str
    onset: float  # s after injection
    amplitude: float  # N
    duration: float  # s
    direction: np.ndarray  # unit 3-vector
    pose_deviation: float  # m

    def __post_init__(self):
        object.__setattr__(self, "direction",
                           np.asarray(self.direction, dtype=float))
        if self.kind not in ("human_collision", "tool_collision"):
            raise SimError(f"unknown disturbance kind {self.kind!r}")
        if self.direction.shape != (3,):
            raise SimError("direction must be a 3-vector")
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-6:
            raise SimError("direction must be a unit vector")
        if self.onset < 0 or self.duration <= 0 or self.amplitude < 0:
            raise SimError("onset/duration/amplitude out of range")

    def force_at(self, t_rel) -> np.ndarray:
        """Pulse force at ``t_rel`` seconds after the pulse start."""
        if self.kind == "tool_collision":
            amp, dur = 3.0 * self.amplitude, self.duration / 3.0
            if not 0.0 <= t_rel < dur:
                return np.zeros(3)
            return amp * np.sin(0.5 * np.pi * t_rel / dur) * self.direction
        if not 0.0 <= t_rel < self.duration:
            return np.zeros(3)
        return self.amplitude * np.sin(np.pi * t_rel / self.duration) * self.direction


class PlantState:
    """Simulated arm: lagged pose tracking, spring wrench, sensor noise."""

    def __init__(self, scene=None, home_pose=HOME_POSE, rate_hz=200.0, seed=0,
                 track_tau=TRACK_TAU, stiffness=STIFFNESS,
                 viscosity=VISCOSITY, sigma_force=SIGMA_FORCE,
                 sigma_torque=SIGMA_TORQUE, sigma_pos=SIGMA_POS):
        self.scene = dict(scene or {})
        self.home_pose = np.asarray(home_pose, dtype=float)
        self.rate_hz = rate_hz
        self.track_tau = track_tau
        self.stiffness = stiffness
        self.viscosity = viscosity
        self.sigma_force = sigma_force
        self.sigma_torque = sigma_torque
        self.sigma_pos = sigma_pos
        self.rng = np.random.default_rng(seed)
        self.clock = 0.0
        self.held_object = None
        self.pose = self.home_pose.copy()  # tracked (undisturbed) pose
        self.offset = np.zeros(3)  # persistent positional deviation
        self._pending = []  # (t_start_abs, profile), offset not yet applied
        self._active = []  # (t_start_abs, profile)

    def scene_pose(self, name) -> np.ndarray:
        if name not in self.scene:
            raise SimError(f"unknown scene object {name!r}")
        return np.asarray(self.scene[name], dtype=float)

    def current_pose(self) -> np.ndarray:
        """Measured pose: tracked pose plus the disturbance offset."""
        pose = self.pose.copy()
        pose[:3] += self.offset
        return pose

    def inject(self, profile: DisturbanceProfile) -> float:
        """Schedule a disturbance; returns the absolute onset time."""
        t_start = self.clock + profile.onset
        self._pending.append((t_start, profile))
        return t_start

    def cancel_disturbances(self):
        """Drop scheduled and in-flight pulses (contact broken by reaction)."""
        self._pending = []
        self._active = []

    def perturb(self, sigma):
        """Randomly displace the tracked pose (training-time start spread)."""
        self.pose[:3] += self.rng.normal(0.0, sigma, 3)

    def clear_offset(self):
        """Fold the deviation into the tracked pose; models re-commanding
        the controller from the measured pose."""
        self.pose[:3] += self.offset
        self.offset = np.zeros(3)

    def _pulse_force(self):
        total = np.zeros(3)
        still_pending = []
        for t_start, profile in self._pending:
            if self.clock + 1e-12 >= t_start:
                self._active.append((t_start, profile))
                # The impact shoves the arm off its path once, at onset.
                self.offset = self.offset + profile.pose_deviation * profile.direction
            else:
                still_pending.append((t_start, profile))
        self._pending = still_pending
        ends = []
        for t_start, profile in self._active:
            dur = (profile.duration / 3.0 if profile.kind == "tool_collision"
                   else profile.duration)
            t_rel = self.clock - t_start
            if t_rel >= dur:
                ends.append((t_start, profile))
            else:
                total = total + profile.force_at(t_rel)
        for item in ends:
            self._active.remove(item)
        return total

    def step(self, setpoint, dt) -> Observation:
        """Advance one control period toward ``setpoint`` and emit a sample."""
        setpoint = np.asarray(setpoint, dtype=float)
        t_emit = self.clock
        prev = self.pose[:3].copy()
        alpha = 1.0 - np.exp(-dt / self.track_tau)
        self.pose = self.pose + alpha * (setpoint - self.pose)
        q = self.pose[3:7]
        self.pose[3:7] = q / np.linalg.norm(q)
        velocity = (self.pose[:3] - prev) / dt

        pulse = self._pulse_force()
        measured = self.current_pose()
        force = (self.stiffness * (setpoint[:3] - measured[:3])
                 + self.viscosity * velocity + pulse
                 + self.rng.normal(0.0, self.sigma_force, 3))
        # Contact forces act close to the wrist axis, so the sensed moment is
        # the small lever cross product, not a copy of the force vector.
        torque = (np.cross(TORQUE_LEVER * _LEVER_AXIS, pulse)
                  + self.rng.normal(0.0, self.sigma_torque, 3))
        position = measured[:3] + self.rng.normal(0.0, self.sigma_pos, 3)
        quat = measured[3:7].copy()
        if quat[0] < 0:
            quat = -quat
        quat = quat / np.linalg.norm(quat)
        self.clock = t_emit + dt
        return Observation(t=t_emit, position=position, orientation=quat,
                           force=force, torque=torque)


@dataclass(frozen=True)
class Scenario:
    """Randomized disturbance scenario over repeated task executions.

    ``condition`` selects the injection pattern: ``nominal`` (none),
    ``anomaly_no_recovery`` (one disturbance per node, recovery policy off),
    ``one_per_node`` (one disturbance in every node) or ``multi_per_node``
    (``per_node`` >= 2 disturbances in every node, one per attempt).
    ``weak_fraction`` of injections are drawn from the weak amplitude range,
    producing borderline events that a detector may legitimately miss.
    ``direction_axis`` constrains contact directions to +/- a fixed world
    axis (e.g. the drawer pull axis); ``None`` samples isotropically.
    """

    task: str
    condition: str
    runs: int
    seed: int = 0
    kind: str = "human_collision"
    per_node: int = 5
    weak_fraction: float = 0.0
    amplitude_range: tuple = (10.0, 40.0)
    pose_dev_range: tuple = (0.02, 0.08)
    duration_range: tuple = (0.2, 0.4)
    weak_amplitude_range: tuple = (0.5, 2.0)
    weak_pose_dev_range: tuple = (0.0, 0.002)
    direction_axis: tuple | None = None

    def __post_init__(self):
        if self.direction_axis is not None:
            axis = np.asarray(self.direction_axis, dtype=float)
            if axis.shape != (3,) or not np.isclose(np.linalg.norm(axis), 1.0):
                raise SimError("direction_axis must be a unit 3-vector")
            object.__setattr__(self, "direction_axis", tuple(axis))
        if self.condition not in CONDITIONS:
            raise SimError(f"unknown condition {self.condition!r}")
        if self.runs <= 0:
            raise SimError("runs must be positive")
        if self.condition == "multi_per_node" and self.per_node < 2:
            raise SimError("multi_per_node requires per_node >= 2")
        if not 0.0 <= self.weak_fraction <= 1.0:
            raise SimError("weak_fraction must be in [0, 1]")

    @property
    def recovery_enabled(self) -> bool:
        return self.condition != "anomaly_no_recovery"


class DisturbanceSchedule:
    """Per-run queue of profiles keyed by node, consumed one per attempt."""

    def __init__(self, queues):
        self._queues = {k: list(v) for k, v in queues.items()}

    def next_profile(self, node_id):
        queue = self._queues.get(node_id)
        if queue:
            return queue.pop(0)
        return None

    @property
    def remaining(self) -> int:
        return sum(len(q) for q in self._queues.values())


def _draw_profile(scenario, node_duration, rng) -> DisturbanceProfile:
    weak = rng.random() < scenario.weak_fraction
    amp_rng = scenario.weak_amplitude_range if weak else scenario.amplitude_range
    dev_rng = scenario.weak_pose_dev_range if weak else scenario.pose_dev_range
    if scenario.direction_axis is not None:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        direction = sign * np.asarray(scenario.direction_axis, dtype=float)
    else:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
    onset = rng.uniform(0.15, 0.75) * node_duration
    return DisturbanceProfile(
        kind=scenario.kind,
        onset=float(onset),
        amplitude=float(rng.uniform(*amp_rng)),
        duration=float(rng.uniform(*scenario.duration_range)),
        direction=direction,
        pose_deviation=float(rng.uniform(*dev_rng)),
    )


def build_schedule(scenario: Scenario, node_durations: dict,
                   rng) -> DisturbanceSchedule:
    """Draw one run's worth of disturbances for the scenario condition."""
    queues = {}
    if scenario.condition == "nominal":
        return DisturbanceSchedule(queues)
    count = (scenario.per_node if scenario.condition == "multi_per_node" else 1)
    for node, duration in node_durations.items():
        queues[node] = [_draw_profile(scenario, duration, rng)
                        for _ in range(count)]
    return DisturbanceSchedule(queues)


def run_scenario(scenario: Scenario, graph, motions, models, thresholds,
                 scene=None, home_pose=HOME_POSE, rate_hz=200.0,
                 max_recoveries=10, monitor_log=None):
    """Execute `scenario.runs` seeded trials of a task graph.

    Returns a list of ExecutionResult (trace + exact injection ground
    truth). Per-run seeds are spawned deterministically from the scenario
    seed, so the whole batch is reproducible bit-for-bit.
    """
    from .introspect import Monitor
    from .taskgraph import ExecConfig, execute

    node_durations = {
        nid: motions.nominal_duration(node.motion)
        for nid, node in graph.nodes.items()
    }
    cap = max_recoveries if scenario.recovery_enabled else 0
    results = []
    root = np.random.SeedSequence(scenario.seed)
    for run_seq in root.spawn(scenario.runs):
        plant_seq, sched_seq = run_seq.spawn(2)
        plant = PlantState(scene=scene, home_pose=home_pose, rate_hz=rate_hz,
                           seed=plant_seq)
        schedule = build_schedule(scenario, node_durations,
                                  np.random.default_rng(sched_seq))
        monitor = Monitor(models=dict(models), thresholds=dict(thresholds),
                          rate_hz=rate_hz)
        config = ExecConfig(rate_hz=rate_hz, max_recoveries_per_node=cap,
                            monitor_log=monitor_log)
        results.append(execute(graph, plant, monitor, motions, config,
                               schedule=schedule))
    return results


def save_scenario(scenario: Scenario, path):
    with open(path, "w") as fh:
        fh.write(f"task {scenario.task}\n")
        fh.write(f"condition {scenario.condition}\n")
        fh.write(f"runs {scenario.runs}\n")
        fh.write(f"seed {scenario.seed}\n")
        fh.write(f"kind {scenario.kind}\n")
        fh.write(f"per_node {scenario.per_node}\n")
        fh.write(f"weak_fraction {scenario.weak_fraction:.17g}\n")
        for name in ("amplitude_range", "pose_dev_range", "duration_range",
                     "weak_amplitude_range", "weak_pose_dev_range"):
            lo, hi = getattr(scenario, name)
            fh.write(f"{name} {lo:.17g} {hi:.17g}\n")
        if scenario.direction_axis is not None:
            ax = " ".join(f"{v:.17g}" for v in scenario.direction_axis)
            fh.write(f"direction_axis {ax}\n")


def load_scenario(path) -> Scenario:
    fields = {}
    with open(path) as fh:
        for raw in fh:
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            fields[parts[0]] = parts[1:]
    try:
        kwargs = dict(
            task=fields["task"][0], condition=fields["condition"][0],
            runs=int(fields["runs"][0]), seed=int(fields["seed"][0]),
            kind=fields.get("kind", ["human_collision"])[0],
            per_node=int(fields.get("per_node", ["5"])[0]),
            weak_fraction=float(fields.get("weak_fraction", ["0"])[0]),
        )
    except KeyError as exc:
        raise SimError(f"scenario file missing field {exc}") from exc
    for name in ("amplitude_range", "pose_dev_range", "duration_range",
                 "weak_amplitude_range", "weak_pose_dev_range"):
        if name in fields:
            kwargs[name] = tuple(float(v) for v in fields[name])
    if "direction_axis" in fields:
        kwargs["direction_axis"] = tuple(
            float(v) for v in fields["direction_axis"])
    return Scenario(**kwargs)
