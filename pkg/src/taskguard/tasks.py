"""Shipped task definitions and end-to-end pipeline helpers.

Two five-node tasks are built in: a pick-and-place (spline motions; the
approach and retract nodes share one introspection skill) and a drawer
open/close task (DMP motions fitted from minimum-jerk demonstrations).
This module also wires the full pipeline: nominal training-data
generation via the executor, per-skill model fitting for either backend,
and LOOCV threshold calibration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hmm import FitConfig, SkillModel, baum_welch_fit
from .introspect import (
    DEFAULT_K_SIGMA,
    DEFAULT_SAFETY,
    DEFAULT_SMOOTH_WINDOW,
    calibrate,
)
from .motion import Trajectory, dmp_fit, min_jerk, normalize_quaternions
from .obsdata import Observation, Trial, TrialSet, from_feature_vector
from .shdp import ShdpConfig, fit_shdp_ar_hmm
from .sim import HOME_POSE, PlantState
from .taskgraph import ExecConfig, MotionLibrary, Node, TaskGraph, execute

TASK_NAMES = ("pick_place", "drawer")
BACKENDS = ("hmm", "shdp-ar")

DEFAULT_TRAINING_RUNS = 10
DEFAULT_HMM_MODES = 5
TRAINING_START_JITTER = 0.003  # m, per-run start pose spread

_IDENT = (1.0, 0.0, 0.0, 0.0)
_GRIP_QUAT = (np.cos(0.1), 0.0, 0.0, np.sin(0.1))


def _pose(xyz, quat=_IDENT):
    return np.array([*xyz, *quat], dtype=float)


PICK_PLACE_SCENE = {
    "item": _pose([0.55, 0.10, 0.12]),
    "shelf": _pose([0.45, -0.25, 0.12]),
}

DRAWER_SCENE = {
    "handle": _pose([0.60, -0.10, 0.20], _GRIP_QUAT),
}


@dataclass
class TaskAssets:
    """Everything needed to execute one built-in task."""

    name: str
    graph: TaskGraph
    motions: MotionLibrary
    scene: dict
    home_pose: np.ndarray = field(default_factory=lambda: HOME_POSE.copy())
    # Start-pose spread for nominal training runs. Spline motions replan
    # through shifted waypoints after a recovery, so their bands must cover
    # that variation; DMP motions converge back to the demonstrated path and
    # train tighter without it.
    training_jitter: float = TRAINING_START_JITTER

    @property
    def skill_ids(self):
        seen = []
        for node in self.graph.nodes.values():
            if node.skill_id not in seen:
                seen.append(node.skill_id)
        return seen


def _static(xyz, quat=_IDENT):
    return ("static", _pose(xyz, quat))


def _pick_place(rate_hz) -> TaskAssets:
    above_item = [0.55, 0.10, 0.27]
    above_shelf = [0.45, -0.25, 0.27]
    nodes = {}
    for node in (
        Node("pre-pick", "pre-pick", "spline:1.5", _static(above_item)),
        Node("pick", "pick", "spline:1.2", ("scene", "item"),
             dependency="pre-pick"),
        Node("pre-pick-retract", "pre-pick", "spline:1.5", _static(above_item)),
        Node("pre-place", "pre-place", "spline:1.8", _static(above_shelf)),
        Node("place", "place", "spline:1.2", ("scene", "shelf"),
             dependency="pre-place"),
    ):
        nodes[node.id] = node
    graph = TaskGraph(
        nodes=nodes,
        edges=(("pre-pick", "pick"), ("pick", "pre-pick-retract"),
               ("pre-pick-retract", "pre-place"), ("pre-place", "place")),
        entry="pre-pick",
    )
    return TaskAssets(name="pick_place", graph=graph,
                      motions=MotionLibrary(rate_hz=rate_hz),
                      scene=dict(PICK_PLACE_SCENE))


def _drawer(rate_hz) -> TaskAssets:
    handle = DRAWER_SCENE["handle"]
    pre_grip = _pose(handle[:3] + [-0.15, 0.0, 0.0], _GRIP_QUAT)
    open_pose = _pose(handle[:3] + [-0.25, 0.0, 0.0], _GRIP_QUAT)
    nodes = {}
    for node in (
        Node("pre-grip", "pre-grip", "dmp:pre_grip",
             ("static", pre_grip)),
        Node("grip", "grip", "dmp:grip", ("scene", "handle"),
             dependency="pre-grip"),
        Node("pull-to-open", "pull-to-open", "dmp:pull",
             ("static", open_pose), dependency="grip"),
        Node("push-to-close", "push-to-close", "dmp:push",
             ("static", handle.copy())),
        Node("go-back-to-start", "go-back-to-start", "dmp:home",
             ("static", HOME_POSE.copy())),
    ):
        nodes[node.id] = node
    graph = TaskGraph(
        nodes=nodes,
        edges=(("pre-grip", "grip"), ("grip", "pull-to-open"),
               ("pull-to-open", "push-to-close"),
               ("push-to-close", "go-back-to-start")),
        entry="pre-grip",
    )
    motions = MotionLibrary(rate_hz=rate_hz)
    demos = {
        "pre_grip": (HOME_POSE, pre_grip, 1.8),
        "grip": (pre_grip, handle, 1.2),
        "pull": (handle, open_pose, 1.6),
        "push": (open_pose, handle, 1.6),
        "home": (handle, HOME_POSE, 1.8),
    }
    for name, (start, goal, duration) in demos.items():
        demo = min_jerk(start, goal, duration=duration, rate_hz=rate_hz)
        demo = Trajectory(rate_hz=rate_hz,
                          positions=normalize_quaternions(demo.positions))
        motions.register_dmp(name, dmp_fit(demo))
    return TaskAssets(name="drawer", graph=graph, motions=motions,
                      scene=dict(DRAWER_SCENE), training_jitter=0.0)


def build_task(name, rate_hz=200.0) -> TaskAssets:
    if name == "pick_place":
        return _pick_place(rate_hz)
    if name == "drawer":
        return _drawer(rate_hz)
    raise KeyError(f"unknown task {name!r}; choose from {TASK_NAMES}")


def _stream_to_trial(skill_id, rate_hz, stream) -> Trial:
    samples = tuple(
        from_feature_vector(vec, t=j / rate_hz) for j, vec in enumerate(stream)
    )
    return Trial(skill_id=skill_id, rate_hz=rate_hz, samples=samples)


def generate_training(assets: TaskAssets, runs=DEFAULT_TRAINING_RUNS, seed=0,
                      rate_hz=200.0, start_jitter=None) -> dict:
    """Nominal executor runs sliced into per-skill training TrialSets.

    Monitoring is off; each node attempt's observation stream becomes one
    trial of that node's skill, so shared skills (pick-and-place approach
    and retract) pool trials from every node that references them. Start
    poses are jittered across runs so the calibrated bands cover the
    millimetre-scale path variation seen when replanning after recovery.
    """
    if start_jitter is None:
        start_jitter = assets.training_jitter
    by_skill = {s: [] for s in assets.skill_ids}
    root = np.random.SeedSequence(seed)
    for run_seq in root.spawn(runs):
        plant = PlantState(scene=assets.scene, home_pose=assets.home_pose,
                           rate_hz=rate_hz, seed=run_seq)
        config = ExecConfig(rate_hz=rate_hz, record_observations=True,
                            node_entry_jitter=start_jitter)
        result = execute(assets.graph, plant, None, assets.motions, config)
        if not result.trace.completed:
            raise RuntimeError("nominal training run did not complete")
        for _node_id, skill_id, _t0, stream in result.node_streams:
            by_skill[skill_id].append(
                _stream_to_trial(skill_id, rate_hz, stream))
    return {s: TrialSet(skill_id=s, trials=tuple(trials))
            for s, trials in by_skill.items()}


def train_skills(trialsets: dict, backend="shdp-ar", seed=0,
                 n_modes=DEFAULT_HMM_MODES, var_order=1,
                 iterations=None) -> tuple[dict, dict]:
    """Fit one introspection model per skill; returns (models, diagnostics).

    ``hmm`` is the baseline Gaussian-emission HMM trained by EM;
    ``shdp-ar`` is the sticky HDP-AR-HMM posterior point estimate.
    """
    if backend not in BACKENDS:
        raise KeyError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    models: dict[str, SkillModel] = {}
    diagnostics = {}
    for i, (skill_id, ts) in enumerate(sorted(trialsets.items())):
        data = ts.feature_arrays()
        if backend == "hmm":
            config = FitConfig(seed=seed + i,
                               **({"max_iter": iterations} if iterations else {}))
            result = baum_welch_fit(data, K=n_modes, kind="gaussian_full",
                                    config=config, skill_id=skill_id)
            models[skill_id] = result.model
            diagnostics[skill_id] = {"logliks": result.logliks}
        else:
            config = ShdpConfig(order=var_order, seed=seed + i,
                                **({"iterations": iterations,
                                    "burn_in": iterations // 2}
                                   if iterations else {}))
            model, diag = fit_shdp_ar_hmm(data, config, skill_id=skill_id)
            models[skill_id] = model
            diagnostics[skill_id] = diag
    return models, diagnostics


def calibrate_skills(models: dict, trialsets: dict, k=DEFAULT_K_SIGMA,
                     safety=DEFAULT_SAFETY,
                     smooth_window=DEFAULT_SMOOTH_WINDOW) -> dict:
    """LOOCV threshold calibration for every trained skill."""
    thresholds = {}
    for skill_id, model in models.items():
        thresholds[skill_id] = calibrate(
            trialsets[skill_id], model, k=k, safety=safety,
            smooth_window=smooth_window)
    return thresholds
