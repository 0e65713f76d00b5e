"""Streaming skill identification and anomaly detection.

Every loaded skill model scores the incoming observation stream into a
cumulative log-likelihood (L-) curve. The indexed skill is classified as
correctly identified when its curve strictly dominates all others. Anomaly
detection tracks the gap between the active skill's L-curve and its
calibrated lower band (mean minus k standard deviations of training
curves) and flags when the smoothed time derivative of that gap exceeds a
threshold calibrated by leave-one-out cross-validation. At a skill
boundary all scoring state is reset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hmm import ForwardState, SkillModel, forward_lcurve, forward_step

DEFAULT_K_SIGMA = 5.0
DEFAULT_SAFETY = 1.2
DEFAULT_SMOOTH_WINDOW = 5

STATUS_NOMINAL = "nominal"
STATUS_ANOMALY = "anomaly"


class CalibrationError(Exception):
    """Training trials unsuitable for threshold calibration."""


@dataclass
class LCurve:
    """Per-timestep cumulative log-likelihoods of one model on one stream."""

    skill_id: str
    rate_hz: float
    values: list = field(default_factory=list)

    def append(self, value):
        if not math.isfinite(value):
            raise ValueError("non-finite cumulative log-likelihood")
        self.values.append(float(value))

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class ThresholdModel:
    """Per-skill L-curve band statistics and the calibrated derivative bound."""

    skill_id: str
    rate_hz: float
    mu: np.ndarray  # per-timestep mean of training L-curves
    sigma: np.ndarray  # per-timestep standard deviation
    k: float  # sigma multiplier of the lower band
    f2_threshold: float  # nats per second, > 0
    smooth_window: int = DEFAULT_SMOOTH_WINDOW

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be non-negative")
        if self.f2_threshold <= 0:
            raise ValueError("f2_threshold must be positive")

    @property
    def horizon(self) -> int:
        return len(self.mu)

    def band(self, t_idx) -> float:
        """Lower band mu - k*sigma; clamped to the final value beyond horizon."""
        i = min(int(t_idx), self.horizon - 1)
        return float(self.mu[i] - self.k * self.sigma[i])


def gap_to_f2(gaps, rate_hz, window=DEFAULT_SMOOTH_WINDOW) -> np.ndarray:
    """Smoothed derivative statistics of a gap sequence (nats/second).

    The gap is smoothed by a centered moving average; only indices whose
    window fits entirely inside the sequence produce a statistic, so streamed
    and batch evaluation agree exactly. Output length is
    max(len(gaps) - window, 0): one first difference per adjacent pair of
    fully-windowed smoothed values.
    """
    gaps = np.asarray(gaps, dtype=float)
    n = len(gaps)
    if n < window + 1:
        return np.zeros(0)
    kernel = np.ones(window) / window
    smoothed = np.convolve(gaps, kernel, mode="valid")  # length n - window + 1
    return np.diff(smoothed) * rate_hz


def lcurve_band_stats(curves) -> tuple[np.ndarray, np.ndarray]:
    """Per-timestep mean and standard deviation, truncated to the shortest curve."""
    horizon = min(len(c) for c in curves)
    mat = np.stack([np.asarray(c[:horizon], dtype=float) for c in curves])
    return mat.mean(axis=0), mat.std(axis=0)


def _fold_peak_f2(curve, mu, sigma, k, rate_hz, window):
    horizon = min(len(curve), len(mu))
    band = mu[:horizon] - k * sigma[:horizon]
    gaps = np.abs(np.asarray(curve[:horizon]) - band)
    stats = gap_to_f2(gaps, rate_hz, window)
    return float(stats.max()) if stats.size else 0.0


def calibrate(training, model: SkillModel, k=DEFAULT_K_SIGMA, safety=DEFAULT_SAFETY,
              smooth_window=DEFAULT_SMOOTH_WINDOW) -> ThresholdModel:
    """Build a ThresholdModel from nominal training trials by LOOCV.

    The derivative bound is safety times the largest peak statistic observed
    when each trial is scored against the band built from the others, which
    guarantees zero flags when replaying the training trials.
    """
    seqs = training.feature_arrays()
    rate_hz = training.rate_hz
    if len(seqs) < 3:
        raise CalibrationError("calibration needs at least 3 trials")
    lengths = [len(s) for s in seqs]
    if (max(lengths) - min(lengths)) > 0.2 * min(lengths):
        raise CalibrationError(
            f"trial lengths spread too wide ({min(lengths)}..{max(lengths)}); "
            "inconsistent skill executions"
        )
    curves = [forward_lcurve(model, s) for s in seqs]
    peak = 0.0
    for i in range(len(curves)):
        rest = curves[:i] + curves[i + 1:]
        mu_i, sigma_i = lcurve_band_stats(rest)
        peak = max(peak, _fold_peak_f2(curves[i], mu_i, sigma_i, k, rate_hz,
                                       smooth_window))
    mu, sigma = lcurve_band_stats(curves)
    return ThresholdModel(
        skill_id=model.skill_id, rate_hz=rate_hz, mu=mu, sigma=sigma, k=k,
        f2_threshold=max(safety * peak, 1e-9), smooth_window=smooth_window,
    )


def classify_nominal(lcurves: dict, s_c) -> tuple[bool, float]:
    """Strict-dominance skill identification.

    `lcurves` maps skill id to its latest cumulative log-likelihood. Returns
    (correct, margin); margin is +inf when only the indexed model is loaded.
    """
    if s_c not in lcurves:
        raise KeyError(f"unknown indexed skill {s_c!r}")
    own = lcurves[s_c]
    others = [v for s, v in lcurves.items() if s != s_c]
    if not others:
        return True, math.inf
    margin = own - max(others)
    return margin > 0, margin


@dataclass
class Monitor:
    """Single-owner streaming scorer for one executing task.

    Holds one forward state and L-curve per loaded model, the active skill
    index, and the detector's gap memory. The anomaly status latches until
    :meth:`reset`.
    """

    models: dict  # skill_id -> SkillModel
    thresholds: dict  # skill_id -> ThresholdModel
    rate_hz: float
    active_skill: str | None = None
    status: str = STATUS_NOMINAL
    last_f2: float = 0.0
    _fwd: dict = field(default_factory=dict)
    _curves: dict = field(default_factory=dict)
    _gaps: list = field(default_factory=list)

    def __post_init__(self):
        for skill_id in self.thresholds:
            if skill_id not in self.models:
                raise KeyError(f"threshold for unloaded model {skill_id!r}")
        if self.active_skill is None and self.models:
            self.active_skill = next(iter(self.models))
        self.reset(self.active_skill)

    @property
    def step_count(self) -> int:
        return len(self._gaps)

    def lcurves(self) -> dict:
        """Latest L_t per model (skills with no scored steps map to 0.0)."""
        return {s: (c.values[-1] if c.values else 0.0)
                for s, c in self._curves.items()}

    def lcurve(self, skill_id) -> LCurve:
        return self._curves[skill_id]

    def reset(self, new_skill):
        """Clear all forward states, L-curves, and detector memory."""
        if new_skill not in self.models:
            raise KeyError(f"unknown skill {new_skill!r}")
        self.active_skill = new_skill
        self.status = STATUS_NOMINAL
        self.last_f2 = 0.0
        self._fwd = {s: ForwardState() for s in self.models}
        self._curves = {s: LCurve(skill_id=s, rate_hz=self.rate_hz)
                        for s in self.models}
        self._gaps = []

    def score_step(self, feature_vec) -> dict:
        """Advance every model's L-curve by one observation."""
        out = {}
        for skill_id, model in self.models.items():
            state = forward_step(model, self._fwd[skill_id], feature_vec)
            self._curves[skill_id].append(state.loglik)
            out[skill_id] = state.loglik
        return out

    def detect_step(self) -> tuple[str, float]:
        """Update the F2 detector from the active skill's latest L value.

        Returns (status, newest F2 statistic). The statistic trails the
        stream by the smoothing half-window; early steps report 0.0.
        """
        thresh = self.thresholds.get(self.active_skill)
        if thresh is None:
            raise KeyError(f"no calibration for skill {self.active_skill!r}")
        curve = self._curves[self.active_skill]
        t_idx = len(curve) - 1
        gap = abs(curve.values[-1] - thresh.band(t_idx))
        self._gaps.append(gap)
        window = thresh.smooth_window
        stats = gap_to_f2(self._gaps[-(window + 1):], self.rate_hz, window)
        f2 = float(stats[-1]) if stats.size else 0.0
        self.last_f2 = f2
        if f2 > thresh.f2_threshold:
            self.status = STATUS_ANOMALY
        return self.status, f2

    def step(self, feature_vec) -> tuple[str, float]:
        """score_step followed by detect_step."""
        self.score_step(feature_vec)
        return self.detect_step()


def save_threshold(thresh: ThresholdModel, path):
    with open(path, "w") as fh:
        fh.write(f"skill {thresh.skill_id}\n")
        fh.write(f"rate {thresh.rate_hz:.17g}\n")
        fh.write(f"k {thresh.k:.17g}\n")
        fh.write(f"f2_threshold {thresh.f2_threshold:.17g}\n")
        fh.write(f"smooth_window {thresh.smooth_window}\n")
        fh.write(f"horizon {thresh.horizon}\n")
        for m, s in zip(thresh.mu, thresh.sigma):
            fh.write(f"{m:.17g} {s:.17g}\n")


def load_threshold(path) -> ThresholdModel:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = {}
    idx = 0
    for key in ("skill", "rate", "k", "f2_threshold", "smooth_window", "horizon"):
        tag, value = lines[idx].split(None, 1)
        if tag != key:
            raise ValueError(f"expected {key!r}, found {tag!r}")
        header[key] = value
        idx += 1
    horizon = int(header["horizon"])
    rows = np.array([[float(v) for v in ln.split()] for ln in lines[idx:idx + horizon]])
    return ThresholdModel(
        skill_id=header["skill"], rate_hz=float(header["rate"]),
        mu=rows[:, 0], sigma=rows[:, 1], k=float(header["k"]),
        f2_threshold=float(header["f2_threshold"]),
        smooth_window=int(header["smooth_window"]),
    )
