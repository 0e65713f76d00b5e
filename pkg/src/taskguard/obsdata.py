"""Multimodal observation data model and trial file ingestion.

Observations carry end-effector pose (position + unit quaternion) and wrench
(force + torque) sampled at a fixed rate. Trials are skill-labeled sequences
of observations; a trial file concatenates one or more trials in a
line-delimited text format (see ``load_trials``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FEATURE_DIM = 13
DEFAULT_RATE_HZ = 200.0

_QUAT_NORM_TOL = 1e-6
_SPACING_TOL = 1e-9


class DataError(Exception):
    """Base error for trial data problems."""


class ParseError(DataError):
    """Malformed trial file; carries the 1-based line number."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class InvariantViolation(DataError):
    """A constructed Observation/Trial/TrialSet violates an invariant."""


@dataclass(frozen=True)
class Observation:
    """One 13-D pose + wrench sample.

    Fields: time since trial start (s), position (m), orientation as a unit
    quaternion (w, x, y, z), force (N), torque (N m).
    """

    t: float
    position: np.ndarray
    orientation: np.ndarray
    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float))
        object.__setattr__(self, "torque", np.asarray(self.torque, dtype=float))
        if not np.isfinite(self.t) or self.t < 0:
            raise InvariantViolation(f"t must be finite and non-negative, got {self.t}")
        for name in ("position", "force", "torque"):
            if getattr(self, name).shape != (3,):
                raise InvariantViolation(f"{name} must be a 3-vector")
        if self.orientation.shape != (4,):
            raise InvariantViolation("orientation must be a (w,x,y,z) quaternion")
        norm = float(np.linalg.norm(self.orientation))
        if abs(norm - 1.0) > _QUAT_NORM_TOL:
            raise InvariantViolation(f"orientation norm {norm} is not within 1e-6 of 1")


def to_feature_vector(obs: Observation) -> np.ndarray:
    """Concatenate [position(3), quaternion(4), force(3), torque(3)]."""
    return np.concatenate([obs.position, obs.orientation, obs.force, obs.torque])


def from_feature_vector(vec, t=0.0) -> Observation:
    """Inverse of :func:`to_feature_vector` (quaternion sign preserved)."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (FEATURE_DIM,):
        raise InvariantViolation(f"feature vector must have shape ({FEATURE_DIM},)")
    return Observation(
        t=t,
        position=vec[0:3],
        orientation=vec[3:7],
        force=vec[7:10],
        torque=vec[10:13],
    )


@dataclass(frozen=True)
class Trial:
    """A fixed-rate, skill-labeled observation sequence.

    ``anomaly_times`` holds ground-truth disturbance onsets (possibly empty).
    """

    skill_id: str
    rate_hz: float
    samples: tuple[Observation, ...]
    outcome: str = "nominal"
    anomaly_times: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "anomaly_times", tuple(self.anomaly_times))
        if self.outcome not in ("nominal", "anomalous"):
            raise InvariantViolation(f"unknown outcome {self.outcome!r}")
        if self.rate_hz <= 0:
            raise InvariantViolation("rate_hz must be positive")
        dt = 1.0 / self.rate_hz
        ts = np.array([s.t for s in self.samples])
        if len(ts) >= 2:
            gaps = np.diff(ts)
            if np.any(gaps <= 0) or np.any(np.abs(gaps - dt) > _SPACING_TOL):
                bad = int(np.argmax(np.abs(gaps - dt)))
                raise InvariantViolation(
                    f"timestamps must increase by 1/rate_hz; sample {bad + 1} "
                    f"has spacing {gaps[bad]}"
                )
        dur = self.duration
        for at in self.anomaly_times:
            if not 0.0 <= at <= dur:
                raise InvariantViolation(f"anomaly time {at} outside [0, {dur}]")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        """Trial duration in seconds (sample count over rate)."""
        return len(self.samples) / self.rate_hz

    def features(self) -> np.ndarray:
        """(T, 13) feature matrix in sample order."""
        if not self.samples:
            return np.zeros((0, FEATURE_DIM))
        return np.stack([to_feature_vector(s) for s in self.samples])


@dataclass(frozen=True)
class TrialSet:
    """Trials of one skill sharing a sample rate."""

    skill_id: str
    trials: tuple[Trial, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        for i, tr in enumerate(self.trials):
            if tr.skill_id != self.skill_id:
                raise InvariantViolation(
                    f"trial {i} has skill {tr.skill_id!r}, expected {self.skill_id!r}"
                )
            if tr.rate_hz != self.trials[0].rate_hz:
                raise InvariantViolation(f"trial {i} has mismatched rate_hz")

    def __len__(self):
        return len(self.trials)

    @property
    def rate_hz(self) -> float:
        return self.trials[0].rate_hz if self.trials else DEFAULT_RATE_HZ

    def feature_arrays(self) -> list[np.ndarray]:
        return [tr.features() for tr in self.trials]


def _parse_header(lineno, line):
    fields = {}
    for token in line.split()[1:]:
        if "=" not in token:
            raise ParseError(lineno, f"bad header token {token!r}")
        key, value = token.split("=", 1)
        fields[key] = value
    for key in ("skill", "rate", "outcome", "anomalies"):
        if key not in fields:
            raise ParseError(lineno, f"header missing {key!r}")
    try:
        rate = float(fields["rate"])
    except ValueError:
        raise ParseError(lineno, f"bad rate {fields['rate']!r}") from None
    if fields["anomalies"] == "none":
        anomalies = ()
    else:
        try:
            anomalies = tuple(float(x) for x in fields["anomalies"].split(","))
        except ValueError:
            raise ParseError(lineno, f"bad anomalies {fields['anomalies']!r}") from None
    return fields["skill"], rate, fields["outcome"], anomalies


def load_trials(path) -> TrialSet:
    """Load a trial file into a validated TrialSet.

    Format: a ``#trial skill=<id> rate=<hz> outcome=<o> anomalies=<list|none>``
    header line per trial, followed by sample lines of 14 whitespace-separated
    decimals: t px py pz qw qx qy qz fx fy fz tx ty tz.
    """
    headers = []  # (lineno, skill, rate, outcome, anomalies)
    rows = []  # per trial: list of 14-field float rows
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#trial"):
                headers.append((lineno,) + _parse_header(lineno, line))
                rows.append([])
                continue
            if line.startswith("#"):
                continue
            if not headers:
                raise ParseError(lineno, "sample line before any #trial header")
            parts = line.split()
            if len(parts) != 14:
                raise ParseError(lineno, f"expected 14 fields, got {len(parts)}")
            try:
                rows[-1].append([float(p) for p in parts])
            except ValueError:
                raise ParseError(lineno, "non-numeric field") from None
    if not headers:
        raise DataError(f"no trials in {path}")

    trials = []
    for idx, ((lineno, skill, rate, outcome, anomalies), data) in enumerate(
        zip(headers, rows)
    ):
        try:
            samples = tuple(
                Observation(
                    t=row[0],
                    position=np.array(row[1:4]),
                    orientation=np.array(row[4:8]),
                    force=np.array(row[8:11]),
                    torque=np.array(row[11:14]),
                )
                for row in data
            )
            trials.append(
                Trial(
                    skill_id=skill,
                    rate_hz=rate,
                    samples=samples,
                    outcome=outcome,
                    anomaly_times=anomalies,
                )
            )
        except InvariantViolation as exc:
            raise InvariantViolation(f"trial {idx} (header line {lineno}): {exc}") from exc
    try:
        return TrialSet(skill_id=trials[0].skill_id, trials=tuple(trials))
    except InvariantViolation as exc:
        raise InvariantViolation(f"{path}: {exc}") from exc


def save_trials(trialset: TrialSet, path):
    """Write a TrialSet in the trial file format (17 significant digits)."""
    with open(path, "w") as fh:
        for tr in trialset.trials:
            anomalies = (
                ",".join(f"{a:.17g}" for a in tr.anomaly_times)
                if tr.anomaly_times
                else "none"
            )
            fh.write(
                f"#trial skill={tr.skill_id} rate={tr.rate_hz:.17g} "
                f"outcome={tr.outcome} anomalies={anomalies}\n"
            )
            for s in tr.samples:
                vals = [s.t, *s.position, *s.orientation, *s.force, *s.torque]
                fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")
