"""Request/response models for the pipeline service.

Endpoints operate at job granularity: requests name input/output
directories on the service host and responses return file paths plus
summary numbers, so large observation streams never cross the wire.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class SimulateRequest(BaseModel):
    task: str
    out_dir: str
    runs: int = Field(default=10, ge=1)
    seed: int = 0
    rate_hz: float = Field(default=200.0, gt=0)


class SimulateResponse(BaseModel):
    trial_files: dict[str, str]
    trials_per_skill: dict[str, int]


class TrainRequest(BaseModel):
    training_dir: str
    out_dir: str
    backend: str = "shdp-ar"
    seed: int = 0
    n_modes: int = Field(default=5, ge=1)
    var_order: int = Field(default=1, ge=1)
    iterations: int | None = Field(default=None, ge=2)


class TrainResponse(BaseModel):
    model_files: dict[str, str]
    backend: str
    n_modes: dict[str, int]


class CalibrateRequest(BaseModel):
    training_dir: str
    models_dir: str
    out_dir: str
    k: float = Field(default=5.0, gt=0)
    safety: float = Field(default=1.2, ge=1.0)
    smooth_window: int = Field(default=5, ge=2)


class CalibrateResponse(BaseModel):
    threshold_files: dict[str, str]
    f2_thresholds: dict[str, float]


class RunRequest(BaseModel):
    task: str
    condition: str
    models_dir: str
    thresholds_dir: str
    out_dir: str
    runs: int = Field(default=10, ge=1)
    seed: int = 0
    rate_hz: float = Field(default=200.0, gt=0)
    kind: str = "human_collision"
    per_node: int = Field(default=5, ge=2)
    weak_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    amplitude_range: tuple[float, float] = (10.0, 40.0)
    pose_dev_range: tuple[float, float] = (0.02, 0.08)
    duration_range: tuple[float, float] = (0.2, 0.4)
    weak_amplitude_range: tuple[float, float] = (0.5, 2.0)
    weak_pose_dev_range: tuple[float, float] = (0.0, 0.002)
    direction_axis: tuple[float, float, float] | None = None
    max_recoveries: int = Field(default=10, ge=0)
    match_window: float = Field(default=1.0, gt=0)


class RunSummary(BaseModel):
    completed: int
    runs: int
    injections: int
    flags: int
    recovery_rate: float
    micro_precision: float
    micro_recall: float
    macro_precision: float
    macro_recall: float
    harmonic_f1: float


class RunResponse(BaseModel):
    run_dir: str
    summary: RunSummary


class ReportRequest(BaseModel):
    run_dirs: list[str]
    out_csv: str
    out_text: str | None = None
    match_window: float = Field(default=1.0, gt=0)


class ReportRowModel(BaseModel):
    task: str
    condition: str
    backend: str
    runs: int
    injections: int
    recovery_rate: float
    micro_precision: float
    micro_recall: float
    macro_precision: float
    macro_recall: float
    harmonic_f1: float


class ReportResponse(BaseModel):
    csv_path: str
    text_path: str | None
    rows: list[ReportRowModel]
