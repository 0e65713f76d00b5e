"""FastAPI service wrapping the recovery pipeline.

Each endpoint runs one pipeline stage synchronously and persists its
artifacts to the requested directory: simulate (nominal training data),
train (per-skill introspection models), calibrate (LOOCV thresholds),
run (scenario execution with traces + ground truth) and report
(recompute metrics from persisted logs).
"""

from __future__ import annotations

import os

from fastapi import FastAPI, HTTPException

from .. import bench
from ..hmm import ModelError, load_model, save_model
from ..introspect import CalibrationError, load_threshold, save_threshold
from ..obsdata import DataError, load_trials, save_trials
from ..sim import Scenario, SimError, run_scenario
from ..taskgraph import GraphError
from ..tasks import (
    build_task,
    calibrate_skills,
    generate_training,
    train_skills,
)
from . import schemas

VERSION = "0.1.0"

_PIPELINE_ERRORS = (DataError, ModelError, CalibrationError, GraphError,
                    SimError, KeyError, ValueError, RuntimeError,
                    FileNotFoundError)


def _load_trialsets(training_dir):
    files = sorted(f for f in os.listdir(training_dir)
                   if f.endswith(".trials"))
    if not files:
        raise FileNotFoundError(f"no .trials files in {training_dir}")
    out = {}
    for name in files:
        ts = load_trials(os.path.join(training_dir, name))
        out[ts.skill_id] = ts
    return out


def _load_models(models_dir):
    files = sorted(f for f in os.listdir(models_dir) if f.endswith(".model"))
    if not files:
        raise FileNotFoundError(f"no .model files in {models_dir}")
    models = {}
    for name in files:
        model = load_model(os.path.join(models_dir, name))
        models[model.skill_id] = model
    backend = "hmm"
    manifest = os.path.join(models_dir, "MANIFEST")
    if os.path.exists(manifest):
        with open(manifest) as fh:
            for raw in fh:
                parts = raw.split()
                if parts[:1] == ["backend"]:
                    backend = parts[1]
    return models, backend


def _load_thresholds(thresholds_dir):
    files = sorted(f for f in os.listdir(thresholds_dir)
                   if f.endswith(".threshold"))
    if not files:
        raise FileNotFoundError(f"no .threshold files in {thresholds_dir}")
    out = {}
    for name in files:
        th = load_threshold(os.path.join(thresholds_dir, name))
        out[th.skill_id] = th
    return out


def create_app() -> FastAPI:
    app = FastAPI(title="taskguard", version=VERSION)

    def run_stage(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _PIPELINE_ERRORS as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=VERSION)

    @app.post("/simulate", response_model=schemas.SimulateResponse)
    def simulate(req: schemas.SimulateRequest):
        def stage():
            assets = build_task(req.task, rate_hz=req.rate_hz)
            trialsets = generate_training(assets, runs=req.runs,
                                          seed=req.seed, rate_hz=req.rate_hz)
            os.makedirs(req.out_dir, exist_ok=True)
            files = {}
            for skill_id, ts in sorted(trialsets.items()):
                path = os.path.join(req.out_dir, f"{skill_id}.trials")
                save_trials(ts, path)
                files[skill_id] = path
            return schemas.SimulateResponse(
                trial_files=files,
                trials_per_skill={s: len(ts) for s, ts in trialsets.items()},
            )
        return run_stage(stage)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        def stage():
            trialsets = _load_trialsets(req.training_dir)
            models, _diag = train_skills(
                trialsets, backend=req.backend, seed=req.seed,
                n_modes=req.n_modes, var_order=req.var_order,
                iterations=req.iterations)
            os.makedirs(req.out_dir, exist_ok=True)
            files = {}
            for skill_id, model in sorted(models.items()):
                path = os.path.join(req.out_dir, f"{skill_id}.model")
                save_model(model, path)
                files[skill_id] = path
            with open(os.path.join(req.out_dir, "MANIFEST"), "w") as fh:
                fh.write(f"backend {req.backend}\n")
                for skill_id in sorted(models):
                    fh.write(f"model {skill_id} {skill_id}.model\n")
            return schemas.TrainResponse(
                model_files=files, backend=req.backend,
                n_modes={s: m.K for s, m in models.items()},
            )
        return run_stage(stage)

    @app.post("/calibrate", response_model=schemas.CalibrateResponse)
    def calibrate_endpoint(req: schemas.CalibrateRequest):
        def stage():
            trialsets = _load_trialsets(req.training_dir)
            models, _backend = _load_models(req.models_dir)
            thresholds = calibrate_skills(
                models, trialsets, k=req.k, safety=req.safety,
                smooth_window=req.smooth_window)
            os.makedirs(req.out_dir, exist_ok=True)
            files = {}
            for skill_id, th in sorted(thresholds.items()):
                path = os.path.join(req.out_dir, f"{skill_id}.threshold")
                save_threshold(th, path)
                files[skill_id] = path
            return schemas.CalibrateResponse(
                threshold_files=files,
                f2_thresholds={s: th.f2_threshold
                               for s, th in thresholds.items()},
            )
        return run_stage(stage)

    @app.post("/run", response_model=schemas.RunResponse)
    def run(req: schemas.RunRequest):
        def stage():
            assets = build_task(req.task, rate_hz=req.rate_hz)
            models, backend = _load_models(req.models_dir)
            thresholds = _load_thresholds(req.thresholds_dir)
            missing = [s for s in assets.skill_ids
                       if s not in models or s not in thresholds]
            if missing:
                raise ModelError(f"missing models/thresholds for {missing}")
            scenario = Scenario(
                task=req.task, condition=req.condition, runs=req.runs,
                seed=req.seed, kind=req.kind, per_node=req.per_node,
                weak_fraction=req.weak_fraction,
                amplitude_range=req.amplitude_range,
                pose_dev_range=req.pose_dev_range,
                duration_range=req.duration_range,
                weak_amplitude_range=req.weak_amplitude_range,
                weak_pose_dev_range=req.weak_pose_dev_range,
                direction_axis=req.direction_axis)
            results = run_scenario(
                scenario, assets.graph, assets.motions, models, thresholds,
                scene=assets.scene, home_pose=assets.home_pose,
                rate_hz=req.rate_hz, max_recoveries=req.max_recoveries)
            skill_map = {nid: node.skill_id
                         for nid, node in assets.graph.nodes.items()}
            meta = {
                "task": req.task, "condition": req.condition,
                "backend": backend, "runs": req.runs, "seed": req.seed,
                "match_window": req.match_window,
            }
            bench.save_run_batch(results, meta, skill_map, req.out_dir)
            _conf, stats, recovery = bench.summarize(
                results, skill_of=skill_map.get, window=req.match_window)
            summary = schemas.RunSummary(
                completed=sum(r.trace.completed for r in results),
                runs=req.runs,
                injections=sum(len(r.injections) for r in results),
                flags=sum(len(r.trace.of_kind("anomaly_flagged"))
                          for r in results),
                recovery_rate=recovery,
                micro_precision=stats.micro_precision,
                micro_recall=stats.micro_recall,
                macro_precision=stats.macro_precision,
                macro_recall=stats.macro_recall,
                harmonic_f1=stats.f1,
            )
            return schemas.RunResponse(run_dir=req.out_dir, summary=summary)
        return run_stage(stage)

    @app.post("/report", response_model=schemas.ReportResponse)
    def report(req: schemas.ReportRequest):
        def stage():
            rows = []
            for run_dir in req.run_dirs:
                meta, skill_map, results = bench.load_run_batch(run_dir)
                window = float(meta.get("match_window", req.match_window))
                _conf, stats, recovery = bench.summarize(
                    results, skill_of=skill_map.get, window=window)
                rows.append(bench.ReportRow(
                    task=meta.get("task", "?"),
                    condition=meta.get("condition", "?"),
                    backend=meta.get("backend", "?"),
                    runs=len(results),
                    injections=sum(len(r.injections) for r in results),
                    recovery=recovery, stats=stats))
            bench.emit_report(rows, req.out_csv, req.out_text)
            return schemas.ReportResponse(
                csv_path=req.out_csv, text_path=req.out_text,
                rows=[schemas.ReportRowModel(
                    task=r.task, condition=r.condition, backend=r.backend,
                    runs=r.runs, injections=r.injections,
                    recovery_rate=r.recovery,
                    micro_precision=r.stats.micro_precision,
                    micro_recall=r.stats.micro_recall,
                    macro_precision=r.stats.macro_precision,
                    macro_recall=r.stats.macro_recall,
                    harmonic_f1=r.stats.f1) for r in rows],
            )
        return run_stage(stage)

    return app


app = create_app()
