"""Command-line client for the pipeline service.

By default each command spins up the service in-process and talks to it
over an in-memory transport; pass ``--server URL`` to target a running
instance instead (start one with ``uvicorn taskguard.service.app:app``).
"""

from __future__ import annotations

import json

import click
import httpx


class _Client:
    def __init__(self, server=None):
        if server:
            self._client = httpx.Client(base_url=server, timeout=None)
        else:
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

                from .service.app import create_app
                self._client = TestClient(create_app())

    def call(self, method, path, payload=None):
        if method == "GET":
            resp = self._client.get(path)
        else:
            resp = self._client.post(path, json=payload)
        if resp.status_code != 200:
            try:
                detail = resp.json().get("detail", resp.text)
            except (ValueError, AttributeError):
                detail = resp.text
            raise click.ClickException(f"{path} failed ({resp.status_code}): "
                                       f"{detail}")
        return resp.json()


def _emit(data):
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Service base URL (default: run in-process).")
@click.option("--seed", default=0, show_default=True, help="RNG seed.")
@click.option("--rate", default=200.0, show_default=True,
              help="Observation rate, Hz.")
@click.option("--backend", default="shdp-ar", show_default=True,
              type=click.Choice(["hmm", "shdp-ar"]),
              help="Introspection backend.")
@click.option("--k", default=5.0, show_default=True,
              help="Band width in standard deviations.")
@click.option("--safety", default=1.2, show_default=True,
              help="F2 threshold safety factor.")
@click.option("--window", default=5, show_default=True,
              help="F2 smoothing window, samples.")
@click.pass_context
def main(ctx, server, seed, rate, backend, k, safety, window):
    """Anomaly-recovery pipeline: simulate, train, calibrate, run, report."""
    ctx.obj = {"client": _Client(server), "seed": seed, "rate": rate,
               "backend": backend, "k": k, "safety": safety,
               "window": window}


@main.command()
@click.pass_obj
def health(obj):
    """Check service availability."""
    _emit(obj["client"].call("GET", "/health"))


@main.command()
@click.option("--task", required=True,
              type=click.Choice(["pick_place", "drawer"]))
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False))
@click.option("--runs", default=10, show_default=True,
              help="Nominal training executions.")
@click.pass_obj
def simulate(obj, task, out_dir, runs):
    """Generate nominal training trials for a task."""
    _emit(obj["client"].call("POST", "/simulate", {
        "task": task, "out_dir": out_dir, "runs": runs,
        "seed": obj["seed"], "rate_hz": obj["rate"]}))


@main.command()
@click.option("--training", "training_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False))
@click.option("--modes", default=5, show_default=True,
              help="Mode count (hmm) or truncation guide (shdp-ar).")
@click.option("--var-order", default=1, show_default=True)
@click.option("--iterations", default=None, type=int,
              help="Override fitting iteration count.")
@click.pass_obj
def train(obj, training_dir, out_dir, modes, var_order, iterations):
    """Fit one introspection model per skill."""
    _emit(obj["client"].call("POST", "/train", {
        "training_dir": training_dir, "out_dir": out_dir,
        "backend": obj["backend"], "seed": obj["seed"], "n_modes": modes,
        "var_order": var_order, "iterations": iterations}))


@main.command()
@click.option("--training", "training_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--models", "models_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False))
@click.pass_obj
def calibrate(obj, training_dir, models_dir, out_dir):
    """LOOCV threshold calibration for trained skills."""
    _emit(obj["client"].call("POST", "/calibrate", {
        "training_dir": training_dir, "models_dir": models_dir,
        "out_dir": out_dir, "k": obj["k"], "safety": obj["safety"],
        "smooth_window": obj["window"]}))


@main.command()
@click.option("--task", required=True,
              type=click.Choice(["pick_place", "drawer"]))
@click.option("--condition", required=True,
              type=click.Choice(["nominal", "anomaly_no_recovery",
                                 "one_per_node", "multi_per_node"]))
@click.option("--models", "models_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--thresholds", "thresholds_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False))
@click.option("--runs", default=10, show_default=True)
@click.option("--kind", default="human_collision", show_default=True,
              type=click.Choice(["human_collision", "tool_collision"]))
@click.option("--per-node", default=5, show_default=True,
              help="Disturbances per node (multi_per_node).")
@click.option("--weak-fraction", default=0.0, show_default=True,
              help="Fraction of weak (possibly missed) injections.")
@click.option("--max-recoveries", default=10, show_default=True)
@click.option("--match-window", default=1.0, show_default=True,
              help="TP matching window, seconds.")
@click.pass_obj
def run(obj, task, condition, models_dir, thresholds_dir, out_dir, runs, kind,
        per_node, weak_fraction, max_recoveries, match_window):
    """Execute a disturbance scenario and persist traces + ground truth."""
    _emit(obj["client"].call("POST", "/run", {
        "task": task, "condition": condition, "models_dir": models_dir,
        "thresholds_dir": thresholds_dir, "out_dir": out_dir, "runs": runs,
        "seed": obj["seed"], "rate_hz": obj["rate"], "kind": kind,
        "per_node": per_node, "weak_fraction": weak_fraction,
        "max_recoveries": max_recoveries, "match_window": match_window}))


@main.command()
@click.argument("run_dirs", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@click.option("--csv", "out_csv", required=True, type=click.Path())
@click.option("--text", "out_text", default=None, type=click.Path())
@click.pass_obj
def report(obj, run_dirs, out_csv, out_text):
    """Recompute metrics from persisted run directories."""
    _emit(obj["client"].call("POST", "/report", {
        "run_dirs": list(run_dirs), "out_csv": out_csv,
        "out_text": out_text}))


if __name__ == "__main__":
    main()
