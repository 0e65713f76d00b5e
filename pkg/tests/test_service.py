import csv
import warnings

import numpy as np
import pytest

from taskguard.tasks import build_task, generate_training, train_skills

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

from taskguard.service.app import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture(scope="module")
def workspace(client, tmp_path_factory):
    """One small trained pick-and-place pipeline shared across tests."""
    root = tmp_path_factory.mktemp("svc")
    dirs = {name: str(root / name)
            for name in ("training", "models", "thresholds", "run")}
    resp = client.post("/simulate", json={
        "task": "pick_place", "out_dir": dirs["training"], "runs": 5,
        "seed": 9})
    assert resp.status_code == 200, resp.text
    resp = client.post("/train", json={
        "training_dir": dirs["training"], "out_dir": dirs["models"],
        "backend": "hmm", "seed": 0, "n_modes": 3, "iterations": 15})
    assert resp.status_code == 200, resp.text
    resp = client.post("/calibrate", json={
        "training_dir": dirs["training"], "models_dir": dirs["models"],
        "out_dir": dirs["thresholds"]})
    assert resp.status_code == 200, resp.text
    return dirs


class TestHealth:
    def test_ok(self, client):
        resp = client.get("/health")
        assert resp.status_code == 200
        assert resp.json()["status"] == "ok"


class TestSimulate:
    def test_writes_trial_files(self, client, workspace):
        # Re-run into a fresh dir to inspect the response shape.
        resp = client.post("/simulate", json={
            "task": "pick_place", "out_dir": workspace["training"],
            "runs": 5, "seed": 9})
        body = resp.json()
        assert set(body["trial_files"]) == {"pre-pick", "pick", "pre-place",
                                            "place"}
        # The shared approach/retract skill pools two trials per run.
        assert body["trials_per_skill"]["pre-pick"] == 10
        assert body["trials_per_skill"]["pick"] == 5

    def test_unknown_task_rejected(self, client, tmp_path):
        resp = client.post("/simulate", json={
            "task": "juggling", "out_dir": str(tmp_path)})
        assert resp.status_code == 422

    def test_bad_runs_rejected(self, client, tmp_path):
        resp = client.post("/simulate", json={
            "task": "pick_place", "out_dir": str(tmp_path), "runs": 0})
        assert resp.status_code == 422


class TestTrain:
    def test_manifest_records_backend(self, workspace):
        with open(workspace["models"] + "/MANIFEST") as fh:
            assert "backend hmm" in fh.read()

    def test_missing_training_dir(self, client, tmp_path):
        resp = client.post("/train", json={
            "training_dir": str(tmp_path / "nope"),
            "out_dir": str(tmp_path / "models")})
        assert resp.status_code == 422

    def test_unknown_backend(self, client, workspace, tmp_path):
        resp = client.post("/train", json={
            "training_dir": workspace["training"],
            "out_dir": str(tmp_path), "backend": "quantum"})
        assert resp.status_code == 422


class TestCalibrate:
    def test_thresholds_positive(self, client, workspace):
        resp = client.post("/calibrate", json={
            "training_dir": workspace["training"],
            "models_dir": workspace["models"],
            "out_dir": workspace["thresholds"]})
        body = resp.json()
        assert all(v > 0 for v in body["f2_thresholds"].values())

    def test_empty_models_dir(self, client, workspace, tmp_path):
        resp = client.post("/calibrate", json={
            "training_dir": workspace["training"],
            "models_dir": str(tmp_path), "out_dir": str(tmp_path / "out")})
        assert resp.status_code == 422


class TestRunAndReport:
    def test_nominal_run_then_report(self, client, workspace, tmp_path):
        run_dir = str(tmp_path / "nominal")
        resp = client.post("/run", json={
            "task": "pick_place", "condition": "nominal",
            "models_dir": workspace["models"],
            "thresholds_dir": workspace["thresholds"],
            "out_dir": run_dir, "runs": 2, "seed": 4})
        assert resp.status_code == 200, resp.text
        summary = resp.json()["summary"]
        assert summary["completed"] == 2
        assert summary["injections"] == 0
        assert summary["flags"] == 0

        csv_path = str(tmp_path / "report.csv")
        txt_path = str(tmp_path / "report.txt")
        resp = client.post("/report", json={
            "run_dirs": [run_dir], "out_csv": csv_path,
            "out_text": txt_path})
        assert resp.status_code == 200, resp.text
        rows = resp.json()["rows"]
        assert rows[0]["task"] == "pick_place"
        assert rows[0]["condition"] == "nominal"
        assert rows[0]["backend"] == "hmm"
        with open(csv_path) as fh:
            parsed = list(csv.reader(fh))
        assert len(parsed) == 2

    def test_disturbed_run_detects(self, client, workspace, tmp_path):
        run_dir = str(tmp_path / "disturbed")
        resp = client.post("/run", json={
            "task": "pick_place", "condition": "one_per_node",
            "models_dir": workspace["models"],
            "thresholds_dir": workspace["thresholds"],
            "out_dir": run_dir, "runs": 1, "seed": 4})
        assert resp.status_code == 200, resp.text
        summary = resp.json()["summary"]
        assert summary["injections"] == 5
        assert summary["micro_recall"] > 0.5
        assert summary["recovery_rate"] > 0.5

    def test_missing_thresholds(self, client, workspace, tmp_path):
        resp = client.post("/run", json={
            "task": "pick_place", "condition": "nominal",
            "models_dir": workspace["models"],
            "thresholds_dir": str(tmp_path),
            "out_dir": str(tmp_path / "r"), "runs": 1})
        assert resp.status_code == 422

    def test_report_missing_dir(self, client, tmp_path):
        resp = client.post("/report", json={
            "run_dirs": [str(tmp_path / "ghost")],
            "out_csv": str(tmp_path / "r.csv")})
        assert resp.status_code == 422


class TestTasksModule:
    def test_unknown_task(self):
        with pytest.raises(KeyError):
            build_task("juggling")

    def test_skill_sharing(self):
        assets = build_task("pick_place")
        assert assets.skill_ids == ["pre-pick", "pick", "pre-place", "place"]
        skills = [n.skill_id for n in assets.graph.nodes.values()]
        assert skills.count("pre-pick") == 2

    def test_drawer_five_distinct_skills(self):
        assets = build_task("drawer")
        assert len(assets.skill_ids) == 5

    def test_training_lengths_consistent(self):
        assets = build_task("pick_place")
        training = generate_training(assets, runs=3, seed=0)
        for ts in training.values():
            lengths = {len(t) for t in ts.trials}
            assert len(lengths) == 1

    def test_training_deterministic(self):
        assets = build_task("drawer")
        a = generate_training(assets, runs=2, seed=5)
        b = generate_training(build_task("drawer"), runs=2, seed=5)
        for skill in a:
            np.testing.assert_array_equal(a[skill].feature_arrays()[0],
                                          b[skill].feature_arrays()[0])

    def test_unknown_backend(self):
        assets = build_task("pick_place")
        training = generate_training(assets, runs=3, seed=0)
        with pytest.raises(KeyError):
            train_skills(training, backend="quantum")
