import math

import numpy as np
import pytest

from taskguard import introspect
from taskguard.hmm import forward_lcurve, forward_loglik
from taskguard.introspect import (
    CalibrationError,
    Monitor,
    ThresholdModel,
    calibrate,
    classify_nominal,
    gap_to_f2,
    lcurve_band_stats,
    load_threshold,
    save_threshold,
)
from taskguard.obsdata import Trial, TrialSet, Observation

from conftest import random_gaussian_model, random_var_model, sample_hmm

RATE = 200.0


def make_trialset(model, skill, n_trials, T, rng, rate=RATE):
    trials = []
    d = model.dim
    for _ in range(n_trials):
        ys, _ = sample_hmm(model, T, rng)
        # Wrap the raw features in 13-D observations only when d == 13;
        # otherwise tests drive models through feature arrays directly.
        trials.append(ys)
    return trials


def make_monitor(models, thresholds=None, active=None):
    return Monitor(models=models, thresholds=thresholds or {}, rate_hz=RATE,
                   active_skill=active)


def flat_threshold(skill, horizon=1000, f2=100.0, mu=0.0, sigma=0.0):
    return ThresholdModel(skill_id=skill, rate_hz=RATE,
                          mu=np.full(horizon, mu), sigma=np.full(horizon, sigma),
                          k=5.0, f2_threshold=f2)


class TestScoreStep:
    def test_first_step_matches_batch(self, rng):
        models = {"a": random_gaussian_model(rng, 2, 3, skill_id="a"),
                  "b": random_var_model(rng, 2, 3, skill_id="b")}
        mon = make_monitor(models, {"a": flat_threshold("a")}, active="a")
        y = rng.normal(size=3)
        out = mon.score_step(y)
        for s, model in models.items():
            assert out[s] == pytest.approx(forward_loglik(model, y[None, :]),
                                           rel=1e-12)

    def test_streaming_equals_batch_every_step(self, rng):
        models = {"a": random_gaussian_model(rng, 3, 4, skill_id="a"),
                  "b": random_var_model(rng, 2, 4, skill_id="b")}
        mon = make_monitor(models, {"a": flat_threshold("a")}, active="a")
        ys = rng.normal(size=(80, 4))
        batch = {s: forward_lcurve(m, ys) for s, m in models.items()}
        for t, y in enumerate(ys):
            out = mon.score_step(y)
            for s in models:
                assert out[s] == pytest.approx(batch[s][t], rel=1e-9)

    def test_singleton_argmax(self, rng):
        models = {"only": random_gaussian_model(rng, 2, 3, skill_id="only")}
        mon = make_monitor(models, {"only": flat_threshold("only")})
        out = mon.score_step(rng.normal(size=3))
        assert max(out, key=out.get) == "only"


class TestClassifyNominal:
    def test_correct_model_wins(self, rng):
        # Four well-separated Gaussian skills; trial generated from skill 2.
        models = {}
        for i in range(4):
            m = random_gaussian_model(rng, 2, 3, skill_id=f"s{i}")
            means = m.emission.means + 10.0 * i
            from taskguard.hmm import GaussianEmission, SkillModel
            models[f"s{i}"] = SkillModel(
                f"s{i}", m.pi0, m.trans,
                GaussianEmission("gaussian_full", means, m.emission.covs))
        ys, _ = sample_hmm(models["s2"], 100, rng)
        lcurves = {s: forward_loglik(m, ys) for s, m in models.items()}
        correct, margin = classify_nominal(lcurves, "s2")
        assert correct and margin > 0

    def test_exact_tie_is_incorrect(self):
        correct, margin = classify_nominal({"a": -5.0, "b": -5.0}, "a")
        assert not correct and margin == 0.0

    def test_singleton_infinite_margin(self):
        correct, margin = classify_nominal({"a": -3.0}, "a")
        assert correct and margin == math.inf

    def test_invariant_to_dominated_extra_model(self):
        base = {"a": -10.0, "b": -20.0}
        with_extra = dict(base, c=-50.0)
        assert classify_nominal(base, "a") == classify_nominal(with_extra, "a")


class TestCalibrate:
    def _trialset(self, model, rng, n=6, T=150, jitter=0):
        trials = []
        for i in range(n):
            ys, _ = sample_hmm(model, T + (jitter if i == 0 else 0), rng)
            samples = tuple(
                Observation(t=j / RATE, position=np.zeros(3),
                            orientation=[1, 0, 0, 0], force=np.zeros(3),
                            torque=np.zeros(3))
                for j in range(len(ys)))
            trials.append((ys, samples))
        return trials

    def test_identical_trials_zero_sigma(self, rng):
        model = random_gaussian_model(rng, 2, 3, skill_id="s")
        ys, _ = sample_hmm(model, 100, rng)

        class FakeSet:
            skill_id = "s"
            rate_hz = RATE

            def feature_arrays(self):
                return [ys.copy() for _ in range(4)]

        thresh = calibrate(FakeSet(), model)
        np.testing.assert_allclose(thresh.sigma, 0.0, atol=1e-9)
        np.testing.assert_allclose(thresh.mu - 5.0 * thresh.sigma, thresh.mu)

    def test_huge_k_means_no_f1_crossings(self, rng):
        model = random_gaussian_model(rng, 2, 3, skill_id="s")
        curves = []

        class FakeSet:
            skill_id = "s"
            rate_hz = RATE

            def feature_arrays(self):
                return [sample_hmm(model, 120, rng)[0] for _ in range(5)]

        fake = FakeSet()
        seqs = fake.feature_arrays()

        class Fixed:
            skill_id = "s"
            rate_hz = RATE

            def feature_arrays(self):
                return seqs

        thresh = calibrate(Fixed(), model, k=1e6)
        for s in seqs:
            curve = forward_lcurve(model, s)
            h = min(len(curve), thresh.horizon)
            band = thresh.mu[:h] - thresh.k * thresh.sigma[:h]
            assert np.all(curve[:h] >= band)

    def test_sigma_grows_over_time(self, rng):
        model = random_var_model(rng, 2, 3, skill_id="s")

        class Fixed:
            skill_id = "s"
            rate_hz = RATE
            _seqs = [sample_hmm(model, 300, rng)[0] for _ in range(8)]

            def feature_arrays(self):
                return self._seqs

        thresh = calibrate(Fixed(), model)
        t = np.arange(thresh.horizon)
        slope = np.polyfit(t, thresh.sigma, 1)[0]
        assert slope >= 0

    def test_wild_length_spread_rejected(self, rng):
        model = random_gaussian_model(rng, 2, 3, skill_id="s")

        class Fixed:
            skill_id = "s"
            rate_hz = RATE

            def feature_arrays(self):
                return [sample_hmm(model, T, rng)[0] for T in (100, 100, 150)]

        with pytest.raises(CalibrationError):
            calibrate(Fixed(), model)

    def test_too_few_trials_rejected(self, rng):
        model = random_gaussian_model(rng, 2, 3, skill_id="s")

        class Fixed:
            skill_id = "s"
            rate_hz = RATE

            def feature_arrays(self):
                return [sample_hmm(model, 100, rng)[0] for _ in range(2)]

        with pytest.raises(CalibrationError):
            calibrate(Fixed(), model)


class TestDetectStep:
    def test_constant_gap_zero_f2(self, rng):
        model = random_gaussian_model(rng, 1, 2, skill_id="s")
        mon = make_monitor({"s": model}, {"s": flat_threshold("s", f2=1.0)})
        ys, _ = sample_hmm(model, 30, rng)
        # Feed a constant gap directly: zero sigma band far below any L value.
        for y in ys:
            mon.score_step(y)
            mon._gaps.append(5.0)
        stats = gap_to_f2(mon._gaps, RATE)
        assert np.allclose(stats, 0.0)

    def test_sharp_drop_exceeds_threshold(self):
        # Gap jumps by 50 nats at one step; 5-sample smoothing spreads the
        # jump into 10-nat increments, i.e. 2000 nats/s at 200 Hz.
        gaps = [0.0] * 20 + [50.0] * 20
        stats = gap_to_f2(gaps, RATE, window=5)
        assert stats.max() == pytest.approx(2000.0)
        assert stats.max() > 1999.0

    def test_latching_until_reset(self, rng):
        model = random_gaussian_model(rng, 1, 2, skill_id="s")
        mon = make_monitor({"s": model},
                           {"s": flat_threshold("s", f2=1e-6, mu=1e6)})
        ys, _ = sample_hmm(model, 40, rng)
        statuses = [mon.step(y)[0] for y in ys]
        assert "anomaly" in statuses
        first = statuses.index("anomaly")
        assert all(s == "anomaly" for s in statuses[first:])
        mon.reset("s")
        assert mon.status == "nominal"

    def test_replay_of_calibration_trials_is_silent(self, rng):
        model = random_var_model(rng, 2, 3, skill_id="s")

        class Fixed:
            skill_id = "s"
            rate_hz = RATE
            _seqs = [sample_hmm(model, 200, rng)[0] for _ in range(6)]

            def feature_arrays(self):
                return self._seqs

        fixed = Fixed()
        thresh = calibrate(fixed, model)
        for i, s in enumerate(fixed._seqs):
            rest = [forward_lcurve(model, q) for j, q in enumerate(fixed._seqs)
                    if j != i]
            mu_i, sigma_i = lcurve_band_stats(rest)
            fold = ThresholdModel(skill_id="s", rate_hz=RATE, mu=mu_i,
                                  sigma=sigma_i, k=thresh.k,
                                  f2_threshold=thresh.f2_threshold)
            mon = make_monitor({"s": model}, {"s": fold})
            for y in s:
                status, _ = mon.step(y)
            assert status == "nominal"


class TestReset:
    def test_reset_then_single_step(self, rng):
        model = random_gaussian_model(rng, 2, 3, skill_id="s")
        mon = make_monitor({"s": model}, {"s": flat_threshold("s")})
        for y in rng.normal(size=(10, 3)):
            mon.step(y)
        mon.reset("s")
        mon.score_step(rng.normal(size=3))
        assert len(mon.lcurve("s")) == 1

    def test_double_reset_idempotent(self, rng):
        model = random_gaussian_model(rng, 2, 3, skill_id="s")
        mon = make_monitor({"s": model}, {"s": flat_threshold("s")})
        mon.step(rng.normal(size=3))
        mon.reset("s")
        state_once = (mon.status, mon.step_count, len(mon.lcurve("s")))
        mon.reset("s")
        assert (mon.status, mon.step_count, len(mon.lcurve("s"))) == state_once

    def test_unknown_skill_rejected(self, rng):
        model = random_gaussian_model(rng, 2, 3, skill_id="s")
        mon = make_monitor({"s": model}, {"s": flat_threshold("s")})
        with pytest.raises(KeyError):
            mon.reset("nope")


def test_threshold_round_trip(tmp_path, rng):
    thresh = ThresholdModel(skill_id="s", rate_hz=RATE,
                            mu=rng.normal(size=50),
                            sigma=np.abs(rng.normal(size=50)),
                            k=5.0, f2_threshold=123.456)
    path = tmp_path / "thresh.txt"
    save_threshold(thresh, path)
    loaded = load_threshold(path)
    np.testing.assert_array_equal(loaded.mu, thresh.mu)
    np.testing.assert_array_equal(loaded.sigma, thresh.sigma)
    assert loaded.f2_threshold == thresh.f2_threshold
    assert loaded.skill_id == "s"
