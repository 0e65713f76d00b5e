import numpy as np
import pytest

from taskguard import obsdata
from taskguard.obsdata import (
    DataError,
    InvariantViolation,
    Observation,
    ParseError,
    Trial,
    TrialSet,
    from_feature_vector,
    load_trials,
    save_trials,
    to_feature_vector,
)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def make_trial(skill="pick", rate=200.0, n=400, outcome="nominal", anomalies=()):
    samples = [
        Observation(
            t=i / rate,
            position=np.array([0.1 * i / n, 0.0, 0.2]),
            orientation=IDENTITY_Q,
            force=np.zeros(3),
            torque=np.zeros(3),
        )
        for i in range(n)
    ]
    return Trial(skill_id=skill, rate_hz=rate, samples=samples, outcome=outcome,
                 anomaly_times=anomalies)


class TestObservation:
    def test_identity_feature_vector(self):
        obs = Observation(0.0, np.zeros(3), IDENTITY_Q, np.zeros(3), np.zeros(3))
        np.testing.assert_array_equal(
            to_feature_vector(obs),
            [0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        )

    def test_position_projection(self):
        obs = Observation(0.0, np.array([1.0, 2.0, 3.0]), IDENTITY_Q,
                          np.zeros(3), np.zeros(3))
        np.testing.assert_array_equal(to_feature_vector(obs)[:3], [1, 2, 3])

    def test_round_trip(self, rng):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        vec = np.concatenate([rng.normal(size=3), q, rng.normal(size=6)])
        np.testing.assert_array_equal(to_feature_vector(from_feature_vector(vec)), vec)

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(InvariantViolation):
            Observation(0.0, np.zeros(3), 0.9 * IDENTITY_Q, np.zeros(3), np.zeros(3))

    def test_negative_time_rejected(self):
        with pytest.raises(InvariantViolation):
            Observation(-1.0, np.zeros(3), IDENTITY_Q, np.zeros(3), np.zeros(3))


class TestTrial:
    def test_duration(self):
        assert make_trial(n=400, rate=200.0).duration == pytest.approx(2.0)

    def test_irregular_spacing_rejected(self):
        good = make_trial(n=5)
        bad = list(good.samples)
        bad[3] = Observation(bad[3].t + 0.001, bad[3].position, bad[3].orientation,
                             bad[3].force, bad[3].torque)
        with pytest.raises(InvariantViolation):
            Trial(skill_id="pick", rate_hz=200.0, samples=bad)

    def test_anomaly_time_outside_duration_rejected(self):
        with pytest.raises(InvariantViolation):
            make_trial(n=10, outcome="anomalous", anomalies=(5.0,))

    def test_trialset_requires_uniform_skill(self):
        with pytest.raises(InvariantViolation):
            TrialSet(skill_id="pick", trials=(make_trial("pick", n=5),
                                              make_trial("place", n=5)))


class TestFileRoundTrip:
    def test_ten_trials_at_200hz(self, tmp_path):
        ts = TrialSet("pick", tuple(make_trial(n=400) for _ in range(10)))
        path = tmp_path / "pick.trials"
        save_trials(ts, path)
        loaded = load_trials(path)
        assert len(loaded) == 10
        for tr in loaded.trials:
            assert tr.duration == pytest.approx(2.0)

    def test_round_trip_bit_exact(self, tmp_path, rng):
        n, rate = 50, 200.0
        samples = []
        for i in range(n):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            samples.append(Observation(i / rate, rng.normal(size=3), q,
                                       rng.normal(size=3), rng.normal(size=3)))
        ts = TrialSet("s", (Trial("s", rate, samples),))
        path = tmp_path / "s.trials"
        save_trials(ts, path)
        loaded = load_trials(path)
        np.testing.assert_array_equal(loaded.trials[0].features(),
                                      ts.trials[0].features())

    def test_bad_quaternion_names_trial(self, tmp_path):
        ts = TrialSet("s", tuple(make_trial("s", n=5) for _ in range(4)))
        path = tmp_path / "s.trials"
        save_trials(ts, path)
        lines = path.read_text().splitlines()
        # Corrupt a quaternion in the fourth trial (index 3).
        idx = 3 * 6 + 1
        parts = lines[idx].split()
        parts[4] = "0.9"
        parts[5] = parts[6] = parts[7] = "0"
        lines[idx] = " ".join(parts)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(InvariantViolation, match="trial 3"):
            load_trials(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.trials"
        path.write_text("")
        with pytest.raises(DataError, match="no trials"):
            load_trials(path)

    def test_bad_field_count_reports_line(self, tmp_path):
        path = tmp_path / "bad.trials"
        path.write_text(
            "#trial skill=s rate=200 outcome=nominal anomalies=none\n1 2 3\n"
        )
        with pytest.raises(ParseError, match="line 2"):
            load_trials(path)
