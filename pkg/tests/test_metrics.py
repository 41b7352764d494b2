import os
from pathlib import Path

import numpy as np
import pytest

from errors import HorizonError, ShapeMismatchError
from forecasters import zero_vel_forecast
from metrics import (
    DEFAULT_HORIZONS_MS,
    HorizonTable,
    a_mpjpe,
    ap_mpjpe,
    auroc,
    gain_table,
    horizon_frame_index,
    horizon_table,
    mpjpe,
    roc_points,
)
from pose_core import ForecastSample, read_sequence, window

_H36M_ZERO_VEL_ROW = (23.8, 44.4, 76.1, 88.2, 107.4, 121.6, 131.6, 136.6)


class TestMpjpe:
    def test_identical(self):
        y = np.random.default_rng(0).normal(size=(4, 3, 3))
        np.testing.assert_array_equal(mpjpe(y, y), np.zeros(4))

    def test_pythagoras(self):
        y = np.zeros((3, 2, 3))
        y_hat = y + np.array([3.0, 0.0, 4.0])
        np.testing.assert_array_equal(mpjpe(y, y_hat), np.full(3, 5.0))

    def test_mean_over_joints(self):
        y = np.zeros((1, 2, 3))
        y_hat = np.array([[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]])
        assert mpjpe(y, y_hat)[0] == 1.5

    def test_symmetric_and_non_negative(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 4, 3)), rng.normal(size=(5, 4, 3))
        np.testing.assert_allclose(mpjpe(a, b), mpjpe(b, a))
        assert np.all(mpjpe(a, b) >= 0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            mpjpe(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)))


class TestAggregates:
    def test_a_mpjpe_constant(self):
        y = np.zeros((4, 2, 3))
        assert a_mpjpe(y, y + np.array([0.0, 0.0, 7.0])) == 7.0

    def test_a_mpjpe_two_frames(self):
        y = np.zeros((2, 1, 3))
        y_hat = np.array([[[1.0, 0.0, 0.0]], [[3.0, 0.0, 0.0]]])
        assert a_mpjpe(y, y_hat) == 2.0

    def test_a_mpjpe_composes(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(6, 5, 3)), rng.normal(size=(6, 5, 3))
        assert a_mpjpe(a, b) == pytest.approx(float(np.mean(mpjpe(a, b))))

    def test_ap_mpjpe_identical_runs(self):
        pred = np.random.default_rng(3).normal(size=(4, 5, 2, 3))
        assert ap_mpjpe([pred, pred.copy(), pred.copy()]) == 0.0

    def test_ap_mpjpe_offset(self):
        pred = np.random.default_rng(4).normal(size=(4, 5, 2, 3))
        assert ap_mpjpe([pred, pred + np.array([0.0, 0.0, 5.0])]) == pytest.approx(5.0, abs=1e-12)

    def test_ap_mpjpe_three_runs_brute_force(self):
        rng = np.random.default_rng(5)
        runs = [rng.normal(size=(3, 4, 2, 3)) for _ in range(3)]
        expected = np.mean([a_mpjpe(runs[0], runs[1]), a_mpjpe(runs[0], runs[2]), a_mpjpe(runs[1], runs[2])])
        assert ap_mpjpe(runs) == pytest.approx(expected)
        assert ap_mpjpe(runs[::-1]) == pytest.approx(expected)

    def test_ap_mpjpe_needs_two_runs(self):
        with pytest.raises(ValueError):
            ap_mpjpe([np.zeros((1, 2, 2, 3))])


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.1, 0.2], [0.9, 1.0]) == 1.0

    def test_identical_multisets(self):
        assert auroc([0.3, 0.5, 0.7], [0.3, 0.5, 0.7]) == pytest.approx(0.5)

    def test_brute_force_case(self):
        assert auroc([0.1, 0.2], [0.15, 0.3]) == 0.75

    def test_complement_and_monotone_invariance(self):
        rng = np.random.default_rng(6)
        neg, pos = rng.normal(size=20), rng.normal(0.5, 1.0, size=15)
        assert auroc(neg, pos) + auroc(pos, neg) == pytest.approx(1.0)
        assert auroc(np.exp(neg), np.exp(pos)) == pytest.approx(auroc(neg, pos))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            auroc([], [0.1])

    def test_roc_points_span_unit_square(self):
        points = roc_points([0.1, 0.2, 0.4], [0.3, 0.5])
        assert list(points.columns) == ["threshold", "fpr", "tpr"]
        assert points["fpr"].iloc[0] == 0.0 and points["tpr"].iloc[-1] == 1.0


class TestHorizons:
    @pytest.mark.parametrize("ms,frame", [(80, 2), (160, 4), (320, 8), (400, 10), (560, 14),
                                          (720, 18), (880, 22), (1000, 25)])
    def test_frame_grid_at_25_fps(self, ms, frame):
        assert horizon_frame_index(ms, 25.0, T=25) == frame

    def test_off_grid_horizon(self):
        with pytest.raises(HorizonError):
            horizon_frame_index(90, 25.0)

    def test_beyond_T(self):
        with pytest.raises(HorizonError):
            horizon_frame_index(1000, 25.0, T=10)

    def test_zero_vel_on_constant_pose(self):
        pose = np.random.default_rng(7).normal(size=(1, 3, 3)) * 100
        sample = ForecastSample(np.repeat(pose, 10, axis=0), np.repeat(pose, 25, axis=0))
        table = horizon_table([sample], lambda obs: zero_vel_forecast(obs, 25).y_hat, DEFAULT_HORIZONS_MS, 25.0)
        assert table.mpjpe_mm == (0.0,) * 8
        assert list(table.to_frame().columns) == ["horizon_ms", "mpjpe_mm"]

    def test_gain_table(self):
        base = HorizonTable((80, 160), (17.7, 30.0), 10)
        cand = HorizonTable((80, 160), (13.2, 30.0), 10)
        gains = gain_table(base, cand)
        assert gains["gain_pct"].iloc[0] == pytest.approx(25.4, abs=0.05)
        assert gains["gain_pct"].iloc[1] == 0.0

    def test_identical_tables_have_zero_gain(self):
        table = HorizonTable((80, 160, 320), (10.0, 20.0, 30.0), 5)
        assert (gain_table(table, table)["gain_pct"] == 0.0).all()


@pytest.mark.skipif(not os.environ.get("POSEUNC_H36M_DIR"), reason="POSEUNC_H36M_DIR not set")
def test_zero_vel_matches_published_h36m_row():
    files = sorted(Path(os.environ["POSEUNC_H36M_DIR"]).glob("*.poseseq"))
    samples = []
    for path in files:
        samples.extend(window(read_sequence(path), O=10, T=25))
    table = horizon_table(samples, lambda obs: zero_vel_forecast(obs, 25).y_hat, DEFAULT_HORIZONS_MS, 25.0)
    np.testing.assert_allclose(table.mpjpe_mm, _H36M_ZERO_VEL_ROW, atol=0.5)
