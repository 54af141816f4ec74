import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from locodyn.errors import InvalidParameterError, UndefinedMetricError
from locodyn.metrics import (CURVE_COLUMNS, FC_CHANNELS, METRIC_COLUMNS, TAU_CHANNELS, channel_rmse, curve_summary,
                             evaluate_sequences, rmse, rrmse, training_ranges, write_curve_csv, write_metric_csv)
from locodyn.synth import SynthConfig, synthesize_dataset
from locodyn.trajectory import WindowSpec, merge_windows


def test_rmse_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(50, 6))
    assert rmse(a, a) == 0.0
    assert rmse(a + 0.7, a) == pytest.approx(0.7, abs=1e-12)
    b = rng.normal(size=(50, 6))
    two_pass = []
    for c in range(6):
        s = 0.0
        for i in range(50):
            s += (a[i, c] - b[i, c]) ** 2
        two_pass.append((s / 50) ** 0.5)
    assert abs(rmse(a, b) - sum(two_pass) / 6) < 1e-12


def test_channel_rmse_checks():
    with pytest.raises(InvalidParameterError):
        channel_rmse(np.zeros((3, 2)), np.zeros((3, 3)))
    a = np.zeros((4, 2))
    b = np.ones((4, 2))
    b[0] = np.nan
    assert np.allclose(channel_rmse(a, b), 1.0)


def test_rrmse_examples():
    assert rrmse(2.5, 2.5) == pytest.approx(100.0)
    assert rrmse(0.591, 4.104) == pytest.approx(14.4, abs=0.1)
    with pytest.raises(UndefinedMetricError):
        rrmse(1.0, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 10.0), st.floats(1e-3, 5.0), st.floats(0.1, 10.0))
def test_rrmse_scale_invariance(eps, den, c):
    assert rrmse(c * eps, c * den) == pytest.approx(rrmse(eps, den), rel=1e-12)


@pytest.fixture(scope="module")
def ds():
    return synthesize_dataset(SynthConfig(n_subjects=2, sequences_per_subject=1, duration=0.6, styles=("walk",),
                                          seed=5))


def _frames(w, coeffs):
    s = np.linspace(0, 1, w.length)
    return (s[:, None] ** np.arange(coeffs.shape[1])) @ coeffs.T


def test_training_ranges_brute_force(ds):
    ranges = training_ranges(ds.windows)
    per_window = []
    for w in ds.windows:
        v = _frames(w, w.gamma_f) / w.total_mass
        per_window.append([max(v[:, c]) - min(v[:, c]) for c in range(12)])
    per_channel = [sum(r[c] for r in per_window) / len(per_window) for c in range(12)]
    assert ranges["force"] == pytest.approx(sum(per_channel[:6]) / 6, rel=1e-12)
    assert ranges["moment"] == pytest.approx(sum(per_channel[6:]) / 6, rel=1e-12)
    assert "torque" in ranges
    assert training_ranges([replace(w, gamma_f=None, gamma_tau=None) for w in ds.windows]) == {}


def _polynomial_truth(ds):
    # recorded GRF/M replaced by the merged window polynomials, so a predictor
    # returning the labels is exact
    spec = ds.spec
    seqs = {}
    for name, seq in ds.sequences.items():
        wins = sorted((w for w in ds.windows if w.sequence == name), key=lambda w: w.start)
        merged = merge_windows([_frames(w, w.gamma_f) for w in wins], WindowSpec(spec.length, spec.stride, 1.0),
                               seq.n_frames)
        seqs[name] = replace(seq, f_c=merged)
    return seqs


def test_perfect_predictor_scores_zero(ds):
    seqs = _polynomial_truth(ds)

    def perfect(windows):
        return np.stack([w.gamma_f for w in windows]), np.stack([w.gamma_tau for w in windows])
    report, curves = evaluate_sequences(perfect, ds.windows, seqs, training_ranges(ds.windows))
    for key in ("eps_f", "eps_m", "eps_tau", "eps_rf", "eps_rm", "eps_rtau"):
        assert getattr(report, key) == pytest.approx(0.0, abs=1e-10)
    assert set(report.channels) == set(FC_CHANNELS) | set(TAU_CHANNELS)
    assert set(curves) == set(seqs)


def test_zero_predictor_on_standing():
    ds = synthesize_dataset(SynthConfig(n_subjects=1, sequences_per_subject=1, duration=0.6, amplitude=0.0,
                                        variability=0.0, seed=1))

    def zero(windows):
        return np.zeros((len(windows), 12, 4)), np.zeros((len(windows), 18, 2))
    report, _ = evaluate_sequences(zero, ds.windows, ds.sequences)
    assert report.channels["f_l_z"] == pytest.approx(9.81 / 2, rel=1e-3)
    assert report.channels["f_r_z"] == pytest.approx(9.81 / 2, rel=1e-3)
    vertical = report.channels["f_l_z"] + report.channels["f_r_z"]
    horizontal = sum(report.channels[f"f_{s}_{a}"] for s in "lr" for a in "xy")
    assert report.eps_f == pytest.approx((vertical + horizontal) / 6, rel=1e-12)
    assert horizontal < 1e-2 * vertical
    assert np.isnan(report.eps_rf)


def test_scale_invariance_of_relative_error(ds):
    seqs = _polynomial_truth(ds)
    rng = np.random.default_rng(0)
    noise = [rng.normal(size=(12, 4)) for _ in ds.windows]

    def noisy(c):
        def predict(windows):
            return (np.stack([w.gamma_f + c * n for w, n in zip(windows, noise)]),
                    np.stack([w.gamma_tau + 0.1 * c for w in windows]))
        return predict
    base, _ = evaluate_sequences(noisy(1.0), ds.windows, seqs, training_ranges(ds.windows))
    scaled_windows = [replace(w, gamma_f=3.0 * w.gamma_f, gamma_tau=3.0 * w.gamma_tau) for w in ds.windows]
    scaled_seqs = {k: replace(s, f_c=3.0 * s.f_c) for k, s in seqs.items()}
    scaled, _ = evaluate_sequences(noisy(3.0), scaled_windows, scaled_seqs, training_ranges(scaled_windows))
    assert scaled.eps_f == pytest.approx(3.0 * base.eps_f, rel=1e-10)
    for key in ("eps_rf", "eps_rm", "eps_rtau"):
        assert getattr(scaled, key) == pytest.approx(getattr(base, key), rel=1e-10)


def test_merging_does_not_exceed_worst_window():
    rng = np.random.default_rng(3)
    spec = WindowSpec(10, 5, 1.0)
    n_frames = 30
    frames = [2.0 + rng.normal(size=(10, 3)) for _ in range(5)]
    merged = merge_windows(frames, spec, n_frames)
    target = np.full((n_frames, 3), 2.0)
    worst = max(rmse(f, target[:10]) for f in frames)
    assert rmse(merged, target) <= worst


def test_windows_must_tile(ds):
    wins = [w for w in ds.windows if w.start != ds.spec.stride]

    def zero(windows):
        return np.zeros((len(windows), 12, 4)), np.zeros((len(windows), 18, 2))
    with pytest.raises(InvalidParameterError):
        evaluate_sequences(zero, wins, ds.sequences)
    with pytest.raises(InvalidParameterError):
        evaluate_sequences(zero, [], ds.sequences)


def test_csv_schemas(tmp_path, ds):
    seqs = _polynomial_truth(ds)

    def perfect(windows):
        return np.stack([w.gamma_f for w in windows]), np.stack([w.gamma_tau for w in windows])
    report, curves = evaluate_sequences(perfect, ds.windows, seqs)
    summary = curve_summary(curves, n_points=11)
    assert summary.shape == (11, 12, 4)
    with open(write_curve_csv(tmp_path / "c.csv", summary)) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CURVE_COLUMNS and len(rows) == 1 + 12 * 11
    with open(write_metric_csv(tmp_path / "m.csv", report, training_ranges(ds.windows))) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert [r[1] for r in rows[-3:]] == ["pooled"] * 3
    with pytest.raises(InvalidParameterError):
        curve_summary({})
