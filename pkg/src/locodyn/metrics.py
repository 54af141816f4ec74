"""Error metrics and sequence-level evaluation.

Forces, moments and torques are divided by subject mass before scoring, so
errors are in N/kg and Nm/kg.  A quantity group's error is the mean of its
per-channel RMSE values.  The relative error divides by the group-averaged
value range of the training windows (range of each channel within a
window, averaged over windows, then over the group's channels).
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import model_for
from .errors import DivergenceError, InvalidParameterError, UndefinedMetricError
from .forward import ForwardInput, simulate
from .network import net_forward, window_features
from .trajectory import PolyCoeffs, WindowSpec, eval_polynomial, frame_times, merge_windows

FC_CHANNELS = tuple(f"{q}_{side}_{ax}" for q in ("f", "m") for side in ("l", "r") for ax in "xyz")
TAU_CHANNELS = tuple(f"tau_{side}_{j}_{d}" for side in ("l", "r") for j in ("hip", "knee", "ankle")
                     for d in ("flex", "add", "rot"))
GROUPS = {"force": slice(0, 6), "moment": slice(6, 12)}


def channel_rmse(pred, target):
    """Per-channel RMSE over all leading axes; NaN frames are ignored."""
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise InvalidParameterError(f"shape mismatch {pred.shape} vs {target.shape}")
    err = (pred - target).reshape(-1, pred.shape[-1])
    ok = np.all(np.isfinite(err), axis=1)
    if not np.any(ok):
        raise InvalidParameterError("no finite frames to compare")
    return np.sqrt(np.mean(err[ok] ** 2, axis=0))


def rmse(pred, target):
    """Channel-pooled RMSE: mean of the per-channel values."""
    return float(np.mean(channel_rmse(pred, target)))


def rrmse(eps, denominator):
    """Relative error in percent."""
    if not denominator > 0:
        raise UndefinedMetricError("training value range is zero; relative error undefined")
    return 100.0 * eps / denominator


def _window_frames(coeffs, sample):
    return eval_polynomial(PolyCoeffs(coeffs, sample.duration), frame_times(sample.length))


def training_ranges(windows):
    """Group-averaged mean value ranges (mass-normalized) over training windows.

    Returns a dict with keys ``force``, ``moment`` and ``torque``; a group
    without labelled windows is absent.
    """
    fr, tr = [], []
    for w in windows:
        if w.gamma_f is not None:
            v = _window_frames(w.gamma_f, w) / w.total_mass
            fr.append(v.max(axis=0) - v.min(axis=0))
        if w.gamma_tau is not None:
            v = _window_frames(w.gamma_tau, w) / w.total_mass
            tr.append(v.max(axis=0) - v.min(axis=0))
    out = {}
    if fr:
        per_channel = np.mean(fr, axis=0)
        out.update({g: float(per_channel[sl].mean()) for g, sl in GROUPS.items()})
    if tr:
        out["torque"] = float(np.mean(np.mean(tr, axis=0)))
    return out


@dataclass
class MetricReport:
    """Errors per quantity group (absolute and in percent of training ranges)."""

    eps_f: float = float("nan")
    eps_rf: float = float("nan")
    eps_m: float = float("nan")
    eps_rm: float = float("nan")
    eps_tau: float = float("nan")
    eps_rtau: float = float("nan")
    n_train: int = 0
    n_sequences: int = 0
    n_torque_windows: int = 0
    channels: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def _predictor(net):
    if callable(net):
        return net

    def predict(windows):
        return net_forward(net, np.stack([window_features(w) for w in windows]))
    return predict


def evaluate_sequences(net, windows, sequences, ranges=None, n_train=0):
    """Score a predictor on test data.

    GRF/M are merged to full sequences (averaging overlapping windows)
    before comparison with the recorded per-frame values; torques are
    scored per window against their labelled coefficients.

    Parameters
    ----------
    net : Mlp or callable
        A callable receives a list of windows and returns
        ``(gamma_f, gamma_tau)`` arrays.
    windows : list of WindowSample
    sequences : dict of Sequence
        Source sequences of ``windows`` (recorded GRF/M).
    ranges : dict, optional
        Output of ``training_ranges``; relative errors stay NaN without it.

    Returns
    -------
    report : MetricReport
    curves : dict
        Per-sequence merged ``(pred, true)`` GRF/M arrays (N/kg).
    """
    predict = _predictor(net)
    if not windows:
        raise InvalidParameterError("no test windows")
    pred_f, pred_tau = predict(windows)
    report = MetricReport(n_train=n_train)
    by_seq = {}
    for k, w in enumerate(windows):
        by_seq.setdefault(w.sequence, []).append(k)
    curves, p_all, t_all = {}, [], []
    for name, idx in by_seq.items():
        seq = sequences.get(name)
        if seq is None or seq.f_c is None:
            continue
        idx = sorted(idx, key=lambda k: windows[k].start)
        starts = [windows[k].start for k in idx]
        stride = starts[1] - starts[0] if len(starts) > 1 else windows[idx[0]].length
        if starts[0] != 0 or any(b - a != stride for a, b in zip(starts, starts[1:])):
            raise InvalidParameterError(f"windows of sequence {name} do not tile it")
        frames = [_window_frames(pred_f[k], windows[k]) for k in idx]
        length = windows[idx[0]].length
        merged = _merge(frames, length, stride, seq.n_frames) / seq.total_mass
        truth = seq.f_c / seq.total_mass
        curves[name] = (merged, truth)
        p_all.append(merged)
        t_all.append(truth)
    if p_all:
        ch = channel_rmse(np.concatenate(p_all), np.concatenate(t_all))
        report.n_sequences = len(p_all)
        report.channels.update(dict(zip(FC_CHANNELS, ch.tolist())))
        report.eps_f = float(ch[GROUPS["force"]].mean())
        report.eps_m = float(ch[GROUPS["moment"]].mean())
    tau_p, tau_t = [], []
    for k, w in enumerate(windows):
        if w.gamma_tau is None:
            continue
        tau_p.append(_window_frames(pred_tau[k], w) / w.total_mass)
        tau_t.append(_window_frames(w.gamma_tau, w) / w.total_mass)
    if tau_p:
        ch = channel_rmse(np.stack(tau_p), np.stack(tau_t))
        report.n_torque_windows = len(tau_p)
        report.channels.update(dict(zip(TAU_CHANNELS, ch.tolist())))
        report.eps_tau = float(ch.mean())
    if ranges:
        for eps, rel, group in (("eps_f", "eps_rf", "force"), ("eps_m", "eps_rm", "moment"),
                                ("eps_tau", "eps_rtau", "torque")):
            val = getattr(report, eps)
            if np.isfinite(val) and group in ranges:
                setattr(report, rel, rrmse(val, ranges[group]))
    return report, curves


def _merge(frames, length, stride, n_frames):
    spec = WindowSpec(length, stride, 1.0)
    return merge_windows(frames, spec, n_frames)


def state_rmse(net, windows, damping):
    """RMSE between states simulated with predicted coefficients and the motion.

    Returns ``(rmse, n_diverged)``; diverged windows are excluded.
    """
    predict = _predictor(net)
    pred_f, pred_tau = predict(windows)
    sq, count, diverged = 0.0, 0, 0
    for k, w in enumerate(windows):
        inp = ForwardInput(w.x0, w.m_xdot, w.dt, w.n, gamma_f=pred_f[k], gamma_tau=pred_tau[k])
        try:
            states, _ = simulate(inp, model_for(w), damping)
        except DivergenceError:
            diverged += 1
            continue
        err = states - w.x_true()
        sq += float(np.sum(err**2))
        count += err.size
    return (np.sqrt(sq / count) if count else float("nan")), diverged


def curve_summary(curves, n_points=101):
    """Mean and standard deviation over sequences on normalized time.

    Returns an array of shape (n_points, channels, 4) holding
    ``true_mean, true_std, pred_mean, pred_std``.
    """
    if not curves:
        raise InvalidParameterError("no curves to summarize")
    grid = np.linspace(0, 1, n_points)
    preds, trues = [], []
    for pred, true in curves.values():
        t = np.linspace(0, 1, len(true))
        ok = np.all(np.isfinite(pred), axis=1)
        preds.append(np.stack([np.interp(grid, t[ok], pred[ok, c]) for c in range(pred.shape[1])], axis=1))
        trues.append(np.stack([np.interp(grid, t, true[:, c]) for c in range(true.shape[1])], axis=1))
    preds, trues = np.stack(preds), np.stack(trues)
    return np.stack([trues.mean(0), trues.std(0), preds.mean(0), preds.std(0)], axis=-1)


CURVE_COLUMNS = ("channel", "t_norm", "true_mean", "true_std", "pred_mean", "pred_std")
METRIC_COLUMNS = ("group", "channel", "rmse", "rrmse_percent")


def write_curve_csv(path, summary, channels=FC_CHANNELS):
    path = Path(path)
    grid = np.linspace(0, 1, summary.shape[0])
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CURVE_COLUMNS)
        for c, name in enumerate(channels):
            for i, t in enumerate(grid):
                wr.writerow([name, f"{t:.4f}"] + [repr(float(v)) for v in summary[i, c]])
    return path


def write_metric_csv(path, report, ranges=None):
    """Per-channel rows followed by pooled group rows."""
    path = Path(path)
    ranges = ranges or {}
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRIC_COLUMNS)
        for name, val in report.channels.items():
            group = "torque" if name.startswith("tau") else ("force" if name.startswith("f_") else "moment")
            rel = rrmse(val, ranges[group]) if group in ranges else float("nan")
            wr.writerow([group, name, repr(val), repr(rel)])
        for group, eps, rel in (("force", report.eps_f, report.eps_rf), ("moment", report.eps_m, report.eps_rm),
                                ("torque", report.eps_tau, report.eps_rtau)):
            wr.writerow([group, "pooled", repr(eps), repr(rel)])
    return path
