"""Losses, training modes, adaptive loss weighting and torque-label fitting.

Training modes
--------------
``baseline``
    Coefficient MSE on the ground-reaction and torque sets.
``F``
    MSE batches alternated with forward-loss batches on the motion set.
``cFI``
    On contact-set batches the contact, inverse and forward losses take
    turns; MSE batches on the supervised sets are interleaved.
``transfer-F`` / ``transfer-cFI``
    Fine-tuning of a pretrained network without force or torque labels:
    forward loss only, or the contact/inverse/forward rotation.

Every mini-batch applies exactly one loss.  Batches of the different
losses are spread evenly over an epoch.  Loss weights are rescaled after
each epoch so that ``weight * average`` matches the anchor loss average.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import model_for, noisy_dataset, sigma_from_windows
from .dynamics import DampingConfig
from .errors import DivergenceError, InvalidParameterError, ModeError
from .forward import ForwardInput, forward_loss, forward_loss_and_grad, simulate
from .inverse import backprop_inverse, window_inverse
from .metrics import evaluate_sequences, state_rmse, training_ranges
from .network import (DEFAULT_SIZES, N_FORCE, forward_pass, net_backward, net_init, window_features,
                      window_targets)
from .trajectory import frame_times, vander

MODES = ("baseline", "F", "cFI", "transfer-F", "transfer-cFI")
LOSSES = ("mse", "forward", "inverse", "contact")


# --------------------------------------------------------------------------
# losses

def loss_mse(pred_gamma_f, pred_gamma_tau, true_gamma_f, true_gamma_tau, has_tau=None, scale=None):
    """Squared coefficient error summed per sample, averaged over the batch.

    Parameters
    ----------
    pred_gamma_f, true_gamma_f : array_like, shape (B, 12, 4)
    pred_gamma_tau, true_gamma_tau : array_like, shape (B, 18, 2)
        ``true_gamma_tau`` may be ``None`` when no sample has torque labels.
    has_tau : array_like of bool, shape (B,), optional
        Torque terms of samples without torque labels are dropped.
    scale : array_like, shape (84,), optional
        Divides each coefficient error (used to compare standardized values).

    Returns
    -------
    loss : float
    grad_f, grad_tau : ndarrays shaped like the predictions
    """
    pf = np.asarray(pred_gamma_f, dtype=float).reshape(-1, 12, 4)
    pt = np.asarray(pred_gamma_tau, dtype=float).reshape(-1, 18, 2)
    b = pf.shape[0]
    df = pf - np.asarray(true_gamma_f, dtype=float).reshape(pf.shape)
    if true_gamma_tau is None:
        dt = np.zeros_like(pt)
        mask = np.zeros(b)
    else:
        dt = pt - np.asarray(true_gamma_tau, dtype=float).reshape(pt.shape)
        mask = np.ones(b) if has_tau is None else np.asarray(has_tau, dtype=float)
    dt = dt * mask[:, None, None]
    if scale is not None:
        scale = np.asarray(scale, dtype=float)
        df = df / scale[:N_FORCE].reshape(12, 4)
        dt = dt / scale[N_FORCE:].reshape(18, 2)
    loss = float((np.sum(df**2) + np.sum(dt**2)) / b)
    gf, gt = 2.0 * df / b, 2.0 * dt / b
    if scale is not None:
        gf = gf / scale[:N_FORCE].reshape(12, 4)
        gt = gt / scale[N_FORCE:].reshape(18, 2)
    return loss, gf, gt


def loss_contact(pred_gamma_f, contact):
    """Mean squared wrench predicted for feet labelled as not in contact.

    Parameters
    ----------
    pred_gamma_f : array_like, shape (12, 4)
    contact : array_like of bool, shape (L, 2)
        Per-frame ``(c_l, c_r)``; the wrench is evaluated at the L frames.

    Returns
    -------
    loss : float
        Sum over penalized (frame, foot) pairs of the squared norm of that
        foot's 6-component wrench, divided by the number of such pairs
        (zero if there are none).
    grad : ndarray, shape (12, 4)
    """
    g = np.asarray(pred_gamma_f, dtype=float)
    contact = np.asarray(contact, dtype=bool)
    basis = vander(frame_times(contact.shape[0]), g.shape[1] - 1)
    fc = basis @ g.T
    mask = np.zeros_like(fc)
    for i in range(2):
        off = ~contact[:, i]
        mask[off, 3 * i:3 * i + 3] = 1.0
        mask[off, 6 + 3 * i:6 + 3 * i + 3] = 1.0
    count = int(np.sum(~contact))
    if count == 0:
        return 0.0, np.zeros_like(g)
    masked = fc * mask
    loss = float(np.sum(masked**2) / count)
    return loss, (2.0 * masked / count).T @ basis


def window_forward(sample, gamma_f, gamma_tau, damping, grad=True):
    """Forward loss of one window for given coefficients.

    Returns ``(loss, grad_f, grad_tau)``, or ``None`` if the simulation
    diverges.
    """
    inp = ForwardInput(sample.x0, sample.m_xdot, sample.dt, sample.n, gamma_f=gamma_f, gamma_tau=gamma_tau)
    model = model_for(sample)
    try:
        if not grad:
            states, damp = simulate(inp, model, damping)
            return forward_loss(states, sample.x_true(), damp, damping.alpha), None, None
        loss, g, _, _, bundle = forward_loss_and_grad(inp, model, damping, sample.x_true())
    except DivergenceError:
        return None
    _, gf, gt = bundle.split(g)
    return loss, gf, gt


def window_inverse_loss(sample, gamma_f, gyroscopic=False):
    """Inverse loss of one window and its gradient with respect to ``gamma_f``."""
    res = window_inverse(model_for(sample), sample.motion, gamma_f, sample.length, gyroscopic)
    return res.loss, backprop_inverse(res.residuals, res.jacobians, res.basis)


# --------------------------------------------------------------------------
# adaptive weighting

@dataclass
class LossWeights:
    """Per-loss weights plus the averages observed in the last epoch."""

    weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSSES})
    averages: dict = field(default_factory=dict)
    anchor: str = "mse"
    floor: float = 1e-8
    ceiling: float = 1e8

    def __post_init__(self):
        if any(not w > 0 for w in self.weights.values()):
            raise InvalidParameterError("loss weights must be positive")

    def __getitem__(self, key):
        return self.weights[key]


def update_adaptive_weights(weights, averages):
    """Rescale weights so that ``weight * average`` equals the anchor average.

    The anchor keeps weight 1.  Losses with a zero observed average get the
    ceiling; all weights are clipped to ``[floor, ceiling]``.
    """
    anchor = weights.anchor
    if anchor not in averages:
        return replace(weights, averages=dict(averages))
    ref = averages[anchor]
    new = dict(weights.weights)
    new[anchor] = 1.0
    for name, avg in averages.items():
        if name == anchor:
            continue
        w = weights.ceiling if avg <= 0 else ref / avg
        new[name] = float(np.clip(w, weights.floor, weights.ceiling))
    return replace(weights, weights=new, averages=dict(averages))


# --------------------------------------------------------------------------
# optimizer

@dataclass
class Sgd:
    """Stochastic gradient descent with momentum and gradient-norm clipping."""

    lr: float = 1e-3
    momentum: float = 0.9
    clip: float = 10.0
    velocity: list = None

    def step(self, params, grads):
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if self.clip and norm > self.clip:
            grads = [g * (self.clip / norm) for g in grads]
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v -= self.lr * g
            p += v
        return norm


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    """Training settings.

    ``supervised_fraction`` keeps force/torque labels for that share of the
    training subjects (rounded up, at least one if positive); the other
    training windows stay in the motion (and contact) sets.
    ``aux_batches`` caps the number of forward/inverse/contact batches per
    epoch (``None``: one pass over the respective subset).
    """

    mode: str = "baseline"
    epochs: int = 200
    batch_size: int = 16
    aux_batch_size: int = 8
    aux_batches: int | None = None
    lr: float = 1e-3
    momentum: float = 0.9
    clip: float = 10.0
    seed: int = 0
    supervised_fraction: float = 1.0
    mirror: bool = False
    alpha: float = 1.0
    damping_k: float = 10.0
    gyroscopic: bool = False
    weight_floor: float = 1e-8
    weight_ceiling: float = 1e8
    val_every: int = 1
    val_aux_windows: int = 8
    patience: int | None = None
    init_scheme: str = "he"
    sizes: tuple = DEFAULT_SIZES

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if not 0.0 <= self.supervised_fraction <= 1.0:
            raise InvalidParameterError("supervised_fraction must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.aux_batch_size < 1:
            raise InvalidParameterError("epochs must be >= 0 and batch sizes >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise InvalidParameterError("invalid optimizer settings")
        object.__setattr__(self, "sizes", tuple(self.sizes))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidParameterError(f"unknown training settings: {sorted(unknown)}")
        return cls(**data)


def active_losses(mode):
    return {
        "baseline": ("mse",),
        "F": ("mse", "forward"),
        "cFI": ("mse", "contact", "inverse", "forward"),
        "transfer-F": ("forward",),
        "transfer-cFI": ("contact", "inverse", "forward"),
    }[mode]


# --------------------------------------------------------------------------
# data preparation

def reduce_supervision(windows, fraction, seed=0):
    """Strip force/torque labels from all but ``fraction`` of the subjects."""
    subjects = sorted({w.subject for w in windows if w.gamma_f is not None})
    if fraction >= 1.0 or not subjects:
        return list(windows)
    n_keep = 0 if fraction <= 0 else max(1, math.ceil(fraction * len(subjects)))
    rng = np.random.default_rng(seed)
    keep = set(rng.permutation(subjects)[:n_keep].tolist())
    return [w if w.subject in keep else replace(w, gamma_f=None, gamma_tau=None) for w in windows]


def subject_split(subjects, seed, n_test=1, n_val=1):
    """Subject-wise train/val/test split."""
    subjects = sorted(subjects)
    if len(subjects) < n_test + n_val + 1:
        raise InvalidParameterError(f"need at least {n_test + n_val + 1} subjects, got {len(subjects)}")
    perm = np.random.default_rng(seed).permutation(subjects).tolist()
    return perm[n_test + n_val:], perm[n_test:n_test + n_val], perm[:n_test]


def _check_mode(mode, supervised, motion, contact):
    if mode in ("baseline", "F", "cFI") and not supervised:
        raise ModeError(f"mode {mode} needs ground-reaction or torque samples, none available")
    if mode in ("F", "transfer-F") and not motion:
        raise ModeError(f"mode {mode} needs motion samples")
    if mode in ("cFI", "transfer-cFI") and not contact:
        raise ModeError(f"mode {mode} needs contact labels, none available")


def _interleave(groups):
    """Spread batches of several losses evenly: sort by fractional position."""
    items = []
    for name, batches in groups:
        n = len(batches)
        items += [((k + 0.5) / n, name, b) for k, b in enumerate(batches)]
    items.sort(key=lambda t: (t[0], t[1]))
    return [(name, b) for _, name, b in items]


def _batches(items, size, rng, limit=None):
    idx = rng.permutation(len(items))
    out = [[items[i] for i in idx[k:k + size]] for k in range(0, len(idx), size)]
    if limit is not None:
        while len(out) < limit:
            idx = rng.permutation(len(items))
            out += [[items[i] for i in idx[k:k + size]] for k in range(0, len(idx), size)]
        out = out[:limit]
    return out


def epoch_schedule(mode, supervised, motion, contact, cfg, rng):
    """List of ``(loss, batch)`` pairs for one epoch."""
    groups = []
    if "mse" in active_losses(mode) and supervised:
        groups.append(("mse", _batches(supervised, cfg.batch_size, rng)))
    if mode in ("F", "transfer-F"):
        groups.append(("forward", _batches(motion, cfg.aux_batch_size, rng, cfg.aux_batches)))
    elif mode in ("cFI", "transfer-cFI"):
        batches = _batches(contact, cfg.aux_batch_size, rng, cfg.aux_batches)
        rot = ("contact", "inverse", "forward")
        groups += [(name, [b for k, b in enumerate(batches) if k % 3 == j]) for j, name in enumerate(rot)]
    groups = [g for g in groups if g[1]]
    return _interleave(groups)


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainState:
    net: object
    weights: LossWeights
    damping: DampingConfig
    history: list = field(default_factory=list)
    best_val: float = float("inf")
    best_epoch: int = -1


def batch_loss(net, name, batch, damping, weights, cfg):
    """Loss value and parameter gradients of one single-loss mini-batch.

    Returns ``(raw_loss, grads, n_used)``; samples whose simulation diverges
    are skipped.
    """
    feats = np.stack([window_features(w) for w in batch])
    y, cache = forward_pass(net, feats)
    pf, pt = y[:, :N_FORCE].reshape(-1, 12, 4), y[:, N_FORCE:].reshape(-1, 18, 2)
    gf, gt = np.zeros_like(pf), np.zeros_like(pt)
    if name == "mse":
        tf = np.stack([w.gamma_f for w in batch])
        has_tau = np.array([w.gamma_tau is not None for w in batch])
        tt = np.stack([w.gamma_tau if w.gamma_tau is not None else np.zeros((18, 2)) for w in batch])
        loss, gf, gt = loss_mse(pf, pt, tf, tt, has_tau, scale=net.out_std)
        used = len(batch)
    else:
        total, used = 0.0, 0
        for k, w in enumerate(batch):
            if name == "forward":
                out = window_forward(w, pf[k], pt[k], damping)
                if out is None:
                    continue
                val, a, b = out
                gf[k], gt[k] = a, b
            elif name == "inverse":
                val, gf[k] = window_inverse_loss(w, pf[k], cfg.gyroscopic)
            else:
                val, gf[k] = loss_contact(pf[k], w.contact)
            total += val
            used += 1
        if used == 0:
            return float("nan"), None, 0
        loss = total / used
        gf, gt = gf / used, gt / used
    dl_dy = np.concatenate([gf.reshape(len(batch), -1), gt.reshape(len(batch), -1)], axis=1)
    grads = net_backward(net, cache, weights[name] * dl_dy)
    return loss, grads, used


def train_epoch(state, sets, cfg, rng, opt):
    """One pass of the mode's schedule; updates ``state.net`` in place.

    Returns a dict of average raw loss values per active loss.
    """
    supervised, motion, contact = sets
    sums, counts = {}, {}
    for name, batch in epoch_schedule(cfg.mode, supervised, motion, contact, cfg, rng):
        loss, grads, used = batch_loss(state.net, name, batch, state.damping, state.weights, cfg)
        if used == 0 or not np.isfinite(loss):
            continue
        opt.step(state.net.params(), grads)
        sums[name] = sums.get(name, 0.0) + loss
        counts[name] = counts.get(name, 0) + 1
    return {k: sums[k] / counts[k] for k in sums}


def evaluate_losses(net, windows, damping, weights, cfg, losses):
    """Average raw losses on held-out windows (aux losses on a fixed subset)."""
    out = {}
    sup = [w for w in windows if w.gamma_f is not None]
    if "mse" in losses and sup:
        out["mse"] = batch_loss(net, "mse", sup, damping, weights, cfg)[0]
    aux = [w for w in windows if w.contact is not None] if "contact" in losses else list(windows)
    aux = aux[:cfg.val_aux_windows]
    for name in ("forward", "inverse", "contact"):
        if name in losses and aux:
            feats = np.stack([window_features(w) for w in aux])
            y, _ = forward_pass(net, feats)
            pf, pt = y[:, :N_FORCE].reshape(-1, 12, 4), y[:, N_FORCE:].reshape(-1, 18, 2)
            vals = []
            for k, w in enumerate(aux):
                if name == "forward":
                    r = window_forward(w, pf[k], pt[k], damping, grad=False)
                    vals.append(r[0] if r is not None else np.nan)
                elif name == "inverse":
                    vals.append(window_inverse(model_for(w), w.motion, pf[k], w.length, cfg.gyroscopic).loss)
                else:
                    vals.append(loss_contact(pf[k], w.contact)[0])
            out[name] = float(np.nanmean(vals)) if np.any(np.isfinite(vals)) else float("inf")
    return out


def _calibrate(state, sets, cfg, rng):
    """Initial weights from one batch of each active loss."""
    supervised, motion, contact = sets
    probe = {}
    for name in active_losses(cfg.mode):
        pool = supervised if name == "mse" else (motion if name == "forward" and cfg.mode in ("F", "transfer-F")
                                                 else contact)
        if not pool:
            continue
        batch = [pool[i] for i in rng.permutation(len(pool))[:cfg.aux_batch_size]]
        loss, _, used = batch_loss(state.net, name, batch, state.damping, state.weights, cfg)
        if used:
            probe[name] = loss
    state.weights = update_adaptive_weights(state.weights, probe)


def prepare_sets(windows, cfg):
    train = list(windows)
    if cfg.mirror:
        from .dataset import mirror_augment

        train += [mirror_augment(w) for w in train]
    supervised = [w for w in train if w.gamma_f is not None]
    contact = [w for w in train if w.contact is not None]
    return train, supervised, train, contact


def fit_normalization(net, windows):
    feats = np.stack([window_features(w) for w in windows])
    sup = [w for w in windows if w.gamma_f is not None]
    if sup:
        targets = np.stack([window_targets(w) for w in sup])
        # torque statistics only from torque-labelled windows
        tau = [window_targets(w)[N_FORCE:] for w in sup if w.gamma_tau is not None]
        net.set_normalization(feats, targets)
        if tau:
            tau = np.stack(tau)
            net.out_mean[N_FORCE:] = tau.mean(0)
            net.out_std[N_FORCE:] = np.where(tau.std(0) > 1e-8, tau.std(0), 1.0)
    else:
        net.set_normalization(feats)


def train(train_windows, cfg, val_windows=(), net=None, damping=None, progress=None):
    """Train a network according to ``cfg.mode``.

    Parameters
    ----------
    train_windows : list of WindowSample
        Already reduced to the supervised fraction (see ``reduce_supervision``).
    val_windows : list of WindowSample
        Used to track the best epoch (lowest weighted validation loss).
    net : Mlp, optional
        Start from this network (transfer); its normalization is kept.

    Returns
    -------
    net : Mlp
        Parameters of the best validation epoch (or the last epoch without
        validation data).
    history : list of dict
        Per-epoch loss averages, weights and validation loss.
    """
    train_set, supervised, motion, contact = prepare_sets(train_windows, cfg)
    _check_mode(cfg.mode, supervised, motion, contact)
    rng = np.random.default_rng(cfg.seed)
    if damping is None:
        damping = DampingConfig(sigma_from_windows(train_set), k=cfg.damping_k, alpha=cfg.alpha)
    if net is None:
        net = net_init(cfg.seed, cfg.sizes, cfg.init_scheme)
        fit_normalization(net, train_set)
    else:
        net = net.copy()
    anchor = "mse" if "mse" in active_losses(cfg.mode) else "forward"
    weights = LossWeights({k: 1.0 for k in active_losses(cfg.mode)}, anchor=anchor,
                          floor=cfg.weight_floor, ceiling=cfg.weight_ceiling)
    state = TrainState(net, weights, damping)
    sets = (supervised, motion, contact)
    _calibrate(state, sets, cfg, rng)
    opt = Sgd(cfg.lr, cfg.momentum, cfg.clip)
    best = net.copy()
    stale = 0
    for epoch in range(cfg.epochs):
        avgs = train_epoch(state, sets, cfg, rng, opt)
        record = {"epoch": epoch, **{f"loss_{k}": v for k, v in avgs.items()},
                  **{f"weight_{k}": v for k, v in state.weights.weights.items()}}
        state.weights = update_adaptive_weights(state.weights, avgs)
        if val_windows and (epoch % cfg.val_every == 0 or epoch == cfg.epochs - 1):
            vl = evaluate_losses(state.net, list(val_windows), damping, state.weights, cfg,
                                 active_losses(cfg.mode))
            total = float(sum(state.weights.weights.get(k, 1.0) * v for k, v in vl.items()))
            record.update({f"val_{k}": v for k, v in vl.items()}, val_total=total)
            if total < state.best_val:
                state.best_val, state.best_epoch, best = total, epoch, state.net.copy()
                stale = 0
            else:
                stale += 1
        state.history.append(record)
        if progress:
            progress(record)
        if cfg.patience is not None and stale > cfg.patience:
            break
    if not val_windows or state.best_epoch < 0:
        best = state.net
    return best, state.history


def write_history_csv(path, history):
    keys = []
    for rec in history:
        keys += [k for k in rec if k not in keys]
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys)
        wr.writeheader()
        for rec in history:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
    return path


# --------------------------------------------------------------------------
# experiments

def run_transfer(net, target, mode, cfg, val_windows=()):
    """Fine-tune a pretrained network on target-domain motion (and contacts).

    Force and torque labels of the target data are ignored.
    """
    if mode not in ("transfer-F", "transfer-cFI"):
        raise ModeError(f"transfer mode must be transfer-F or transfer-cFI, got {mode!r}")
    windows = [replace(w, gamma_f=None, gamma_tau=None) for w in target]
    if mode == "transfer-cFI" and not any(w.contact is not None for w in windows):
        raise ModeError("transfer-cFI needs contact labels in the target data")
    cfg = replace(cfg, mode=mode)
    val = [replace(w, gamma_f=None, gamma_tau=None) for w in val_windows]
    return train(windows, cfg, val, net=net)


def split_dataset(ds, seed, n_test=1, n_val=1):
    tr, va, te = subject_split(ds.subjects, seed, n_test, n_val)
    return ds.by_subjects(tr), ds.by_subjects(va), ds.by_subjects(te)


def evaluate_net(net, test, train_windows, damping=None, n_state_windows=0):
    """Metric report plus (optionally) simulated-state RMSE on test windows."""
    ranges = training_ranges(train_windows)
    n_train = sum(w.gamma_f is not None for w in train_windows)
    report, curves = evaluate_sequences(net, test.windows, test.sequences, ranges, n_train)
    out = {"eps_f": report.eps_f, "eps_m": report.eps_m, "eps_tau": report.eps_tau,
           "eps_rf": report.eps_rf, "eps_rm": report.eps_rm, "eps_rtau": report.eps_rtau}
    if n_state_windows and damping is not None:
        out["state_rmse"], out["diverged"] = state_rmse(net, test.windows[:n_state_windows], damping)
    return out, report, curves


def run_reduction_experiment(ds, fractions, modes, cfg, seeds=(0, 1, 2), n_test=1, n_val=1,
                             n_state_windows=0, progress=None):
    """Train every mode at every supervised fraction on subject-wise splits.

    Returns a list of row dicts (one per split, fraction and mode) with JT,
    GRF and GRM errors on the held-out subjects.
    """
    rows = []
    for seed in seeds:
        train_ds, val_ds, test_ds = split_dataset(ds, seed, n_test, n_val)
        damping = DampingConfig(sigma_from_windows(train_ds.windows), k=cfg.damping_k, alpha=cfg.alpha)
        for frac in fractions:
            reduced = reduce_supervision(train_ds.windows, frac, seed)
            for mode in modes:
                run_cfg = replace(cfg, mode=mode, seed=cfg.seed + seed, supervised_fraction=frac)
                net, hist = train(reduced, run_cfg, val_ds.windows, damping=damping)
                metrics, _, _ = evaluate_net(net, test_ds, reduced, damping, n_state_windows)
                row = {"split": seed, "fraction": frac, "mode": mode, **metrics}
                rows.append(row)
                if progress:
                    progress(row)
    return rows


def run_noise_experiment(ds, sigmas, cfg, seeds=(0, 1, 2), contact_flip=(0.1, 0.5), n_test=1, n_val=1,
                         noise_seed=0, repeats=1, progress=None):
    """Train and test on motion with joint-angle noise.

    For every split and noise level the training and test windows get angle
    noise of ``sigma`` degrees; force and torque labels stay clean.  Contact
    labels are flipped as well when ``cfg.mode`` uses the contact loss.  The
    noise draws are shared across levels (only their scale changes) and the
    training seed is fixed per split, so ``sigma = 0`` is the clean run.
    With ``repeats > 1`` each cell trains that many networks from different
    initializations and reports their mean errors.
    """
    if repeats < 1:
        raise InvalidParameterError("repeats must be >= 1")
    flip = contact_flip if "contact" in active_losses(cfg.mode) else (0.0, 0.0)
    rows = []
    for seed in seeds:
        train_ds, val_ds, test_ds = split_dataset(ds, seed, n_test, n_val)
        train_ds = replace(train_ds, windows=reduce_supervision(train_ds.windows, cfg.supervised_fraction, seed))
        damping = DampingConfig(sigma_from_windows(train_ds.windows), k=cfg.damping_k, alpha=cfg.alpha)
        for sigma in sigmas:
            fl = flip if sigma > 0 else (0.0, 0.0)
            tr = noisy_dataset(train_ds, sigma, fl, seed=[noise_seed, seed, 0])
            te = noisy_dataset(test_ds, sigma, fl, seed=[noise_seed, seed, 1])
            runs = []
            for r in range(repeats):
                net, _ = train(tr.windows, replace(cfg, seed=cfg.seed + seed + 1000 * r), val_ds.windows,
                               damping=damping)
                runs.append(evaluate_net(net, te, tr.windows)[0])
            metrics = {k: float(np.mean([m[k] for m in runs])) for k in runs[0]}
            row = {"split": seed, "sigma": float(sigma), "mode": cfg.mode, **metrics}
            rows.append(row)
            if progress:
                progress(row)
    return rows


def summarize_rows(rows, keys=("fraction", "mode"), metrics=("eps_tau", "eps_f", "eps_m")):
    """Average metric columns over splits."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        rec = dict(zip(keys, key))
        for m in metrics:
            vals = [r[m] for r in rs if m in r]
            rec[m] = float(np.mean(vals)) if vals else float("nan")
        rec["n"] = len(rs)
        out.append(rec)
    return out


# --------------------------------------------------------------------------
# torque labels by forward-dynamics fitting

@dataclass(frozen=True)
class TorqueOptConfig:
    """Damped Gauss-Newton settings for the torque fit.

    ``threshold`` is the largest accepted RMSE between simulated and target
    states (SI units: m, rad, m/s, rad/s).  ``horizons`` lists the shares of
    the window fitted in turn; each stage starts from the previous result.
    """

    max_iter: int = 40
    threshold: float = 0.05
    rtol: float = 1e-10
    lam0: float = 1e-3
    max_tries: int = 12
    horizons: tuple = (0.25, 0.5, 1.0)

    def __post_init__(self):
        h = tuple(float(v) for v in self.horizons)
        if not h or h[-1] != 1.0 or any(not 0 < a <= b for a, b in zip((1e-12,) + h, h)):
            raise InvalidParameterError("horizons must increase and end at 1")
        object.__setattr__(self, "horizons", h)


@dataclass
class TorqueFit:
    gamma_tau: np.ndarray
    success: bool
    rmse: float
    loss: float
    iterations: int
    message: str = ""


def _truncate(coeffs, frac):
    """Coefficients on ``[0, frac]`` re-expressed on a unit interval."""
    return np.asarray(coeffs, dtype=float) * frac ** np.arange(np.shape(coeffs)[-1])


def _lm_stage(g, make, scale, x_true, model, damping, opt):
    """Levenberg-Marquardt iterations on one horizon; returns (g, loss, states, iterations)."""
    loss, grad, states, _, bundle = forward_loss_and_grad(make(g), model, damping, x_true)
    lam, it = opt.lam0, 0
    a = bundle.n_state + bundle.n_force
    for it in range(1, opt.max_iter + 1):
        jac = bundle.dx_dp[:, :, a:].reshape(-1, g.size) * scale
        hess = 2.0 / jac.shape[0] * (jac.T @ jac)
        gt = grad[a:] * scale
        diag = np.diag(hess).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        for _ in range(opt.max_tries):
            try:
                step = np.linalg.solve(hess + lam * np.diag(diag), -gt)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = g + step.reshape(g.shape)
            try:
                st, damp = simulate(make(trial), model, damping)
                trial_loss = forward_loss(st, x_true, damp, damping.alpha)
            except DivergenceError:
                trial_loss = float("inf")
            if trial_loss < loss:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            it -= 1
            break
        decrease = loss - trial_loss
        g = trial
        lam = max(lam / 3.0, 1e-12)
        loss, grad, states, _, bundle = forward_loss_and_grad(make(g), model, damping, x_true)
        if decrease <= opt.rtol * max(loss, 1e-300) or loss < 1e-28:
            break
    return g, loss, states, it


def optimize_torques(x0, m_xdot, gamma_f, x_true, dt, model, damping, opt=TorqueOptConfig(), gamma_tau0=None):
    """Fit linear torque coefficients so that the simulation follows ``x_true``.

    Minimizes the forward loss over ``gamma_tau`` (initialized at zero) with
    Levenberg-Marquardt steps built from the forward-layer sensitivities:
    the exact loss gradient and the Gauss-Newton approximation
    ``2/N J^T J`` of its Hessian.  The fit grows the simulated horizon in
    stages (``opt.horizons``); short horizons are nearly linear in the
    torques and lead the full-window fit into the right basin.  Divergence
    is reported as a failure.
    """
    x_true = np.asarray(x_true, dtype=float)
    n = x_true.shape[0]
    n_act = len(model.actuated)
    g = np.zeros((n_act, 2)) if gamma_tau0 is None else np.array(gamma_tau0, dtype=float)
    total = 0
    loss = float("inf")
    for share in opt.horizons:
        h = max(1, int(round(share * n)))
        frac = h / n
        gf = _truncate(gamma_f, frac)
        scale = np.tile(frac ** np.arange(2), n_act)

        def make(gt, h=h, frac=frac, gf=gf):
            return ForwardInput(x0, m_xdot, dt, h, gamma_f=gf, gamma_tau=_truncate(gt, frac))

        try:
            g, loss, states, it = _lm_stage(g, make, scale, x_true[:h], model, damping, opt)
        except DivergenceError as exc:
            return TorqueFit(g, False, float("inf"), float("inf"), total, str(exc))
        total += it
    rmse = float(np.sqrt(np.mean((states - x_true) ** 2)))
    ok = rmse < opt.threshold
    return TorqueFit(g, ok, rmse, loss, total, "" if ok else f"state RMSE {rmse:.3g} above threshold")


def optimize_window_torques(sample, damping, opt=TorqueOptConfig()):
    """``optimize_torques`` for a ground-reaction-set window."""
    if sample.gamma_f is None:
        raise ModeError("torque fitting needs force coefficients")
    return optimize_torques(sample.x0, sample.m_xdot, sample.gamma_f, sample.x_true(), sample.dt,
                            model_for(sample), damping, opt)

