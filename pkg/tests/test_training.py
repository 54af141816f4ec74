from dataclasses import replace

import numpy as np
import pytest

from locodyn.dataset import model_for, sigma_from_windows
from locodyn.dynamics import DampingConfig, Terms, contact_jacobian
from locodyn.errors import InvalidParameterError, ModeError
from locodyn.network import checkpoint_bytes, forward_pass, net_init, window_features
from locodyn.synth import oracle_windows
from locodyn.training import (LossWeights, Sgd, TorqueOptConfig, TrainConfig, active_losses, batch_loss,
                              epoch_schedule, fit_normalization, loss_contact, loss_mse, optimize_torques,
                              prepare_sets, reduce_supervision, run_reduction_experiment, run_transfer,
                              split_dataset, subject_split, train, update_adaptive_weights)
from oracles import central_difference

FAST = TrainConfig(epochs=2, batch_size=8, aux_batch_size=4, aux_batches=1, lr=3e-3)


# losses

def test_mse_examples():
    rng = np.random.default_rng(0)
    pf, pt = rng.normal(size=(3, 12, 4)), rng.normal(size=(3, 18, 2))
    assert loss_mse(pf, pt, pf, pt)[0] == 0.0
    tf = pf.copy()
    tf[1, 4, 2] += 1.0
    assert loss_mse(pf[1:2], pt[1:2], tf[1:2], pt[1:2])[0] == pytest.approx(1.0)
    tf, tt = rng.normal(size=pf.shape), rng.normal(size=pt.shape)
    ref = np.mean([np.sum((pf[b] - tf[b]) ** 2) + np.sum((pt[b] - tt[b]) ** 2) for b in range(3)])
    assert loss_mse(pf, pt, tf, tt)[0] == pytest.approx(ref, rel=1e-12)


def test_mse_masks_missing_torques_and_gradient():
    rng = np.random.default_rng(1)
    pf, pt, tf, tt = (rng.normal(size=s) for s in ((2, 12, 4), (2, 18, 2), (2, 12, 4), (2, 18, 2)))
    loss, gf, gt = loss_mse(pf, pt, tf, tt, has_tau=[True, False], scale=np.full(84, 2.0))
    assert np.all(gt[1] == 0)
    fd = central_difference(lambda p: loss_mse(p.reshape(pf.shape), pt, tf, tt, [True, False], np.full(84, 2.0))[0],
                            pf.ravel(), 1e-6)
    assert np.allclose(gf.ravel(), fd, atol=1e-8)


def test_contact_loss_examples():
    contact = np.zeros((10, 2), dtype=bool)
    contact[:, 1] = True
    g = np.zeros((12, 4))
    g[3:6, 0] = 5.0  # right foot force while in contact: not penalized
    assert loss_contact(g, contact)[0] == 0.0
    assert loss_contact(np.ones((12, 4)), np.ones((10, 2), dtype=bool))[0] == 0.0
    g = np.zeros((12, 4))
    g[0:3, 0] = 1.0  # 1 N on each force axis of the swinging left foot
    assert loss_contact(g, contact)[0] == pytest.approx(3.0)
    g = np.random.default_rng(2).normal(size=(12, 4))
    contact = np.random.default_rng(3).random((25, 2)) > 0.5
    _, grad = loss_contact(g, contact)
    fd = central_difference(lambda p: loss_contact(p.reshape(12, 4), contact)[0], g.ravel(), 1e-6)
    assert np.allclose(grad.ravel(), fd, atol=1e-7)


# adaptive weights

def test_adaptive_weights():
    w = LossWeights({"mse": 1.0, "forward": 1.0, "inverse": 1.0})
    same = update_adaptive_weights(w, {"mse": 2.0, "forward": 2.0, "inverse": 2.0})
    assert all(v == 1.0 for v in same.weights.values())
    ten = update_adaptive_weights(w, {"mse": 1.0, "forward": 10.0})
    assert ten["forward"] == pytest.approx(0.1)
    zero = update_adaptive_weights(LossWeights({"mse": 1.0, "inverse": 1.0}, ceiling=1e6), {"mse": 1.0, "inverse": 0.0})
    assert zero["inverse"] == 1e6
    with pytest.raises(InvalidParameterError):
        LossWeights({"mse": 0.0})


# schedule and data handling

def test_config_validation():
    with pytest.raises(ModeError):
        TrainConfig(mode="G")
    with pytest.raises(InvalidParameterError):
        TrainConfig(supervised_fraction=1.5)
    with pytest.raises(InvalidParameterError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_motion_only_data_rejected(small_dataset):
    motion = [replace(w, gamma_f=None, gamma_tau=None) for w in small_dataset.windows]
    with pytest.raises(ModeError):
        train(motion, FAST)
    no_contact = [replace(w, contact=None) for w in small_dataset.windows]
    with pytest.raises(ModeError):
        train(no_contact, replace(FAST, mode="cFI"))


def test_alternation_fairness(small_dataset):
    cfg = TrainConfig(mode="cFI", batch_size=4, aux_batch_size=2)
    windows = reduce_supervision(small_dataset.windows, 0.25, seed=0)
    _, sup, motion, contact = prepare_sets(windows, cfg)
    sched = epoch_schedule("cFI", sup, motion, contact, cfg, np.random.default_rng(0))
    names = [n for n, _ in sched]
    n_aux = -(-len(contact) // cfg.aux_batch_size)
    assert names.count("mse") == -(-len(sup) // cfg.batch_size)
    for name in ("contact", "inverse", "forward"):
        assert abs(names.count(name) - n_aux / 3) <= 1
    # batches of one loss are spread over the epoch, not bunched up
    for name in set(names):
        pos = [(i + 0.5) / len(names) for i, n in enumerate(names) if n == name]
        assert abs(np.mean(pos) - 0.5) < 0.15


def test_reduce_supervision_and_split(small_dataset):
    reduced = reduce_supervision(small_dataset.windows, 0.25, seed=1)
    keep = {w.subject for w in reduced if w.gamma_f is not None}
    assert len(keep) == 1
    assert len(reduced) == len(small_dataset.windows)
    assert reduce_supervision(small_dataset.windows, 1.0) == list(small_dataset.windows)
    tr, va, te = subject_split(["a", "b", "c", "d"], seed=0)
    assert sorted(tr + va + te) == ["a", "b", "c", "d"] and len(te) == len(va) == 1
    with pytest.raises(InvalidParameterError):
        subject_split(["a", "b"], seed=0)


# optimization behaviour

def test_zero_learning_rate_keeps_weights(small_dataset):
    net0 = net_init(0)
    fit_normalization(net0, small_dataset.windows)
    net, _ = train(small_dataset.windows, replace(FAST, lr=0.0, epochs=1), net=net0)
    assert checkpoint_bytes(net) == checkpoint_bytes(net0)


def test_single_step_descent(small_dataset):
    net = net_init(0)
    fit_normalization(net, small_dataset.windows)
    w = [small_dataset.windows[0]]
    weights = LossWeights({"mse": 1.0})
    damping = DampingConfig(sigma_from_windows(small_dataset.windows))
    before, grads, _ = batch_loss(net, "mse", w, damping, weights, FAST)
    Sgd(lr=1e-3, momentum=0.0, clip=0).step(net.params(), grads)
    after, _, _ = batch_loss(net, "mse", w, damping, weights, FAST)
    assert after < before


@pytest.mark.parametrize("name", ["mse", "forward", "inverse", "contact"])
def test_frozen_batch_descent(small_dataset, name):
    net = net_init(1)
    fit_normalization(net, small_dataset.windows)
    batch = small_dataset.windows[:4]
    weights = LossWeights({name: 1.0}, anchor=name)
    damping = DampingConfig(sigma_from_windows(small_dataset.windows))
    opt = Sgd(lr=1e-2 if name == "mse" else 1e-3, momentum=0.9, clip=10.0)
    first = batch_loss(net, name, batch, damping, weights, FAST)[0]
    for _ in range(20):
        _, grads, _ = batch_loss(net, name, batch, damping, weights, FAST)
        opt.step(net.params(), grads)
    last = batch_loss(net, name, batch, damping, weights, FAST)[0]
    assert last <= 0.8 * first


def test_training_is_reproducible(small_dataset):
    tr, va, _ = split_dataset(small_dataset, seed=0)
    a, ha = train(tr.windows, replace(FAST, mode="F"), va.windows)
    b, hb = train(tr.windows, replace(FAST, mode="F"), va.windows)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert ha == hb and {"loss_mse", "loss_forward", "val_total"} <= set(ha[0])


def test_transfer(small_dataset):
    tr, va, _ = split_dataset(small_dataset, seed=0)
    net, _ = train(tr.windows, FAST, va.windows)
    with pytest.raises(ModeError):
        run_transfer(net, tr.windows, "F", FAST)
    with pytest.raises(ModeError):
        run_transfer(net, [replace(w, contact=None) for w in tr.windows], "transfer-cFI", FAST)
    tuned, hist = run_transfer(net, tr.windows, "transfer-F", FAST, va.windows)
    assert len(hist) == FAST.epochs and all("loss_forward" in h for h in hist)


def test_transfer_contact_loss_pulls_swing_forces_to_zero(small_dataset):
    tr, _, _ = split_dataset(small_dataset, seed=0)
    net, _ = train(tr.windows, FAST)
    swing = [replace(w, contact=np.zeros_like(w.contact)) for w in tr.windows]
    feats = np.stack([window_features(w) for w in swing])
    before = np.abs(forward_pass(net, feats)[0][:, :48]).mean()
    cfg = replace(FAST, epochs=6, aux_batches=6, lr=1e-3)
    tuned, _ = run_transfer(net, swing, "transfer-cFI", cfg)
    after = np.abs(forward_pass(tuned, feats)[0][:, :48]).mean()
    assert after < before


def test_reduction_plumbing(small_dataset):
    with pytest.raises(ModeError):
        run_reduction_experiment(small_dataset, [0.0], ["baseline"], FAST, seeds=(0,))
    rows = run_reduction_experiment(small_dataset, [1.0], ["baseline"], FAST, seeds=(0,))
    tr, va, te = split_dataset(small_dataset, 0)
    net, _ = train(tr.windows, replace(FAST, seed=FAST.seed + 0), va.windows)
    from locodyn.training import evaluate_net
    metrics, _, _ = evaluate_net(net, te, tr.windows)
    assert rows[0]["eps_tau"] == metrics["eps_tau"] and rows[0]["eps_f"] == metrics["eps_f"]


def test_active_losses():
    assert active_losses("baseline") == ("mse",)
    assert set(active_losses("cFI")) == {"mse", "contact", "inverse", "forward"}


# torque fitting

def test_torque_recovery_oracle():
    o = oracle_windows(1, seed=21)[0]
    w = o.sample
    res = optimize_torques(w.x0, w.m_xdot, w.gamma_f, o.states, w.dt, model_for(w), DampingConfig(np.ones(48)))
    assert res.success
    assert np.sqrt(np.mean((res.gamma_tau - o.gamma_tau) ** 2)) < 1e-3


def _standing(human):
    q = np.zeros(24)
    q[2] = 0.9 * (human.segments[1].length + human.segments[2].length)
    # slightly crouched so that the hips, knees and ankles carry load
    for base in (6, 15):
        q[base:base + 9:3] = (-0.3, 0.6, -0.3)
    t = Terms(human, q, np.zeros(24))
    jc = contact_jacobian(human, t.jv, t.jw)
    # support wrench that balances the root rows, then the joint torques that hold the pose
    fc = np.linalg.lstsq(jc[:6], -t.bias[:6], rcond=None)[0]
    tau = -(t.bias + jc @ fc)[6:]
    return q, fc, tau


def test_standing_statics(human):
    q, fc, tau = _standing(human)
    x0 = np.r_[q, np.zeros(24)]
    n = 12
    gf = np.zeros((12, 4))
    gf[:, 0] = fc
    res = optimize_torques(x0, np.zeros(48), gf, np.tile(x0, (n, 1)), 0.01, human, DampingConfig(np.ones(48)),
                           TorqueOptConfig(threshold=1e-4, max_iter=100))
    assert res.success and res.loss < 1e-12
    assert np.allclose(res.gamma_tau[:, 0], tau, atol=1e-6)
    assert np.allclose(res.gamma_tau[:, 1], 0.0, atol=1e-6)


def test_corrupted_forces_fail(human):
    o = oracle_windows(1, seed=22)[0]
    w = o.sample
    bad = np.zeros((12, 4))
    bad[2, 0] = bad[5, 0] = 5000.0
    res = optimize_torques(w.x0, w.m_xdot, bad, o.states, w.dt, model_for(w), DampingConfig(np.ones(48)),
                           TorqueOptConfig(max_iter=10))
    assert not res.success


def test_torque_config_validation():
    with pytest.raises(InvalidParameterError):
        TorqueOptConfig(horizons=(0.5,))
    with pytest.raises(InvalidParameterError):
        TorqueOptConfig(horizons=(0.5, 0.25, 1.0))
