"""Forward-dynamics layer: Euler integration of the damped equations of motion.

The layer maps ``p = (x0, gamma_f, gamma_tau)`` (plus the constants
``l_sub`` via the body model and ``m_xdot``) to simulated states
``x_1 .. x_n``.  Wrenches and torques are evaluated from their window
polynomials at the left end of every Euler step, ``s_t = t / n`` for
``t = 0 .. n-1``.

Gradients come from integrating the sensitivity equation
``d/dt dx/dp = d/dp (f(x, u(p)) * d(f))`` with the same Euler scheme, so the
stored Jacobians are the exact derivatives of the discrete trajectory.

Parameter vector layout (``P = 2D + 4*6nc + 2*n_act``; 132 for the human
model)::

    [ x0 (2D) | gamma_f row-major (6nc, 4) | gamma_tau row-major (n_act, 2) ]
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DampingConfig, damping_slope, damping_vector, linearize, state_derivative
from .errors import DivergenceError, InvalidParameterError, NumericInputError
from .trajectory import vander

FORCE_ORDER = 3
TORQUE_ORDER = 1


@dataclass
class ForwardInput:
    """Inputs of one forward-layer evaluation.

    Either the polynomial coefficients (``gamma_f``, ``gamma_tau``) or
    explicit per-step sequences (``fc_seq``, ``tau_seq``) must be given.
    Sensitivities are only defined for the polynomial form.
    """

    x0: np.ndarray
    m_xdot: np.ndarray
    dt: float
    n: int
    gamma_f: np.ndarray | None = None
    gamma_tau: np.ndarray | None = None
    fc_seq: np.ndarray | None = None
    tau_seq: np.ndarray | None = None

    def __post_init__(self):
        if self.n < 1:
            raise InvalidParameterError("need at least one Euler step")
        if not self.dt > 0:
            raise InvalidParameterError("dt must be positive")
        self.x0 = np.asarray(self.x0, dtype=float)
        self.m_xdot = np.asarray(self.m_xdot, dtype=float)
        if not np.all(np.isfinite(self.x0)):
            raise NumericInputError("initial state is not finite")
        for name in ("fc_seq", "tau_seq"):
            seq = getattr(self, name)
            if seq is not None and np.shape(seq)[-2] != self.n:
                raise InvalidParameterError(f"{name} must hold {self.n} steps")

    @property
    def step_times(self):
        return np.arange(self.n) / self.n

    def sequences(self, model):
        """Per-step wrenches (n, 6nc) and torques (n, n_act)."""
        basis_f = vander(self.step_times, FORCE_ORDER)
        basis_t = vander(self.step_times, TORQUE_ORDER)
        if self.fc_seq is not None:
            fc = np.asarray(self.fc_seq, dtype=float)
        elif self.gamma_f is not None:
            fc = basis_f @ np.asarray(self.gamma_f, dtype=float).T
        else:
            fc = np.zeros((self.n, 6 * model.n_contacts))
        if self.tau_seq is not None:
            tau = np.asarray(self.tau_seq, dtype=float)
        elif self.gamma_tau is not None:
            tau = basis_t @ np.asarray(self.gamma_tau, dtype=float).T
        else:
            tau = np.zeros((self.n, len(model.actuated)))
        return fc, tau


@dataclass
class SensitivityBundle:
    """Stored per-step Jacobians of one simulation.

    Attributes
    ----------
    dx_dp : ndarray, shape (n, 2D, P)
        ``dx_dp[t]`` is the derivative of state ``x_{t+1}``.
    dd_dp : ndarray, shape (n, 2D, P)
        Derivative of the damping vector used in step ``t``.
    n_state, n_force, n_torque : int
        Block sizes of the parameter vector.
    """

    dx_dp: np.ndarray
    dd_dp: np.ndarray
    n_state: int
    n_force: int
    n_torque: int

    def split(self, grad):
        """Split a parameter-space vector into (x0, gamma_f, gamma_tau) blocks."""
        a, b = self.n_state, self.n_state + self.n_force
        nf, nt = self.n_force // (FORCE_ORDER + 1), self.n_torque // (TORQUE_ORDER + 1)
        return (grad[..., :a], grad[..., a:b].reshape(grad.shape[:-1] + (nf, FORCE_ORDER + 1)),
                grad[..., b:].reshape(grad.shape[:-1] + (nt, TORQUE_ORDER + 1)))


def _check_finite(x, step):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(step)


def simulate(inp, model, cfg):
    """Integrate ``n`` explicit Euler steps.

    Returns
    -------
    states : ndarray, shape (n, 2D)
        ``x_1 .. x_n``.
    damping : ndarray, shape (n, 2D)
        Damping factors applied in each step.
    """
    fc, tau = inp.sequences(model)
    x = inp.x0.copy()
    states = np.empty((inp.n, x.size))
    damping = np.empty_like(states)
    for t in range(inp.n):
        try:
            xdot, d = state_derivative(model, x, fc[t], tau[t], inp.m_xdot, cfg)
        except (np.linalg.LinAlgError, ArithmeticError, NumericInputError) as exc:
            raise DivergenceError(t + 1) from exc
        x = x + inp.dt * xdot
        _check_finite(x, t + 1)
        states[t], damping[t] = x, d
    return states, damping


def simulate_with_sensitivities(inp, model, cfg):
    """Integrate the state together with its parameter sensitivities.

    Returns
    -------
    states, damping : as for ``simulate``
    bundle : SensitivityBundle
    """
    if inp.fc_seq is not None or inp.tau_seq is not None:
        raise InvalidParameterError("sensitivities need the polynomial input form")
    n_state = inp.x0.size
    n_fc, n_act = 6 * model.n_contacts, len(model.actuated)
    gamma_f = np.zeros((n_fc, FORCE_ORDER + 1)) if inp.gamma_f is None else np.asarray(inp.gamma_f, float)
    gamma_tau = np.zeros((n_act, TORQUE_ORDER + 1)) if inp.gamma_tau is None else np.asarray(inp.gamma_tau, float)
    nf, nt = gamma_f.size, gamma_tau.size
    n_par = n_state + nf + nt
    basis_f = vander(inp.step_times, FORCE_ORDER)
    basis_t = vander(inp.step_times, TORQUE_ORDER)
    fc_all = basis_f @ gamma_f.T
    tau_all = basis_t @ gamma_tau.T

    x = inp.x0.copy()
    sens = np.zeros((n_state, n_par))
    sens[:, :n_state] = np.eye(n_state)
    states = np.empty((inp.n, n_state))
    damping = np.empty_like(states)
    dx_dp = np.empty((inp.n, n_state, n_par))
    dd_dp = np.empty_like(dx_dp)
    for t in range(inp.n):
        try:
            f, df_dx, df_dfc, df_dtau = linearize(model, x, fc_all[t], tau_all[t])
        except (np.linalg.LinAlgError, ArithmeticError, NumericInputError) as exc:
            raise DivergenceError(t + 1) from exc
        d = damping_vector(f, inp.m_xdot, cfg)
        slope = damping_slope(f, d, inp.m_xdot, cfg)
        # total derivative of the undamped derivative with respect to p
        df_dp = df_dx @ sens
        df_dp[:, n_state:n_state + nf] += (df_dfc[:, :, None] * basis_f[t]).reshape(n_state, nf)
        df_dp[:, n_state + nf:] += (df_dtau[:, :, None] * basis_t[t]).reshape(n_state, nt)
        dd_dp[t] = slope[:, None] * df_dp
        sens = sens + inp.dt * (d + f * slope)[:, None] * df_dp
        x = x + inp.dt * f * d
        _check_finite(x, t + 1)
        _check_finite(sens, t + 1)
        states[t], damping[t], dx_dp[t] = x, d, sens
    return states, damping, SensitivityBundle(dx_dp, dd_dp, n_state, nf, nt)


def forward_loss(x_sim, x_true, d_steps, alpha=1.0):
    """Mean squared state error plus ``alpha`` times the mean of ``|d - 1|``."""
    x_sim, x_true, d_steps = (np.asarray(a, dtype=float) for a in (x_sim, x_true, d_steps))
    if x_sim.shape != x_true.shape or d_steps.shape != x_sim.shape:
        raise InvalidParameterError(
            f"shape mismatch: sim {x_sim.shape}, true {x_true.shape}, damping {d_steps.shape}")
    return float(np.mean((x_sim - x_true) ** 2) + alpha * np.mean(np.abs(d_steps - 1.0)))


def forward_loss_grad(x_sim, x_true, d_steps, alpha=1.0):
    """Partial derivatives of ``forward_loss`` with respect to states and damping."""
    size = np.size(x_sim)
    dl_dx = 2.0 * (np.asarray(x_sim) - np.asarray(x_true)) / size
    # d <= 1, so |d - 1| = 1 - d
    dl_dd = np.full(np.shape(d_steps), -alpha / size)
    return dl_dx, dl_dd


def backprop_forward(dl_dx_sim, bundle, dl_dd=None):
    """Chain per-step loss gradients through the stored sensitivities.

    Parameters
    ----------
    dl_dx_sim : ndarray, shape (n, 2D)
    bundle : SensitivityBundle
    dl_dd : ndarray, shape (n, 2D), optional
        Gradient with respect to the per-step damping factors.

    Returns
    -------
    ndarray, shape (P,)
    """
    dl_dx_sim = np.asarray(dl_dx_sim, dtype=float)
    if dl_dx_sim.shape != bundle.dx_dp.shape[:2]:
        raise InvalidParameterError(f"gradient shape {dl_dx_sim.shape} does not match {bundle.dx_dp.shape[:2]}")
    grad = np.einsum("ti,tip->p", dl_dx_sim, bundle.dx_dp)
    if dl_dd is not None:
        grad = grad + np.einsum("ti,tip->p", np.asarray(dl_dd, dtype=float), bundle.dd_dp)
    return grad


def forward_loss_and_grad(inp, model, cfg, x_true):
    """Forward loss of one window and its gradient in parameter space."""
    states, damping, bundle = simulate_with_sensitivities(inp, model, cfg)
    loss = forward_loss(states, x_true, damping, cfg.alpha)
    dl_dx, dl_dd = forward_loss_grad(states, x_true, damping, cfg.alpha)
    return loss, backprop_forward(dl_dx, bundle, dl_dd), states, damping, bundle
