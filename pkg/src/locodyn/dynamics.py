"""Equations of motion in TMT form and the damped state derivative.

With the kinematic transfer matrices (segment COM and angular Jacobians)
the generalized inertia matrix is ``M = sum_s m_s Jv_s^T Jv_s + Jw_s^T I_s Jw_s``
and the generalized force collects gravity, velocity-product terms, joint
torques and the external wrenches applied at the contact segments' centers
of mass.  The state derivative ``[qd, M^-1 F]`` is multiplied component-wise
by a damping vector that is one inside an admissible band.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import chain, chain_velocity, check_coordinates, cross, jacobians, world_inertia
from .errors import NumericInputError, SingularConfigurationError

SIGMA_MIN = 1e-6


@dataclass(frozen=True)
class DampingConfig:
    """Damping band parameters.

    ``sigma_xdot`` holds per-component standard deviations of absolute
    velocities and accelerations over the training set.  Channels with zero
    spread fall back to ``sigma_min``.
    """

    sigma_xdot: np.ndarray
    k: float = 10.0
    alpha: float = 1.0
    sigma_min: float = SIGMA_MIN
    enabled: bool = True

    def __post_init__(self):
        sig = np.asarray(self.sigma_xdot, dtype=float)
        if self.k <= 0:
            raise ValueError("damping steepness k must be positive")
        if np.any(sig < 0) or not np.all(np.isfinite(sig)):
            raise ValueError("sigma_xdot must be finite and non-negative")
        object.__setattr__(self, "sigma_xdot", sig)

    @property
    def flagged(self):
        """Channels whose spread was replaced by the floor."""
        return np.flatnonzero(self.sigma_xdot < self.sigma_min)

    def band_width(self):
        return self.k * np.maximum(self.sigma_xdot, self.sigma_min)

    @classmethod
    def disabled(cls, n_state):
        return cls(sigma_xdot=np.ones(n_state), enabled=False)


def _split_state(model, x):
    x = np.asarray(x)
    n = model.n_dof
    if x.shape[-1] != 2 * n:
        raise NumericInputError(f"state must have {2 * n} components, got {x.shape[-1]}")
    return x[..., :n], x[..., n:]


def contact_jacobian(model, jv, jw):
    """Map (..., 6*nc) wrenches [f_1..f_nc, m_1..m_nc] to generalized forces.

    Returns the transposed mapping with shape (..., D, 6*nc).
    """
    cs = list(model.contact_segments)
    if not cs:
        return np.zeros(jv.shape[:-3] + (model.n_dof, 0), dtype=jv.dtype)
    f_part = np.concatenate([jv[..., s, :, :] for s in cs], axis=-1)
    m_part = np.concatenate([jw[..., s, :, :] for s in cs], axis=-1)
    return np.concatenate([f_part, m_part], axis=-1)


def torque_map(model):
    """(D, n_actuated) selection matrix placing joint torques on their DOF."""
    b = np.zeros((model.n_dof, len(model.actuated)))
    b[list(model.actuated), np.arange(len(model.actuated))] = 1.0
    return b


class Terms:
    """Mass matrix and force contributions at one (batched) state."""

    def __init__(self, model, q, qd):
        self.model = model
        ch = chain(model, q)
        jv, jw = jacobians(model, ch)
        iw = world_inertia(model, ch)
        self.chain, self.jv, self.jw, self.iw = ch, jv, jw, iw
        batch = jv.shape[:-3]
        n_seg, n_dof = model.n_segments, model.n_dof
        # (..., D, 3S) transfer matrices
        self._tv = np.swapaxes(jv, -3, -2).reshape(batch + (n_dof, 3 * n_seg))
        self._tw = np.swapaxes(jw, -3, -2).reshape(batch + (n_dof, 3 * n_seg))
        self._mass = None
        self.vel, self.bias = self.bias_for(qd)

    @property
    def mass(self):
        if self._mass is None:
            model, jw, iw = self.model, self.jw, self.iw
            batch = jw.shape[:-3]
            n_seg, n_dof = model.n_segments, model.n_dof
            tiw = np.swapaxes(jw @ iw, -3, -2).reshape(batch + (n_dof, 3 * n_seg))
            mw = np.repeat(model.masses, 3)
            self._mass = (self._tv * mw) @ np.swapaxes(self._tv, -1, -2) + tiw @ np.swapaxes(self._tw, -1, -2)
        return self._mass

    def inertial_force(self, qdd):
        """``M qdd`` without forming ``M``."""
        qdd = np.asarray(qdd)
        a_lin = np.einsum("...sjk,...j->...sk", self.jv, qdd) * self.model.masses[:, None]
        a_ang = (self.iw @ np.einsum("...sjk,...j->...sk", self.jw, qdd)[..., None])[..., 0]
        shape = a_lin.shape[:-2] + (3 * self.model.n_segments, 1)
        return (self._tv @ a_lin.reshape(shape))[..., 0] + (self._tw @ a_ang.reshape(shape))[..., 0]

    def bias_for(self, qd):
        """Gravity plus velocity-product generalized force at this configuration.

        ``qd`` may carry extra leading axes that broadcast against the batch.
        """
        model, iw = self.model, self.iw
        vel = chain_velocity(model, self.chain, qd)
        f_seg = model.masses[:, None] * (model.gravity - vel.acc_bias)
        iw_omega = (iw @ vel.omega[..., None])[..., 0]
        n_seg_t = -(iw @ vel.alpha_bias[..., None])[..., 0] - cross(vel.omega, iw_omega)
        shape = f_seg.shape[:-2] + (3 * model.n_segments, 1)
        bias = (self._tv @ f_seg.reshape(shape))[..., 0] + (self._tw @ n_seg_t.reshape(shape))[..., 0]
        return vel, bias

    def external(self, f_c, tau):
        out = np.zeros_like(self.bias)
        if tau is not None and len(self.model.actuated):
            out = out + np.asarray(tau) @ torque_map(self.model).T
        if f_c is not None and self.model.n_contacts:
            jc = contact_jacobian(self.model, self.jv, self.jw)
            out = out + (jc @ np.asarray(f_c)[..., None])[..., 0]
        return out


def _cholesky(mass):
    try:
        return np.linalg.cholesky(mass)
    except np.linalg.LinAlgError as exc:
        raise SingularConfigurationError("generalized inertia matrix is not positive definite") from exc


def cho_solve(chol, rhs):
    y = np.linalg.solve(chol, rhs[..., None])
    return np.linalg.solve(np.swapaxes(chol, -1, -2), y)[..., 0]


def mass_matrix(model, q):
    """Generalized inertia matrix, shape (..., D, D).

    Raises
    ------
    SingularConfigurationError
        If the matrix cannot be Cholesky factorized.
    """
    q = check_coordinates(model, np.asarray(q, dtype=float))
    mass = Terms(model, q, np.zeros_like(q)).mass
    _cholesky(mass)
    return mass


def generalized_force(model, x, f_c=None, tau=None):
    """Right-hand side of ``M qdd = F`` for state ``x`` and inputs."""
    x = np.asarray(x, dtype=float)
    q, qd = _split_state(model, x)
    check_coordinates(model, q)
    if not np.all(np.isfinite(qd)):
        raise NumericInputError("velocities contain NaN or inf")
    t = Terms(model, q, qd)
    return t.bias + t.external(f_c, tau)


def accelerations(model, x, f_c=None, tau=None):
    """Undamped generalized accelerations ``M^-1 F`` (Cholesky solve)."""
    q, qd = _split_state(model, np.asarray(x, dtype=float))
    t = Terms(model, q, qd)
    rhs = t.bias + t.external(f_c, tau)
    return cho_solve(_cholesky(t.mass), rhs)


def damping_vector(xdot_undamped, m_xdot, cfg):
    """Component-wise damping factors in (0, 1].

    ``d_j = exp(-max((|xdot_j| - m_j - k sigma_j) / (k sigma_j), 0))``
    """
    if not cfg.enabled:
        return np.ones_like(np.asarray(xdot_undamped, dtype=float))
    m_xdot = np.asarray(m_xdot, dtype=float)
    if np.any(m_xdot < 0):
        raise NumericInputError("m_xdot must be non-negative")
    width = cfg.band_width()
    arg = (np.abs(xdot_undamped) - m_xdot - width) / width
    return np.exp(-np.maximum(arg, 0.0))


def damping_slope(xdot_undamped, d, m_xdot, cfg):
    """Derivative of ``d`` with respect to the undamped component."""
    if not cfg.enabled:
        return np.zeros_like(d)
    width = cfg.band_width()
    active = (np.abs(xdot_undamped) - m_xdot - width) > 0
    return np.where(active, -d * np.sign(xdot_undamped) / width, 0.0)


def state_derivative(model, x, f_c, tau, m_xdot, cfg):
    """Damped state derivative.

    Returns
    -------
    xdot : ndarray, shape (..., 2D)
    d : ndarray, shape (..., 2D)
        Damping factors applied to the undamped derivative.
    """
    x = np.asarray(x, dtype=float)
    _, qd = _split_state(model, x)
    raw = np.concatenate([qd, accelerations(model, x, f_c, tau)], axis=-1)
    d = damping_vector(raw, m_xdot, cfg)
    return raw * d, d


def inverse_dynamics(model, x, qdd, f_c=None, tau=None):
    """Residual generalized force ``M(q) qdd - F(q, qd, f_c, tau)``.

    Zero exactly when ``qdd`` are the forward-dynamics accelerations.
    """
    q, qd = _split_state(model, np.asarray(x))
    t = Terms(model, q, qd)
    return t.inertial_force(qdd) - t.bias - t.external(f_c, tau)


def linearize(model, x, f_c, tau, step=1e-30):
    """Undamped derivative and its Jacobians with respect to state and inputs.

    With ``R(x, qdd) = M(q) qdd - F(x)`` vanishing along the dynamics, the
    state Jacobian of the accelerations is ``-M^-1 dR/dx`` at fixed ``qdd``.
    ``dR/dx`` is taken by complex-step differentiation (exact to rounding)
    in all 2D directions at once; the input Jacobians are closed form
    because the accelerations are affine in wrenches and torques.

    Returns
    -------
    f : (..., 2D)
    df_dx : (..., 2D, 2D)
    df_dfc : (..., 2D, 6*nc)
    df_dtau : (..., 2D, n_actuated)
    """
    x = np.asarray(x, dtype=float)
    n = model.n_dof
    batch = x.shape[:-1]
    q, qd = x[..., :n], x[..., n:]
    t = Terms(model, q, qd)
    chol = _cholesky(t.mass)
    qdd = cho_solve(chol, t.bias + t.external(f_c, tau))

    xc = x[..., None, :] + 1j * step * np.eye(2 * n)
    fc_c = None if f_c is None else np.asarray(f_c)[..., None, :]
    tau_c = None if tau is None else np.asarray(tau)[..., None, :]
    tc = Terms(model, xc[..., :n], xc[..., n:])
    res = tc.inertial_force(qdd[..., None, :]) - tc.bias - tc.external(fc_c, tau_c)
    dres_dx = np.swapaxes(res.imag / step, -1, -2)  # (..., D, 2D)

    df_dx = np.zeros(batch + (2 * n, 2 * n))
    df_dx[..., :n, n:] = np.eye(n)
    df_dx[..., n:, :] = -cho_solve_matrix(chol, dres_dx)

    jc = contact_jacobian(model, t.jv, t.jw)
    df_dfc = np.zeros(batch + (2 * n, jc.shape[-1]))
    if jc.shape[-1]:
        df_dfc[..., n:, :] = cho_solve_matrix(chol, jc)
    b = np.broadcast_to(torque_map(model), batch + (n, len(model.actuated)))
    df_dtau = np.zeros(batch + (2 * n, len(model.actuated)))
    if len(model.actuated):
        df_dtau[..., n:, :] = cho_solve_matrix(chol, b)
    f = np.concatenate([qd, qdd], axis=-1)
    return f, df_dx, df_dfc, df_dtau


def cho_solve_matrix(chol, rhs):
    y = np.linalg.solve(chol, rhs)
    return np.linalg.solve(np.swapaxes(chol, -1, -2), y)
