"""Inverse-dynamics layer: bottom-up Newton-Euler propagation to a residual.

Starting at the contact segments (feet), where the ground wrench acts at
the center of mass, each segment's free-body balance gives the load at its
proximal joint::

    F_p = m (a - g) - F_d
    M_p = I alpha - M_d - sum_j r_j x F_j      (j = proximal, distal)

with all vectors in world coordinates and moments about the segment center
of mass.  The gyroscopic term ``w x I w`` is left out by default, matching
the balance above; ``gyroscopic=True`` adds it.  At the root (upper body)
nothing is left to absorb the load, so what remains is the residual wrench.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .body import chain, chain_velocity, cross, jacobians, world_inertia
from .errors import InvalidParameterError
from .trajectory import eval_polynomial, frame_times, vander


class SegmentKinematics(NamedTuple):
    com: np.ndarray  # (..., S, 3)
    origin: np.ndarray  # (..., S, 3)
    acc: np.ndarray  # (..., S, 3) COM linear acceleration
    alpha: np.ndarray  # (..., S, 3) angular acceleration
    omega: np.ndarray  # (..., S, 3)
    inertia: np.ndarray  # (..., S, 3, 3) world frame


class Residual(NamedTuple):
    force: np.ndarray  # (..., 3) N
    moment: np.ndarray  # (..., 3) Nm


def kinematics_from_state(model, q, qd, qdd):
    """Segment accelerations for given generalized coordinates and derivatives."""
    q, qd, qdd = (np.asarray(a, dtype=float) for a in (q, qd, qdd))
    ch = chain(model, q)
    jv, jw = jacobians(model, ch)
    vel = chain_velocity(model, ch, qd)
    acc = np.einsum("...sjk,...j->...sk", jv, qdd) + vel.acc_bias
    alpha = np.einsum("...sjk,...j->...sk", jw, qdd) + vel.alpha_bias
    return SegmentKinematics(ch.com, ch.origin, acc, alpha, vel.omega, world_inertia(model, ch))


def segment_kinematics(model, gamma_q, s):
    """Segment kinematics from a motion polynomial at normalized time(s) ``s``.

    Velocities and accelerations come from the analytic polynomial
    derivatives, scaled to physical time.
    """
    q = eval_polynomial(gamma_q, s, 0)
    qd = eval_polynomial(gamma_q, s, 1)
    qdd = eval_polynomial(gamma_q, s, 2)
    return kinematics_from_state(model, q, qd, qdd)


def propagate(model, kin, f_c, gyroscopic=False):
    """Propagate ground wrenches up the kinematic tree.

    Parameters
    ----------
    kin : SegmentKinematics
    f_c : array_like, shape (..., 6*nc)
        ``[f_1..f_nc, m_1..m_nc]`` applied at the contact segments' COM.

    Returns
    -------
    Residual
        Force and moment left at the root segment's center of mass.
    """
    f_c = np.asarray(f_c, dtype=float)
    nc = model.n_contacts
    if f_c.shape[-1] != 6 * nc:
        raise InvalidParameterError(f"expected {6 * nc} wrench components, got {f_c.shape[-1]}")
    shape = np.broadcast_shapes(f_c.shape[:-1], kin.com.shape[:-2])
    zero = np.zeros(shape + (3,))
    dist_f = [zero.copy() for _ in model.segments]
    dist_m = [zero.copy() for _ in model.segments]
    dist_rf = [zero.copy() for _ in model.segments]  # sum of r_d x F_d
    for i, s in enumerate(model.contact_segments):
        dist_f[s] = dist_f[s] + f_c[..., 3 * i:3 * i + 3]
        dist_m[s] = dist_m[s] + f_c[..., 3 * (nc + i):3 * (nc + i) + 3]
    g = model.gravity
    for s in reversed(range(model.n_segments)):
        seg = model.segments[s]
        com = kin.com[..., s, :]
        i_alpha = (kin.inertia[..., s, :, :] @ kin.alpha[..., s, :, None])[..., 0]
        if gyroscopic:
            w = kin.omega[..., s, :]
            i_alpha = i_alpha + cross(w, (kin.inertia[..., s, :, :] @ w[..., None])[..., 0])
        f_p = seg.mass * (kin.acc[..., s, :] - g) - dist_f[s]
        if seg.parent < 0:
            return Residual(f_p, i_alpha - dist_m[s] - dist_rf[s])
        r_p = kin.origin[..., s, :] - com
        m_p = i_alpha - dist_m[s] - cross(r_p, f_p) - dist_rf[s]
        # reaction on the parent, applied at this segment's proximal joint
        par = seg.parent
        r_on_parent = kin.origin[..., s, :] - kin.com[..., par, :]
        dist_f[par] = dist_f[par] - f_p
        dist_m[par] = dist_m[par] - m_p
        dist_rf[par] = dist_rf[par] + cross(r_on_parent, -f_p)
    raise InvalidParameterError("model has no root segment")


def inverse_loss(res):
    """``|F_res|^2 + |M_res|^2`` per frame."""
    return np.sum(res.force**2, axis=-1) + np.sum(res.moment**2, axis=-1)


def residual_jacobian(model, kin, gyroscopic=False):
    """Residual at zero wrench and its (affine) Jacobian.

    Returns
    -------
    r0 : ndarray, shape (..., 6)
        ``[F_res, M_res]`` for ``f_c = 0``.
    jac : ndarray, shape (..., 6, 6*nc)
        Exact derivative of the residual with respect to the wrench.
    """
    n_fc = 6 * model.n_contacts
    probe = np.concatenate([np.zeros((1, n_fc)), np.eye(n_fc)])
    ex = SegmentKinematics(*(np.expand_dims(a, -3) for a in kin[:5]), np.expand_dims(kin.inertia, -4))
    res = propagate(model, ex, probe, gyroscopic=gyroscopic)
    stacked = np.concatenate([res.force, res.moment], axis=-1)  # (..., 1+n_fc, 6)
    r0 = stacked[..., 0, :]
    jac = np.swapaxes(stacked[..., 1:, :] - r0[..., None, :], -1, -2)
    return r0, jac


class InverseResult(NamedTuple):
    loss: float
    residuals: np.ndarray  # (T, 6)
    jacobians: np.ndarray  # (T, 6, 6nc)
    basis: np.ndarray  # (T, order+1)


def window_inverse(model, gamma_q, gamma_f, n_frames, gyroscopic=False):
    """Mean inverse loss over the frames of one window.

    ``gamma_f`` is a (6nc, 4) coefficient array evaluated at the same
    normalized frame times as the motion polynomial.
    """
    s = frame_times(n_frames)
    kin = segment_kinematics(model, gamma_q, s)
    r0, jac = residual_jacobian(model, kin, gyroscopic)
    gamma_f = np.asarray(gamma_f, dtype=float)
    basis = vander(s, gamma_f.shape[1] - 1)
    fc = basis @ gamma_f.T
    res = r0 + np.einsum("tij,tj->ti", jac, fc)
    loss = float(np.mean(np.sum(res**2, axis=-1)))
    return InverseResult(loss, res, jac, basis)


def backprop_inverse(residuals, jacobians, basis):
    """Gradient of the mean inverse loss with respect to the force coefficients.

    Frames are independent: each contributes ``2/T * r_t^T dr_t/dF_c`` and is
    chained to the coefficients through the polynomial basis row of that frame.

    Returns
    -------
    ndarray, shape (6nc, order+1)
    """
    residuals, jacobians, basis = (np.asarray(a, dtype=float) for a in (residuals, jacobians, basis))
    t = residuals.shape[0]
    if jacobians.shape[0] != t or basis.shape[0] != t:
        raise InvalidParameterError("residuals, Jacobians and basis must cover the same frames")
    dl_dfc = 2.0 / t * np.einsum("ti,tij->tj", residuals, jacobians)
    return dl_dfc.T @ basis
