"""Articulated leg-plus-torso model: geometry, inertia and batched kinematics.

The model is a tree of rigid segments.  Every segment is attached to its
parent by a joint made of elementary degrees of freedom (``tx``/``ty``/``tz``
translations along, ``rx``/``ry``/``rz`` rotations about the axes of the
current frame).  The default human model has a torso root with six global
DOF (translation followed by ZYX Euler angles) and three rotational DOF
(``ry``, ``rx``, ``rz``: flexion, adduction, axial rotation) at each hip,
knee and ankle, i.e. 24 generalized coordinates.

World frame: x forward, y left, z up.  In the zero pose the body stands
upright, legs hang along -z and feet point along +x.

All kinematic routines accept arbitrary leading batch dimensions and work
with complex input (used for complex-step differentiation).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InvalidParameterError, NumericInputError

SEGMENT_NAMES = ("torso", "thigh_l", "shank_l", "foot_l", "thigh_r", "shank_r", "foot_r")
ROOT_DOFS = ("tx", "ty", "tz", "rz", "ry", "rx")
JOINT_DOFS = ("ry", "rx", "rz")
GRAVITY = np.array([0.0, 0.0, -9.81])

_AXIS = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Segment:
    """One rigid segment.

    ``inertia`` is taken about the center of mass and expressed in the
    segment frame, whose origin is the proximal joint.  ``axis`` points from
    the proximal joint to the distal end.
    """

    name: str
    length: float
    mass: float
    inertia: np.ndarray
    com_offset: np.ndarray
    shape: str
    parent: int = -1
    joint_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dofs: tuple = ()
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))

    @property
    def distal_offset(self):
        return self.length * np.asarray(self.axis, dtype=float)


class SegmentPose(NamedTuple):
    rotation: np.ndarray
    origin: np.ndarray
    com_world: np.ndarray
    distal: np.ndarray


class Chain(NamedTuple):
    """Batched kinematic quantities of one configuration.

    Shapes use ``S`` segments and ``D`` degrees of freedom.
    """

    rotation: np.ndarray  # (..., S, 3, 3)
    origin: np.ndarray  # (..., S, 3)
    com: np.ndarray  # (..., S, 3)
    rev_axis: np.ndarray  # (..., D, 3), zero rows for translations
    lin_axis: np.ndarray  # (..., D, 3), zero rows for rotations
    dof_origin: np.ndarray  # (..., D, 3)


class BodyModel:
    """Immutable tree of segments plus gravity.

    Parameters
    ----------
    segments : sequence of Segment
        Topologically ordered (every parent precedes its children).
    gravity : array_like, shape (3,)
    actuated : sequence of int, optional
        Generalized coordinates driven by joint torques.  Defaults to every
        DOF that does not belong to a root segment.
    contact_segments : sequence of int, optional
        Segments receiving external wrenches, in GRF/M order.
    """

    def __init__(self, segments, gravity=GRAVITY, actuated=None, contact_segments=()):
        self.segments = tuple(segments)
        self.gravity = np.array(gravity, dtype=float)
        self.gravity.setflags(write=False)
        _validate_segments(self.segments)

        dof_segment, dof_name = [], []
        for s, seg in enumerate(self.segments):
            for d in seg.dofs:
                dof_segment.append(s)
                dof_name.append(d)
        self.dof_segment = np.array(dof_segment, dtype=int)
        self.dof_names = tuple(dof_name)
        n_seg, n_dof = len(self.segments), len(dof_name)

        anc = [[s] for s in range(n_seg)]
        for s, seg in enumerate(self.segments):
            if seg.parent >= 0:
                anc[s] = anc[seg.parent] + [s]
        # seg_mask[s, j]: DOF j moves segment s
        self.seg_mask = np.zeros((n_seg, n_dof))
        for s in range(n_seg):
            self.seg_mask[s, np.isin(self.dof_segment, anc[s])] = 1.0
        # dof_mask[i, j]: DOF j precedes (or is) DOF i along the chain
        self.dof_mask = np.zeros((n_dof, n_dof))
        for i in range(n_dof):
            for j in range(n_dof):
                si, sj = self.dof_segment[i], self.dof_segment[j]
                if (sj in anc[si] and sj != si) or (sj == si and j <= i):
                    self.dof_mask[i, j] = 1.0

        if actuated is None:
            actuated = [j for j in range(n_dof) if self.segments[self.dof_segment[j]].parent >= 0]
        self.actuated = tuple(int(a) for a in actuated)
        self.contact_segments = tuple(int(c) for c in contact_segments)

        self.masses = np.array([seg.mass for seg in self.segments])
        self.inertias = np.stack([np.asarray(seg.inertia, dtype=float) for seg in self.segments])
        self.com_offsets = np.stack([np.asarray(seg.com_offset, dtype=float) for seg in self.segments])
        for arr in (self.seg_mask, self.dof_mask, self.masses, self.inertias, self.com_offsets):
            arr.setflags(write=False)

    @property
    def n_dof(self):
        return len(self.dof_names)

    @property
    def n_segments(self):
        return len(self.segments)

    @property
    def n_contacts(self):
        return len(self.contact_segments)

    @property
    def total_mass(self):
        return float(self.masses.sum())

    @property
    def l_sub(self):
        return np.array([seg.length for seg in self.segments])

    def segment_index(self, name):
        for i, seg in enumerate(self.segments):
            if seg.name == name:
                return i
        raise KeyError(name)

    def __repr__(self):
        return (f"BodyModel({self.n_segments} segments, {self.n_dof} dof, "
                f"mass={self.total_mass:.2f} kg)")


def _validate_segments(segments):
    if not segments:
        raise InvalidParameterError("model needs at least one segment")
    for i, seg in enumerate(segments):
        if not seg.parent < i:
            raise InvalidParameterError(f"segment {seg.name!r}: parent must precede child")
        if not seg.length > 0:
            raise InvalidParameterError(f"segment {seg.name!r}: length must be positive")
        if not seg.mass > 0:
            raise InvalidParameterError(f"segment {seg.name!r}: mass must be positive")
        inertia = np.asarray(seg.inertia, dtype=float)
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T, atol=1e-12):
            raise InvalidParameterError(f"segment {seg.name!r}: inertia must be symmetric 3x3")
        ev = np.linalg.eigvalsh(inertia)
        if ev.min() <= 0:
            raise InvalidParameterError(f"segment {seg.name!r}: inertia not positive definite")
        # principal moments of a physical body satisfy the triangle inequality
        if ev[0] + ev[1] < ev[2] * (1 - 1e-12):
            raise InvalidParameterError(f"segment {seg.name!r}: principal moments violate triangle inequality")
        for d in seg.dofs:
            if len(d) != 2 or d[0] not in "tr" or d[1] not in _AXIS:
                raise InvalidParameterError(f"segment {seg.name!r}: unknown dof {d!r}")


# --------------------------------------------------------------------------
# shapes and anthropometry

def cylinder_inertia(mass, length, radius, axis=2):
    """Inertia of a solid cylinder about its center, symmetry axis ``axis``."""
    transverse = mass * (3 * radius**2 + length**2) / 12.0
    diag = np.full(3, transverse)
    diag[axis] = 0.5 * mass * radius**2
    return np.diag(diag)


def cuboid_inertia(mass, dims):
    """Inertia of a solid box with edge lengths ``dims`` along x, y, z."""
    a, b, c = dims
    return np.diag([mass * (b**2 + c**2), mass * (a**2 + c**2), mass * (a**2 + b**2)]) / 12.0


def load_anthropometry(path=None):
    """Read an anthropometry config; the packaged default when ``path`` is None."""
    if path is None:
        text = resources.files("locodyn").joinpath("data/anthropometry.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"anthropometry config is not valid JSON: {exc}") from exc
    for key in ("mass_fractions", "com_fractions", "shapes", "hip_half_width"):
        if key not in cfg:
            raise ConfigError(f"anthropometry config lacks {key!r}")
    return cfg


def _kind(name):
    return name.split("_")[0]


def _mass_fractions(anthro):
    mf = anthro["mass_fractions"]
    fr = np.array([float(mf[_kind(n)]) for n in SEGMENT_NAMES])
    if abs(fr.sum() - 1.0) > 1e-6:
        raise ConfigError(f"mass fractions sum to {fr.sum():.8f}, expected 1")
    if np.any(fr <= 0):
        raise ConfigError("mass fractions must be positive")
    return fr


def l_sub_from_height(height, anthropometry=None):
    """Segment lengths (SEGMENT_NAMES order) from body height in meters."""
    anthro = anthropometry or load_anthropometry()
    hf = anthro["height_fractions"]
    return np.array([hf[_kind(n)] * height for n in SEGMENT_NAMES])


def build_body_model(l_sub, anthropometry=None, total_body_mass=70.0, gravity=GRAVITY):
    """Build the 7-segment, 24-DOF human model.

    Parameters
    ----------
    l_sub : array_like, shape (7,)
        Segment lengths in meters, ordered as ``SEGMENT_NAMES``.
    anthropometry : dict, optional
        Parsed anthropometry config (see ``load_anthropometry``).
    total_body_mass : float
        Subject mass in kg, distributed by the configured mass fractions.

    Returns
    -------
    BodyModel
    """
    l_sub = np.asarray(l_sub, dtype=float)
    if l_sub.shape != (7,):
        raise InvalidParameterError(f"l_sub must have 7 entries, got shape {l_sub.shape}")
    if not np.all(np.isfinite(l_sub)) or np.any(l_sub <= 0):
        raise InvalidParameterError("segment lengths must be positive")
    if not total_body_mass > 0:
        raise InvalidParameterError("total body mass must be positive")
    anthro = anthropometry or load_anthropometry()
    masses = _mass_fractions(anthro) * total_body_mass
    shapes, com_fr = anthro["shapes"], anthro["com_fractions"]

    down, up, fwd = np.array([0.0, 0, -1]), np.array([0.0, 0, 1]), np.array([1.0, 0, 0])
    axes = {"torso": up, "thigh": down, "shank": down, "foot": fwd}
    segments = []
    hip = float(anthro["hip_half_width"]) * l_sub[0]
    for i, name in enumerate(SEGMENT_NAMES):
        kind, length, mass = _kind(name), l_sub[i], masses[i]
        axis = axes[kind]
        ax_idx = int(np.argmax(np.abs(axis)))
        sh = shapes[kind]
        if sh["shape"] == "cylinder":
            inertia = cylinder_inertia(mass, length, sh["radius"] * length, axis=ax_idx)
        elif sh["shape"] == "cuboid":
            dims = np.empty(3)
            dims[ax_idx] = length
            # width is lateral (y); depth fills the remaining axis
            others = [k for k in range(3) if k != ax_idx]
            if 1 in others:
                dims[1] = sh["width"] * length
                rest = [k for k in others if k != 1][0]
                dims[rest] = sh["depth"] * length
            else:
                dims[others[0]], dims[others[1]] = sh["depth"] * length, sh["width"] * length
            inertia = cuboid_inertia(mass, dims)
        else:
            raise ConfigError(f"unknown shape {sh['shape']!r} for {kind}")
        if name == "torso":
            parent, offset, dofs = -1, np.zeros(3), ROOT_DOFS
        elif kind == "thigh":
            side = 1.0 if name.endswith("_l") else -1.0
            parent, offset, dofs = 0, np.array([0.0, side * hip, 0.0]), JOINT_DOFS
        else:
            parent = i - 1
            offset, dofs = segments[parent].distal_offset, JOINT_DOFS
        segments.append(Segment(
            name=name, length=float(length), mass=float(mass), inertia=inertia,
            com_offset=com_fr[kind] * length * axis, shape=sh["shape"], parent=parent,
            joint_offset=offset, dofs=dofs, axis=axis,
        ))
    return BodyModel(segments, gravity=gravity, contact_segments=(3, 6))


def pendulum_model(lengths, masses, radius=0.02, gravity=GRAVITY, free_root=False):
    """Planar serial chain of cylinders hinged about y, hanging along -z.

    Used as a reduced model for validation (single and double pendulum).
    ``free_root`` replaces the first hinge by six free-floating DOF.
    """
    segments = []
    for i, (length, mass) in enumerate(zip(lengths, masses)):
        offset = np.zeros(3) if i == 0 else segments[-1].distal_offset
        dofs = ROOT_DOFS if (i == 0 and free_root) else ("ry",)
        segments.append(Segment(
            name=f"link{i}", length=float(length), mass=float(mass),
            inertia=cylinder_inertia(mass, length, radius), com_offset=np.array([0, 0, -0.5 * length]),
            shape="cylinder", parent=i - 1, joint_offset=offset, dofs=dofs,
        ))
    actuated = None if free_root else range(len(segments))
    return BodyModel(segments, gravity=gravity, actuated=actuated)


def free_body_model(mass, inertia, gravity=GRAVITY):
    """A single free-floating rigid body with six DOF."""
    seg = Segment(name="body", length=1.0, mass=float(mass), inertia=np.asarray(inertia, dtype=float),
                  com_offset=np.zeros(3), shape="cuboid", dofs=ROOT_DOFS)
    return BodyModel([seg], gravity=gravity, actuated=(), contact_segments=(0,))


# --------------------------------------------------------------------------
# kinematics

_PLANE = ((1, 2), (2, 0), (0, 1))


def _rot(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(np.shape(angle) + (3, 3), dtype=c.dtype)
    i, j = _PLANE[axis]
    out[..., axis, axis] = 1.0
    out[..., i, i] = c
    out[..., j, j] = c
    out[..., i, j] = -s
    out[..., j, i] = s
    return out


def check_coordinates(model, q):
    q = np.asarray(q)
    if q.shape[-1] != model.n_dof:
        raise NumericInputError(f"expected {model.n_dof} coordinates, got {q.shape[-1]}")
    if not np.all(np.isfinite(q)):
        raise NumericInputError("coordinates contain NaN or inf")
    return q


def chain(model, q):
    """Batched forward kinematics including per-DOF axes and origins."""
    q = np.asarray(q)
    batch = q.shape[:-1]
    dtype = np.result_type(q.dtype, float)
    n_seg, n_dof = model.n_segments, model.n_dof
    rot = np.empty(batch + (n_seg, 3, 3), dtype=dtype)
    origin = np.empty(batch + (n_seg, 3), dtype=dtype)
    rev = np.zeros(batch + (n_dof, 3), dtype=dtype)
    lin = np.zeros(batch + (n_dof, 3), dtype=dtype)
    dof_origin = np.empty(batch + (n_dof, 3), dtype=dtype)
    eye = np.broadcast_to(np.eye(3), batch + (3, 3))
    j = 0
    for s, seg in enumerate(model.segments):
        if seg.parent < 0:
            r_cur = eye.astype(dtype)
            o_cur = np.broadcast_to(np.asarray(seg.joint_offset, dtype=float), batch + (3,)).astype(dtype)
        else:
            r_cur = rot[..., seg.parent, :, :]
            o_cur = origin[..., seg.parent, :] + r_cur @ seg.joint_offset
        for d in seg.dofs:
            k = _AXIS[d[1]]
            ax = r_cur[..., :, k]
            if d[0] == "t":
                lin[..., j, :] = ax
                o_cur = o_cur + ax * q[..., j, None]
                dof_origin[..., j, :] = o_cur
            else:
                rev[..., j, :] = ax
                dof_origin[..., j, :] = o_cur
                r_cur = r_cur @ _rot(k, q[..., j])
            j += 1
        rot[..., s, :, :] = r_cur
        origin[..., s, :] = o_cur
    com = origin + np.einsum("...sij,sj->...si", rot, model.com_offsets)
    return Chain(rot, origin, com, rev, lin, dof_origin)


def forward_kinematics(model, q):
    """Pose of every segment for one configuration.

    Returns
    -------
    list of SegmentPose
    """
    q = check_coordinates(model, np.asarray(q, dtype=float))
    if q.ndim != 1:
        raise NumericInputError("forward_kinematics expects a single configuration")
    ch = chain(model, q)
    poses = []
    for s, seg in enumerate(model.segments):
        distal = ch.origin[s] + ch.rotation[s] @ seg.distal_offset
        poses.append(SegmentPose(ch.rotation[s], ch.origin[s], ch.com[s], distal))
    return poses


def cross(a, b):
    """Cross product over the last axis (faster than ``np.cross`` for small batches)."""
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape, dtype=np.result_type(a, b))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def jacobians(model, ch):
    """Linear (COM) and angular Jacobians, each shaped (..., S, D, 3)."""
    diff = ch.com[..., :, None, :] - ch.dof_origin[..., None, :, :]
    jv = cross(ch.rev_axis[..., None, :, :], diff) + ch.lin_axis[..., None, :, :]
    mask = model.seg_mask[:, :, None]
    jv = jv * mask
    jw = ch.rev_axis[..., None, :, :] * mask
    return jv, jw


def world_inertia(model, ch):
    return ch.rotation @ model.inertias @ np.swapaxes(ch.rotation, -1, -2)


class ChainVelocity(NamedTuple):
    omega: np.ndarray  # (..., S, 3) segment angular velocity
    v_com: np.ndarray  # (..., S, 3)
    acc_bias: np.ndarray  # (..., S, 3) COM acceleration at zero qdd
    alpha_bias: np.ndarray  # (..., S, 3) angular acceleration at zero qdd


def chain_velocity(model, ch, qd):
    """Velocities and velocity-product accelerations (zero generalized acceleration).

    Uses ``v(P) = w x P - sum z_j x o_j qd_j + sum p_j qd_j`` so no pairwise
    DOF arrays are formed.
    """
    qd_ = qd[..., None]
    zq = ch.rev_axis * qd_
    pq = ch.lin_axis * qd_
    zoq = cross(ch.rev_axis, ch.dof_origin) * qd_
    # angular velocity of the frame carrying each DOF axis, including that DOF
    w_dof = model.dof_mask @ zq
    zdot = cross(w_dof, ch.rev_axis)
    v_org = cross(w_dof, ch.dof_origin) - model.dof_mask @ zoq + model.dof_mask @ pq
    omega = model.seg_mask @ zq
    v_com = cross(omega, ch.com) - model.seg_mask @ zoq + model.seg_mask @ pq
    zdq = zdot * qd_
    alpha_bias = model.seg_mask @ zdq
    acc_bias = (cross(alpha_bias, ch.com) - model.seg_mask @ cross(zdot, ch.dof_origin * qd_)
                + cross(omega, v_com) - model.seg_mask @ cross(ch.rev_axis, v_org * qd_))
    return ChainVelocity(omega, v_com, acc_bias, alpha_bias)


def mechanical_energy(model, x):
    """Kinetic plus gravitational potential energy of state ``x = [q, qd]``."""
    x = np.asarray(x, dtype=float)
    n = model.n_dof
    q, qd = x[..., :n], x[..., n:]
    ch = chain(model, q)
    vel = chain_velocity(model, ch, qd)
    v, w = vel.v_com, vel.omega
    iw = world_inertia(model, ch)
    kin = 0.5 * (np.einsum("s,...sk,...sk->...", model.masses, v, v)
                 + np.einsum("...sk,...skl,...sl->...", w, iw, w))
    pot = -np.einsum("s,...sk,k->...", model.masses, ch.com, model.gravity)
    return kin + pot
