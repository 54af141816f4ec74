"""Window samples, subsets, file IO, GRF/M assembly, mirroring and noise.

A dataset is a list of overlapping window samples plus the full-length
sequences they were cut from (needed to score merged GRF/M curves).
Subset membership follows from which labels a window carries:

* motion-set: every window,
* contact-set: windows with per-frame contact flags,
* ground-reaction-set: windows with force coefficients,
* torque-set: windows with force and torque coefficients.

File format (JSON lines): a header object followed by one record per line,
``{"kind": "sequence", ...}`` or ``{"kind": "window", ...}``.  Arrays are
nested lists; Python's shortest-repr floats make the round trip exact.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .body import build_body_model, forward_kinematics
from .errors import DatasetError, InvalidParameterError
from .trajectory import PolyCoeffs, WindowSpec, eval_polynomial, fit_polynomial, frame_times, slice_windows

FORMAT = "locodyn-dataset"
SCHEMA_VERSION = 1
N_Q = 24
N_FC = 12
N_TAU = 18
UNITS = {
    "q": "m (0:3), rad (3:24)",
    "f_c": "N (0:6), Nm (6:12)",
    "tau": "Nm",
    "l_sub": "m",
    "total_mass": "kg",
    "dt": "s",
}
NOISE_PRESETS_DEG = (0.3, 0.6, 1.1, 2.3)

SUBSETS = ("motion", "contact", "ground_reaction", "torque")

# sign flips under reflection y -> -y, applied after swapping left/right
_ROOT_SIGN = np.array([1, -1, 1, -1, 1, -1], dtype=float)  # tx ty tz yaw pitch roll
_JOINT_SIGN = np.tile([1.0, -1.0, -1.0], 3)  # (flexion, adduction, rotation) x hip/knee/ankle
Q_SIGN = np.concatenate([_ROOT_SIGN, _JOINT_SIGN, _JOINT_SIGN])
Q_PERM = np.concatenate([np.arange(6), np.arange(15, 24), np.arange(6, 15)])
# forces are vectors, moments pseudo-vectors
FC_SIGN = np.array([1, -1, 1, 1, -1, 1, -1, 1, -1, -1, 1, -1], dtype=float)
FC_PERM = np.array([3, 4, 5, 0, 1, 2, 9, 10, 11, 6, 7, 8])
TAU_SIGN = np.concatenate([_JOINT_SIGN, _JOINT_SIGN])
TAU_PERM = np.concatenate([np.arange(9, 18), np.arange(0, 9)])
L_PERM = np.array([0, 4, 5, 6, 1, 2, 3])


@dataclass
class WindowSample:
    """One training window.

    ``gamma_q`` (24 x 4), ``gamma_f`` (12 x 4) and ``gamma_tau`` (18 x 2) are
    ascending-power coefficients over normalized window time.  ``contact``
    holds per-frame ``(c_l, c_r)`` flags.
    """

    gamma_q: np.ndarray
    l_sub: np.ndarray
    total_mass: float
    dt: float
    n: int
    x0: np.ndarray
    m_xdot: np.ndarray
    gamma_f: np.ndarray | None = None
    gamma_tau: np.ndarray | None = None
    contact: np.ndarray | None = None
    subject: str = ""
    sequence: str = ""
    start: int = 0
    style: str = ""

    @property
    def length(self):
        return self.n + 1

    @property
    def duration(self):
        return self.n * self.dt

    @property
    def motion(self):
        return PolyCoeffs(self.gamma_q, self.duration)

    @property
    def subsets(self):
        out = {"motion"}
        if self.contact is not None:
            out.add("contact")
        if self.gamma_f is not None:
            out.add("ground_reaction")
            if self.gamma_tau is not None:
                out.add("torque")
        return out

    def in_subset(self, name):
        return name in self.subsets

    def states(self, frames=None):
        """States ``[q, qd]`` evaluated from the motion polynomial at frames."""
        s = frame_times(self.length)
        if frames is not None:
            s = s[frames]
        c = self.motion
        return np.concatenate([eval_polynomial(c, s, 0), eval_polynomial(c, s, 1)], axis=-1)

    def x_true(self):
        """Target states for frames 1..n."""
        return self.states(slice(1, None))

    def force_frames(self):
        if self.gamma_f is None:
            return None
        return eval_polynomial(PolyCoeffs(self.gamma_f, self.duration), frame_times(self.length))


@lru_cache(maxsize=256)
def _cached_model(l_sub, total_mass):
    return build_body_model(np.array(l_sub), total_body_mass=total_mass)


def model_for(sample):
    """Body model of the subject a window (or sequence) belongs to."""
    return _cached_model(tuple(float(v) for v in sample.l_sub), float(sample.total_mass))


def window_state_stats(gamma_q, n, dt):
    """``x0`` and ``m_xdot`` of a window from its motion polynomial."""
    c = PolyCoeffs(gamma_q, n * dt)
    s = frame_times(n + 1)
    q0 = eval_polynomial(c, 0.0, 0)
    qd = eval_polynomial(c, s, 1)
    qdd = eval_polynomial(c, s, 2)
    x0 = np.concatenate([q0, qd[0]])
    m_xdot = np.concatenate([np.abs(qd).max(axis=0), np.abs(qdd).max(axis=0)])
    return x0, m_xdot


def make_window(q_frames, dt, l_sub, total_mass, fc_frames=None, gamma_tau=None, contact=None, **meta):
    """Fit polynomials to per-frame data and assemble a ``WindowSample``."""
    q_frames = np.asarray(q_frames, dtype=float)
    n = q_frames.shape[0] - 1
    duration = n * dt
    gamma_q = fit_polynomial(q_frames, 3, duration).coeffs
    x0, m_xdot = window_state_stats(gamma_q, n, dt)
    gamma_f = None if fc_frames is None else fit_polynomial(fc_frames, 3, duration).coeffs
    return WindowSample(
        gamma_q=gamma_q, l_sub=np.asarray(l_sub, dtype=float), total_mass=float(total_mass), dt=dt, n=n,
        x0=x0, m_xdot=m_xdot, gamma_f=gamma_f,
        gamma_tau=None if gamma_tau is None else np.asarray(gamma_tau, dtype=float),
        contact=None if contact is None else np.asarray(contact, dtype=bool), **meta)


def sigma_from_windows(windows):
    """Per-component spread of absolute velocities and accelerations over all frames."""
    if not windows:
        raise DatasetError("cannot estimate velocity spread from an empty window list")
    vals = []
    for w in windows:
        c, s = w.motion, frame_times(w.length)
        vals.append(np.abs(np.concatenate([eval_polynomial(c, s, 1), eval_polynomial(c, s, 2)], axis=-1)))
    return np.concatenate(vals).std(axis=0)


@dataclass
class Sequence:
    """A full-length recording (synthetic or imported)."""

    name: str
    subject: str
    style: str
    dt: float
    l_sub: np.ndarray
    total_mass: float
    q: np.ndarray  # (N, 24)
    f_c: np.ndarray | None = None  # (N, 12)
    tau: np.ndarray | None = None  # (N, 18)
    contact: np.ndarray | None = None  # (N, 2)

    @property
    def n_frames(self):
        return self.q.shape[0]


@dataclass
class Dataset:
    windows: list
    sequences: dict = field(default_factory=dict)
    spec: WindowSpec = field(default_factory=WindowSpec)
    meta: dict = field(default_factory=dict)

    def subset(self, name):
        return [w for w in self.windows if w.in_subset(name)]

    def counts(self):
        return {name: len(self.subset(name)) for name in SUBSETS}

    @property
    def subjects(self):
        return sorted({w.subject for w in self.windows})

    def by_subjects(self, subjects):
        keep = set(subjects)
        seqs = {k: v for k, v in self.sequences.items() if v.subject in keep}
        return Dataset([w for w in self.windows if w.subject in keep], seqs, self.spec, dict(self.meta))


# --------------------------------------------------------------------------
# ground reaction assembly

@dataclass
class ContactRecord:
    """Per-foot force-plate style data for one frame (index 0 left, 1 right)."""

    cop: np.ndarray  # (2, 3) m
    force: np.ndarray  # (2, 3) N
    t_z: np.ndarray  # (2, 3) Nm
    contact: np.ndarray  # (2,) bool


def assemble_grfm(model, q, rec):
    """GRF/M vector ``[f_l, f_r, m_l, m_r]`` at the foot centers of mass.

    ``m_i = d_cop_i x f_i + t_z_i`` with ``d_cop`` pointing from the foot
    center of mass to the center of pressure.
    """
    poses = forward_kinematics(model, q)
    out = np.zeros(6 * model.n_contacts)
    nc = model.n_contacts
    for i, s in enumerate(model.contact_segments):
        if not rec.contact[i]:
            if np.any(np.asarray(rec.force[i]) != 0):
                raise InvalidParameterError(f"foot {i} has force without contact")
            continue
        cop = np.asarray(rec.cop[i], dtype=float)
        if not np.all(np.isfinite(cop)):
            raise InvalidParameterError(f"foot {i} in contact with non-finite center of pressure")
        f = np.asarray(rec.force[i], dtype=float)
        d_cop = cop - poses[s].com_world
        out[3 * i:3 * i + 3] = f
        out[3 * (nc + i):3 * (nc + i) + 3] = np.cross(d_cop, f) + np.asarray(rec.t_z[i], dtype=float)
    return out


# --------------------------------------------------------------------------
# augmentation

def mirror_q(q):
    return np.asarray(q)[..., Q_PERM] * Q_SIGN


def mirror_fc(fc):
    return np.asarray(fc)[..., FC_PERM] * FC_SIGN


def mirror_tau(tau):
    return np.asarray(tau)[..., TAU_PERM] * TAU_SIGN


def mirror_augment(sample):
    """Reflect a window at the sagittal (x-z) plane; an involution.

    Left and right channels swap; lateral translations, forces, and the
    adduction/axial-rotation angles and torques change sign, as do the
    x and z components of moments (pseudo-vectors).
    """
    gq = sample.gamma_q[Q_PERM] * Q_SIGN[:, None]
    x_sign = np.concatenate([Q_SIGN, Q_SIGN])
    x_perm = np.concatenate([Q_PERM, Q_PERM + N_Q])
    return replace(
        sample,
        gamma_q=gq,
        l_sub=sample.l_sub[L_PERM],
        x0=sample.x0[x_perm] * x_sign,
        m_xdot=sample.m_xdot[x_perm],
        gamma_f=None if sample.gamma_f is None else sample.gamma_f[FC_PERM] * FC_SIGN[:, None],
        gamma_tau=None if sample.gamma_tau is None else sample.gamma_tau[TAU_PERM] * TAU_SIGN[:, None],
        contact=None if sample.contact is None else sample.contact[:, ::-1].copy(),
        sequence=sample.sequence + "~m" if not sample.sequence.endswith("~m") else sample.sequence[:-2],
    )


def mirror_sequence(seq):
    name = seq.name + "~m" if not seq.name.endswith("~m") else seq.name[:-2]
    return replace(
        seq, name=name, l_sub=seq.l_sub[L_PERM], q=mirror_q(seq.q),
        f_c=None if seq.f_c is None else mirror_fc(seq.f_c),
        tau=None if seq.tau is None else mirror_tau(seq.tau),
        contact=None if seq.contact is None else seq.contact[:, ::-1].copy())


def add_noise(sample, angle_sigma=0.0, contact_flip=(0.0, 0.0), seed=0):
    """Perturb joint angles and contact labels of one window.

    Parameters
    ----------
    angle_sigma : float
        Standard deviation in degrees of zero-mean Gaussian noise added to the
        18 joint angles at every frame before the cubic refit.
    contact_flip : (fraction, probability)
        ``fraction`` of the contact labels are selected at random and each
        selected label is switched with ``probability``.
    seed : int
        The standard-normal draws depend only on the seed, so different
        ``angle_sigma`` values scale the same noise realization.
    """
    if angle_sigma < 0:
        raise InvalidParameterError("noise level must be non-negative")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((sample.length, N_Q - 6))
    out = sample
    if angle_sigma > 0:
        q = eval_polynomial(sample.motion, frame_times(sample.length))
        q[:, 6:] += np.deg2rad(angle_sigma) * z
        gamma_q = fit_polynomial(q, 3, sample.duration).coeffs
        x0, m_xdot = window_state_stats(gamma_q, sample.n, sample.dt)
        out = replace(out, gamma_q=gamma_q, x0=x0, m_xdot=m_xdot)
    fraction, prob = contact_flip
    if sample.contact is not None and fraction > 0 and prob > 0:
        labels = sample.contact.copy()
        flat = labels.reshape(-1)
        n_pick = int(round(fraction * flat.size))
        picked = rng.choice(flat.size, size=n_pick, replace=False)
        flip = picked[rng.random(n_pick) < prob]
        flat[flip] = ~flat[flip]
        out = replace(out, contact=labels)
    return out


def noisy_dataset(ds, angle_sigma, contact_flip=(0.0, 0.0), seed=0):
    """Apply ``add_noise`` to every window with per-window seeds."""
    seeds = np.random.SeedSequence(seed).generate_state(len(ds.windows))
    windows = [add_noise(w, angle_sigma, contact_flip, int(s)) for w, s in zip(ds.windows, seeds)]
    return Dataset(windows, ds.sequences, ds.spec, dict(ds.meta))


# --------------------------------------------------------------------------
# windowing of sequences

def windows_from_sequence(seq, spec, with_forces=True, torque_labels=None, with_contact=True):
    """Cut a sequence into window samples.

    ``torque_labels`` maps window start frame to a (18, 2) coefficient array.
    """
    out = []
    for k, q_win in enumerate(slice_windows(seq.q, spec)):
        start = k * spec.stride
        stop = start + spec.length
        fc = seq.f_c[start:stop] if (with_forces and seq.f_c is not None) else None
        gt = None
        if fc is not None and torque_labels is not None:
            gt = torque_labels.get(start)
        contact = seq.contact[start:stop] if (with_contact and seq.contact is not None) else None
        out.append(make_window(q_win, spec.dt, seq.l_sub, seq.total_mass, fc_frames=fc, gamma_tau=gt,
                               contact=contact, subject=seq.subject, sequence=seq.name, start=start,
                               style=seq.style))
    return out


def load_motion_csv(path, l_sub, total_mass, spec=None, subject="csv", style="unknown"):
    """Import per-frame generalized coordinates from CSV.

    Columns: ``time`` followed by 24 coordinates; translations in meters,
    angles in degrees.  The time column must be uniformly spaced and match
    ``spec.dt`` when a spec is given.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if len(header) != N_Q + 1 or header[0].strip().lower() != "time":
        raise DatasetError(f"{path}: expected 'time' plus {N_Q} coordinate columns")
    try:
        data = np.array([[float(v) for v in r] for r in body if r])
    except ValueError as exc:
        raise DatasetError(f"{path}: non-numeric entry ({exc})") from exc
    if data.ndim != 2 or data.shape[0] < 2:
        raise DatasetError(f"{path}: need at least two frames")
    dts = np.diff(data[:, 0])
    dt = float(np.mean(dts))
    if dt <= 0 or np.max(np.abs(dts - dt)) > 1e-6 * max(dt, 1.0):
        raise DatasetError(f"{path}: time column is not uniformly increasing")
    spec = spec or WindowSpec(dt=dt)
    if abs(spec.dt - dt) > 1e-9:
        raise DatasetError(f"{path}: sampling interval {dt} differs from window spec {spec.dt}")
    q = data[:, 1:].copy()
    q[:, 3:] = np.deg2rad(q[:, 3:])
    seq = Sequence(name=path.stem, subject=subject, style=style, dt=dt, l_sub=np.asarray(l_sub, float),
                   total_mass=float(total_mass), q=q)
    return Dataset(windows_from_sequence(seq, spec), {seq.name: seq}, spec, {"source": str(path)})


# --------------------------------------------------------------------------
# serialization

def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def _window_record(w):
    return {
        "kind": "window", "subject": w.subject, "sequence": w.sequence, "start": w.start, "style": w.style,
        "dt": w.dt, "n": w.n, "l_sub": _arr(w.l_sub), "total_mass": w.total_mass,
        "gamma_q": _arr(w.gamma_q), "x0": _arr(w.x0), "m_xdot": _arr(w.m_xdot),
        "gamma_f": _arr(w.gamma_f), "gamma_tau": _arr(w.gamma_tau),
        "contact": None if w.contact is None else w.contact.astype(int).tolist(),
    }


def _sequence_record(s):
    return {
        "kind": "sequence", "name": s.name, "subject": s.subject, "style": s.style, "dt": s.dt,
        "l_sub": _arr(s.l_sub), "total_mass": s.total_mass, "q": _arr(s.q), "f_c": _arr(s.f_c),
        "tau": _arr(s.tau), "contact": None if s.contact is None else s.contact.astype(int).tolist(),
    }


def _opt(rec, key, shape, dtype=float):
    val = rec.get(key)
    if val is None:
        return None
    arr = np.array(val, dtype=dtype)
    if shape is not None and arr.shape[-len(shape):] != shape:
        raise DatasetError(f"field {key!r} has shape {arr.shape}, expected (..., {shape})")
    return arr


def _parse_window(rec):
    try:
        return WindowSample(
            gamma_q=_opt(rec, "gamma_q", (N_Q, 4)), l_sub=_opt(rec, "l_sub", (7,)),
            total_mass=float(rec["total_mass"]), dt=float(rec["dt"]), n=int(rec["n"]),
            x0=_opt(rec, "x0", (2 * N_Q,)), m_xdot=_opt(rec, "m_xdot", (2 * N_Q,)),
            gamma_f=_opt(rec, "gamma_f", (N_FC, 4)), gamma_tau=_opt(rec, "gamma_tau", (N_TAU, 2)),
            contact=_opt(rec, "contact", (2,), bool), subject=rec.get("subject", ""),
            sequence=rec.get("sequence", ""), start=int(rec.get("start", 0)), style=rec.get("style", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed window record: {exc}") from exc


def _parse_sequence(rec):
    try:
        return Sequence(
            name=rec["name"], subject=rec["subject"], style=rec.get("style", ""), dt=float(rec["dt"]),
            l_sub=_opt(rec, "l_sub", (7,)), total_mass=float(rec["total_mass"]), q=_opt(rec, "q", (N_Q,)),
            f_c=_opt(rec, "f_c", (N_FC,)), tau=_opt(rec, "tau", (N_TAU,)), contact=_opt(rec, "contact", (2,), bool))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed sequence record: {exc}") from exc


def save_dataset(path, ds):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT, "schema_version": SCHEMA_VERSION, "dt": ds.spec.dt,
        "window": {"length": ds.spec.length, "stride": ds.spec.stride},
        "units": UNITS, "counts": ds.counts(), "meta": ds.meta,
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for name in sorted(ds.sequences):
            fh.write(json.dumps(_sequence_record(ds.sequences[name])) + "\n")
        for w in ds.windows:
            fh.write(json.dumps(_window_record(w)) + "\n")
    return path


def load_dataset(path):
    path = Path(path)
    with path.open() as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: unreadable header ({exc})") from exc
        if not isinstance(header, dict) or header.get("format") != FORMAT:
            raise DatasetError(f"{path}: not a {FORMAT} file")
        if header.get("schema_version") != SCHEMA_VERSION:
            raise DatasetError(f"{path}: schema version {header.get('schema_version')} != {SCHEMA_VERSION}")
        try:
            spec = WindowSpec(int(header["window"]["length"]), int(header["window"]["stride"]), float(header["dt"]))
        except (KeyError, TypeError, InvalidParameterError) as exc:
            raise DatasetError(f"{path}: bad window spec in header ({exc})") from exc
        windows, seqs = [], {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            kind = rec.get("kind") if isinstance(rec, dict) else None
            if kind == "window":
                windows.append(_parse_window(rec))
            elif kind == "sequence":
                s = _parse_sequence(rec)
                seqs[s.name] = s
            else:
                raise DatasetError(f"{path}:{lineno}: unknown record kind {kind!r}")
    return Dataset(windows, seqs, spec, header.get("meta", {}))
