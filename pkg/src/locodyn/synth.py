"""Synthetic gait data with exact ground truth.

Each sequence follows a smooth periodic reference gait (sums of harmonics
with randomized amplitudes and phases).  At every frame a computed-torque
controller picks the contact wrenches and joint torques that realize the
desired accelerations ``qdd_ref + Kp e + Kd e_dot``:

* the six root rows of ``M qdd = F`` must be produced by the feet; the
  required root load is shared between the feet with smooth contact weights
  ``w_l + w_r = 1`` (a foot with weight zero is in swing and carries nothing),
* the joint rows then give the torques.

The state is advanced with the same explicit Euler step as the forward
layer, so the recorded (wrench, torque, motion) triples are consistent with
the simulator by construction frame by frame.  Window labels are
polynomial fits of these frames and therefore only approximately
consistent.  Walking-style sequences show a double-bump
vertical force (about 10% double support per half cycle), running-style
ones a single bump with a short double support.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .body import build_body_model, l_sub_from_height
from .dataset import Dataset, Sequence, WindowSample, sigma_from_windows, window_state_stats, windows_from_sequence
from .dynamics import DampingConfig, Terms, _cholesky, cho_solve, contact_jacobian
from .errors import ConfigError, DatasetError, DivergenceError, SingularConfigurationError
from .forward import ForwardInput, simulate
from .trajectory import WindowSpec, fit_polynomial

STYLES = ("walk", "run")

# left-leg channel order within a leg block: hip (ry, rx, rz), knee, ankle
# mean, first and second harmonic amplitudes per style
_LEG = {
    "walk": {
        "mean": [-0.10, 0.02, 0.0, 0.30, 0.0, 0.0, 0.02, 0.02, 0.0],
        "a1": [0.35, 0.04, 0.04, 0.25, 0.01, 0.01, 0.15, 0.04, 0.02],
        "a2": [0.03, 0.01, 0.01, 0.12, 0.0, 0.0, 0.05, 0.01, 0.0],
    },
    "run": {
        "mean": [-0.25, 0.02, 0.0, 0.70, 0.0, 0.0, 0.05, 0.02, 0.0],
        "a1": [0.50, 0.05, 0.05, 0.45, 0.01, 0.01, 0.25, 0.05, 0.02],
        "a2": [0.05, 0.01, 0.01, 0.15, 0.0, 0.0, 0.08, 0.01, 0.0],
    },
}
_GAIT = {
    # period (s), speed (m/s), stance fraction, vertical amplitude (m), pitch mean
    "walk": dict(period=1.1, speed=1.3, stance=0.6, bounce=0.015, pitch=0.03),
    "run": dict(period=0.72, speed=3.0, stance=0.53, bounce=0.02, pitch=0.10),
}
_LAT = np.array([1.0, -1.0, -1.0] * 3)  # mirror signs inside a leg block


@dataclass(frozen=True)
class SynthConfig:
    """Generation settings.

    ``grf_fraction`` and ``contact_fraction`` are the shares of sequences
    that receive force and contact labels.  ``torque_labels`` selects how
    joint-torque coefficients are produced for force-labelled windows:
    ``"optimize"`` runs the forward-dynamics torque fit, ``"fit"`` fits the
    recorded torques directly and ``"none"`` leaves the torque set empty.
    """

    n_subjects: int = 6
    sequences_per_subject: int = 2
    duration: float = 1.2
    styles: tuple = ("walk",)
    seed: int = 0
    window_length: int = 25
    window_stride: int = 12
    dt: float = 0.01
    grf_fraction: float = 1.0
    contact_fraction: float = 1.0
    torque_labels: str = "fit"
    height_range: tuple = (1.67, 1.94)
    mass_range: tuple = (55.7, 95.8)
    amplitude: float = 1.0
    variability: float = 0.2
    kp: float = 100.0
    kd: float = 20.0
    init_noise: float = 0.01
    max_retries: int = 3
    workers: int = 1

    def __post_init__(self):
        if self.n_subjects < 1 or self.sequences_per_subject < 1:
            raise ConfigError("need at least one subject and one sequence")
        for name in ("grf_fraction", "contact_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        unknown = set(self.styles) - set(STYLES)
        if unknown or not self.styles:
            raise ConfigError(f"unknown styles {sorted(unknown)}; choose from {STYLES}")
        if self.torque_labels not in ("optimize", "fit", "none"):
            raise ConfigError("torque_labels must be 'optimize', 'fit' or 'none'")
        if self.amplitude < 0 or self.variability < 0:
            raise ConfigError("amplitude and variability must be non-negative")
        lo, hi = self.height_range
        if not 0 < lo <= hi:
            raise ConfigError("invalid height range")
        lo, hi = self.mass_range
        if not 0 < lo <= hi:
            raise ConfigError("invalid mass range")
        object.__setattr__(self, "styles", tuple(self.styles))
        object.__setattr__(self, "height_range", tuple(self.height_range))
        object.__setattr__(self, "mass_range", tuple(self.mass_range))

    @property
    def spec(self):
        return WindowSpec(self.window_length, self.window_stride, self.dt)

    @property
    def n_frames(self):
        return int(round(self.duration / self.dt)) + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown synthesis settings: {sorted(unknown)}")
        return cls(**known)


@dataclass
class Subject:
    name: str
    height: float
    mass: float
    l_sub: np.ndarray = field(repr=False)


@dataclass
class GaitReference:
    """Harmonic reference ``q(t) = mean + rate t + sum_h a_h sin(h w t + phi_h)``."""

    omega: float
    mean: np.ndarray  # (24,)
    rate: np.ndarray  # (24,)
    amp: np.ndarray  # (24, 2)
    phase: np.ndarray  # (24, 2)
    stance: float
    phase0: float
    static: bool

    def __call__(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        q, qd, qdd = self.mean + self.rate * t, np.broadcast_to(self.rate, t.shape[:-1] + (24,)).copy(), 0.0
        for h in (1, 2):
            w = h * self.omega
            arg = w * t + self.phase[:, h - 1]
            a = self.amp[:, h - 1]
            q = q + a * np.sin(arg)
            qd = qd + a * w * np.cos(arg)
            qdd = qdd - a * w * w * np.sin(arg)
        return q, qd, qdd + np.zeros_like(q)

    def contact_weights(self, t):
        """Smooth support shares (w_l, w_r) summing to one."""
        t = np.asarray(t, dtype=float)
        if self.static:
            return np.full(t.shape + (2,), 0.5)
        p = np.mod(t * self.omega / (2 * np.pi) + self.phase0, 1.0)
        ds = self.stance - 0.5  # double-support share of each half cycle
        w_l = np.where(p < 0.5, 1.0, 0.0)
        # left foot loads over [0, ds) and unloads over [0.5, 0.5 + ds)
        u = np.clip(p / ds, 0, 1)
        w_l = np.where(p < ds, u * u * (3 - 2 * u), w_l)
        u = np.clip((p - 0.5) / ds, 0, 1)
        w_l = np.where((p >= 0.5) & (p < 0.5 + ds), 1 - u * u * (3 - 2 * u), w_l)
        return np.stack([w_l, 1.0 - w_l], axis=-1)


def sample_subjects(cfg, rng):
    out = []
    for k in range(cfg.n_subjects):
        height = rng.uniform(*cfg.height_range)
        mass = rng.uniform(*cfg.mass_range)
        out.append(Subject(f"S{k:02d}", height, mass, l_sub_from_height(height)))
    return out


def gait_reference(style, l_sub, rng, amplitude=1.0, variability=0.2):
    """Randomized periodic reference gait for one sequence."""
    g, leg = _GAIT[style], _LEG[style]
    jitter = lambda size=None: 1.0 + variability * rng.uniform(-1, 1, size)  # noqa: E731
    period = g["period"] * jitter()
    omega = 2 * np.pi / period
    mean, rate = np.zeros(24), np.zeros(24)
    amp, phase = np.zeros((24, 2)), np.zeros((24, 2))
    ph = lambda: variability * rng.uniform(-0.5, 0.5)  # noqa: E731

    a_scale = amplitude
    leg_mean = np.array(leg["mean"]) * a_scale
    leg_a1 = np.array(leg["a1"]) * jitter(9) * a_scale
    leg_a2 = np.array(leg["a2"]) * jitter(9) * a_scale
    # left stance starts at cycle phase 0 (hip flexed at heel strike)
    base = np.array([-np.pi / 2, 0.0, 0.0, -0.9 * np.pi, 0.0, 0.0, 0.0, np.pi / 2, np.pi / 2])
    for side, block, shift in ((0, slice(6, 15), 0.0), (1, slice(15, 24), np.pi)):
        sign = 1.0 if side == 0 else _LAT
        mean[block] = leg_mean * sign
        amp[block, 0] = leg_a1 * sign
        amp[block, 1] = leg_a2 * sign
        phase[block, 0] = base + shift + np.array([ph() for _ in range(9)])
        phase[block, 1] = 2 * base + 2 * shift + np.array([ph() for _ in range(9)])

    # root: pelvis at leg length above the ankles, moving forward
    mean[2] = l_sub[1] + l_sub[2] - 0.03 * a_scale
    rate[0] = g["speed"] * jitter() * a_scale
    stance = g["stance"]
    mid = 0.5 * stance
    sign_z = 1.0 if style == "walk" else -1.0  # highest (walk) or lowest (run) at mid-stance
    amp[2, 1] = sign_z * g["bounce"] * jitter() * a_scale
    phase[2, 1] = np.pi / 2 - 2 * 2 * np.pi * mid
    amp[1, 0], phase[1, 0] = 0.02 * jitter() * a_scale, ph()  # lateral sway
    amp[3, 0], phase[3, 0] = 0.05 * jitter() * a_scale, ph()  # yaw
    mean[4] = g["pitch"] * a_scale
    amp[4, 1], phase[4, 1] = 0.02 * jitter() * a_scale, ph()  # pitch
    amp[5, 0], phase[5, 0] = 0.04 * jitter() * a_scale, ph()  # roll
    static = amplitude == 0.0
    return GaitReference(omega, mean, rate, amp, phase, stance, 0.0, static)


def track_reference(model, ref, n_frames, dt, kp, kd, x0):
    """Computed-torque tracking; returns per-frame q, wrenches, torques, weights."""
    n = model.n_dof
    nc = model.n_contacts
    t_all = np.arange(n_frames) * dt
    weights = ref.contact_weights(t_all)
    qs = np.empty((n_frames, n))
    fcs = np.zeros((n_frames, 6 * nc))
    taus = np.empty((n_frames, len(model.actuated)))
    x = np.array(x0, dtype=float)
    act = list(model.actuated)
    for k in range(n_frames):
        q, qd = x[:n], x[n:]
        q_r, qd_r, qdd_r = ref(t_all[k])
        qdd_des = qdd_r + kp * (q_r - q) + kd * (qd_r - qd)
        terms = Terms(model, q, qd)
        need = terms.mass @ qdd_des - terms.bias
        jc = contact_jacobian(model, terms.jv, terms.jw)
        fc = np.zeros(6 * nc)
        for i in range(nc):
            if weights[k, i] <= 0:
                continue
            cols = [3 * i, 3 * i + 1, 3 * i + 2, 3 * (nc + i), 3 * (nc + i) + 1, 3 * (nc + i) + 2]
            w_i = np.linalg.solve(jc[:6, cols], need[:6])
            fc[cols] = weights[k, i] * w_i
        tau = (need - jc @ fc)[act]
        qs[k], fcs[k], taus[k] = q, fc, tau
        if k == n_frames - 1:
            break
        # explicit Euler with the realized acceleration
        qdd = cho_solve(_cholesky(terms.mass), terms.bias + jc @ fc + np.bincount(act, tau, minlength=n))
        x = x + dt * np.concatenate([qd, qdd])
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k + 1)
    return qs, fcs, taus, weights


def generate_sequence(cfg, subject, index, style):
    """One synthetic sequence; resamples the reference after divergence."""
    model = build_body_model(subject.l_sub, total_body_mass=subject.mass)
    ss = np.random.SeedSequence([cfg.seed, 1, index])
    last = None
    for attempt in range(cfg.max_retries + 1):
        rng = np.random.default_rng(ss.spawn(attempt + 1)[-1])
        ref = gait_reference(style, subject.l_sub, rng, cfg.amplitude, cfg.variability)
        q0, qd0, _ = ref(0.0)
        noise = cfg.init_noise * (cfg.amplitude > 0)
        x0 = np.concatenate([q0 + noise * rng.standard_normal(24), qd0 + 5 * noise * rng.standard_normal(24)])
        try:
            q, fc, tau, w = track_reference(model, ref, cfg.n_frames, cfg.dt, cfg.kp, cfg.kd, x0)
        except (DivergenceError, SingularConfigurationError, np.linalg.LinAlgError) as exc:
            last = exc
            continue
        return Sequence(name=f"{subject.name}_{style}_{index:03d}", subject=subject.name, style=style,
                        dt=cfg.dt, l_sub=subject.l_sub, total_mass=subject.mass, q=q, f_c=fc, tau=tau,
                        contact=w > 0)
    raise DatasetError(f"sequence {index} diverged after {cfg.max_retries + 1} attempts: {last}")


def fit_torque_labels(seq, spec, start):
    """Linear torque coefficients fitted to the recorded torques of one window."""
    tau = seq.tau[start:start + spec.length]
    return fit_polynomial(tau, 1, spec.duration).coeffs


@dataclass
class OracleWindow:
    """A window simulated open loop from known polynomial inputs.

    ``states`` are the simulated ``x_1 .. x_n``; re-running the forward
    layer on ``sample.x0`` with ``sample.gamma_f`` and ``gamma_tau``
    reproduces them exactly.  ``sample.m_xdot`` covers the simulated
    derivatives, so the damping stays at one along the true trajectory.
    """

    sample: WindowSample
    states: np.ndarray
    gamma_tau: np.ndarray


def oracle_window(rng, style="walk", n=24, dt=0.01, max_speed=30.0, max_retries=20):
    """Draw a subject, a gait phase and the torques that drive it without ground contact.

    The torques are the linear fit of the inverse-dynamics joint torques of
    the reference motion with zero contact wrench.  Under ground loads the
    open-loop model is too unstable for a 24-step window to stay bounded,
    so oracle windows are contact-free.  Draws whose joint speeds exceed
    ``max_speed`` (rad/s or m/s) are rejected.
    """
    off = DampingConfig(np.ones(48), enabled=False)
    for _ in range(max_retries):
        height, mass = rng.uniform(1.67, 1.94), rng.uniform(55.7, 95.8)
        l_sub = l_sub_from_height(height)
        model = build_body_model(l_sub, total_body_mass=mass)
        ref = gait_reference(style, l_sub, rng)
        t = rng.uniform(0, 2 * np.pi / ref.omega) + np.arange(n + 1) * dt
        q, qd, qdd = ref(t)
        terms = Terms(model, q, qd)
        tau = (np.einsum("...ij,...j->...i", terms.mass, qdd) - terms.bias)[:, list(model.actuated)]
        gamma_tau = fit_polynomial(tau, 1, n * dt).coeffs
        gamma_f = np.zeros((6 * model.n_contacts, 4))
        x0 = np.concatenate([q[0], qd[0]])
        try:
            states, _ = simulate(ForwardInput(x0, np.zeros(48), dt, n, gamma_f=gamma_f, gamma_tau=gamma_tau),
                                 model, off)
        except DivergenceError:
            continue
        if np.abs(states[:, 24:]).max() > max_speed:
            continue
        q_frames = np.vstack([q[0], states[:, :24]])
        gamma_q = fit_polynomial(q_frames, 3, n * dt, start=(q[0], qd[0])).coeffs
        _, m_xdot = window_state_stats(gamma_q, n, dt)
        xdot = np.diff(np.vstack([x0, states]), axis=0) / dt
        m_xdot = np.maximum(m_xdot, np.abs(xdot).max(axis=0))
        sample = WindowSample(gamma_q=gamma_q, l_sub=l_sub, total_mass=mass, dt=dt, n=n, x0=x0, m_xdot=m_xdot,
                              gamma_f=gamma_f, gamma_tau=gamma_tau, subject="oracle", style=style)
        return OracleWindow(sample, states, gamma_tau)
    raise DatasetError(f"no bounded oracle window after {max_retries} draws")


def oracle_windows(count, seed=0, style="walk", n=24, dt=0.01):
    """``count`` independent oracle windows from one seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    return [oracle_window(rng, style, n, dt) for _ in range(count)]


def _generate(args):
    return generate_sequence(*args)


def synthesize_dataset(cfg, progress=None):
    """Generate subjects, sequences and labelled windows.

    Returns
    -------
    Dataset
        ``meta`` records the generation config and the damping spread
        ``sigma_xdot`` estimated from all windows.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    subjects = sample_subjects(cfg, rng)
    jobs = []
    for si, subj in enumerate(subjects):
        for k in range(cfg.sequences_per_subject):
            idx = si * cfg.sequences_per_subject + k
            jobs.append((cfg, subj, idx, cfg.styles[idx % len(cfg.styles)]))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            seqs = list(pool.map(_generate, jobs))
    else:
        seqs = [_generate(j) for j in jobs]

    assign = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    n_seq = len(seqs)
    grf = set(assign.permutation(n_seq)[:int(round(cfg.grf_fraction * n_seq))].tolist())
    con = set(assign.permutation(n_seq)[:int(round(cfg.contact_fraction * n_seq))].tolist())
    spec = cfg.spec
    windows = []
    for i, seq in enumerate(seqs):
        windows += windows_from_sequence(seq, spec, with_forces=i in grf, with_contact=i in con)
    sigma = sigma_from_windows(windows)
    meta = {"synth": cfg.to_dict(), "sigma_xdot": sigma.tolist(),
            "subjects": [{"name": s.name, "height": s.height, "mass": s.mass} for s in subjects]}
    ds = Dataset(windows, {s.name: s for s in seqs}, spec, meta)
    if cfg.torque_labels != "none":
        label_torques(ds, cfg.torque_labels, progress=progress)
    return ds


def label_torques(ds, method="optimize", opt=None, progress=None):
    """Attach torque coefficients to force-labelled windows in place.

    With ``method="optimize"`` windows whose forward-dynamics fit fails stay
    out of the torque set.
    """
    cfg = DampingConfig(np.asarray(ds.meta["sigma_xdot"]))
    if method == "optimize":
        from .training import TorqueOptConfig, optimize_window_torques

        opt = opt or TorqueOptConfig()
    failures = 0
    for k, w in enumerate(ds.windows):
        if w.gamma_f is None:
            continue
        if method == "fit":
            w.gamma_tau = fit_torque_labels(ds.sequences[w.sequence], ds.spec, w.start)
        else:
            res = optimize_window_torques(w, cfg, opt)
            w.gamma_tau = res.gamma_tau if res.success else None
            failures += not res.success
        if progress:
            progress(k, len(ds.windows))
    ds.meta["torque_failures"] = failures
    return ds
