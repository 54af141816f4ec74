"""Sliding windows and per-window polynomial encoding of time series.

Each window of ``length`` frames is mapped to normalized time
``s in [0, 1]`` (frame ``i`` sits at ``s = i / (length - 1)``) and every
channel is approximated by a polynomial in ``s`` with coefficients stored in
ascending powers.  Derivatives are returned in physical time units.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass(frozen=True)
class PolyCoeffs:
    """Per-channel polynomial coefficients of one window.

    Attributes
    ----------
    coeffs : ndarray, shape (channels, order + 1)
        ``coeffs[c, k]`` multiplies ``s**k``.
    duration : float
        Physical length of the window in seconds (``(length - 1) * dt``).
    """

    coeffs: np.ndarray
    duration: float

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 2:
            raise InvalidParameterError("coefficients must be (channels, order + 1)")
        if not self.duration > 0:
            raise InvalidParameterError("window duration must be positive")
        object.__setattr__(self, "coeffs", c)

    @property
    def order(self):
        return self.coeffs.shape[1] - 1

    @property
    def n_channels(self):
        return self.coeffs.shape[0]

    def flat(self):
        return self.coeffs.ravel()


@dataclass(frozen=True)
class WindowSpec:
    length: int = 25
    stride: int = 12
    dt: float = 0.01

    def __post_init__(self):
        if self.length < 4:
            raise InvalidParameterError("window length must be at least 4 frames")
        if not 1 <= self.stride <= self.length:
            raise InvalidParameterError("stride must lie in [1, length]")
        if not self.dt > 0:
            raise InvalidParameterError("dt must be positive")

    @property
    def n_steps(self):
        return self.length - 1

    @property
    def duration(self):
        return self.n_steps * self.dt


def frame_times(length):
    return np.linspace(0.0, 1.0, length)


def vander(s, order):
    """Rows ``[1, s, s**2, ...]`` for each entry of ``s``."""
    return np.asarray(s, dtype=float)[..., None] ** np.arange(order + 1)


def fit_polynomial(samples, order, duration, start=None):
    """Least-squares polynomial fit per channel over normalized time.

    Parameters
    ----------
    samples : array_like, shape (frames, channels)
    order : int
    duration : float
        Physical window length in seconds.
    start : tuple of array_like, optional
        ``(value, rate)`` at ``s = 0`` (rate per second).  Pins the two
        lowest coefficients; the rest are fitted to the residual.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    frames = samples.shape[0]
    if frames < order + 1:
        raise InvalidParameterError(f"need at least {order + 1} frames for order {order}, got {frames}")
    a = vander(frame_times(frames), order)
    if start is None:
        coef, *_ = np.linalg.lstsq(a, samples, rcond=None)
        return PolyCoeffs(coef.T, duration)
    if order < 1:
        raise InvalidParameterError("pinning value and rate needs order >= 1")
    fixed = np.stack([np.broadcast_to(np.asarray(start[0], dtype=float), samples.shape[1:]),
                      np.broadcast_to(np.asarray(start[1], dtype=float) * duration, samples.shape[1:])])
    rest, *_ = np.linalg.lstsq(a[:, 2:], samples - a[:, :2] @ fixed, rcond=None)
    return PolyCoeffs(np.concatenate([fixed, rest]).T, duration)


def derivative_matrix(order, derivative_order):
    """Matrix ``D`` so that coefficients of the k-th derivative are ``c @ D``."""
    d = np.eye(order + 1)
    for _ in range(derivative_order):
        step = np.zeros((order + 1, order + 1))
        for k in range(1, order + 1):
            step[k, k - 1] = k
        d = d @ step
    return d


def eval_polynomial(c, s, derivative_order=0):
    """Evaluate polynomials (or their time derivatives) at normalized times.

    Returns an array of shape ``np.shape(s) + (channels,)``.
    """
    if derivative_order not in (0, 1, 2):
        raise InvalidParameterError("derivative order must be 0, 1 or 2")
    if derivative_order > c.order:
        raise InvalidParameterError(f"derivative order {derivative_order} exceeds polynomial order {c.order}")
    s = np.asarray(s, dtype=float)
    if np.any(s < -1e-12) or np.any(s > 1 + 1e-12):
        raise InvalidParameterError("normalized time must lie in [0, 1]")
    coef = c.coeffs @ derivative_matrix(c.order, derivative_order)
    # Horner in s, ascending coefficients
    out = np.zeros(s.shape + (c.n_channels,))
    for k in range(c.order, -1, -1):
        out = out * s[..., None] + coef[:, k]
    return out / c.duration**derivative_order


def window_starts(n_frames, spec):
    if n_frames <= 0:
        raise InvalidParameterError("cannot slice an empty sequence")
    return list(range(0, n_frames - spec.length + 1, spec.stride))


def slice_windows(sequence, spec):
    """Overlapping windows of ``spec.length`` frames; a short tail is dropped."""
    sequence = np.asarray(sequence)
    return [sequence[s:s + spec.length] for s in window_starts(len(sequence), spec)]


def merge_windows(predictions, spec, n_frames=None):
    """Average overlapping per-window predictions frame by frame.

    Parameters
    ----------
    predictions : sequence of arrays, each (spec.length, channels)
        In the order produced by ``slice_windows``.
    n_frames : int, optional
        Length of the source sequence; frames not covered by any window are NaN.
    """
    predictions = [np.asarray(p, dtype=float) for p in predictions]
    if not predictions:
        raise InvalidParameterError("no windows to merge")
    if any(p.shape[0] != spec.length for p in predictions):
        raise InvalidParameterError("window length does not match spec")
    covered = (len(predictions) - 1) * spec.stride + spec.length
    n_frames = covered if n_frames is None else n_frames
    if n_frames < covered:
        raise InvalidParameterError("window count inconsistent with sequence length")
    channels = predictions[0].shape[1:]
    total = np.zeros((n_frames,) + channels)
    count = np.zeros(n_frames)
    for i, p in enumerate(predictions):
        start = i * spec.stride
        total[start:start + spec.length] += p
        count[start:start + spec.length] += 1
    with np.errstate(invalid="ignore"):
        return total / count.reshape((-1,) + (1,) * len(channels))
