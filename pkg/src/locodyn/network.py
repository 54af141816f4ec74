"""Small fully connected bottleneck regressor with manual backpropagation.

The network maps window features (motion coefficients, segment lengths and
body mass) to force and torque polynomial coefficients.  Inputs are
standardized and outputs de-standardized with statistics taken from the
training set, so the trainable layers work on unit-scale data.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError

CHECKPOINT_VERSION = 1
N_FEATURES = 104
N_FORCE = 48
N_TORQUE = 36
N_OUTPUTS = N_FORCE + N_TORQUE
DEFAULT_SIZES = (N_FEATURES, 24, 16, 16, 24, N_OUTPUTS)
LEAKY_SLOPE = 0.01
_SCHEMES = {"he": 6.0, "glorot": None, "lecun": 3.0}


def window_features(sample):
    """Network input: motion coefficients, segment lengths and body mass (104 values).

    The horizontal start position (constant terms of the x and y
    translation polynomials) is zeroed because forces do not depend on
    where on the floor a window begins.
    """
    gq = np.array(sample.gamma_q, dtype=float)
    gq[:2, 0] = 0.0
    return np.concatenate([gq.ravel(), np.asarray(sample.l_sub, dtype=float), [float(sample.total_mass)]])


def window_targets(sample):
    """Output vector ``[gamma_f, gamma_tau]`` with zeros for missing labels."""
    f = np.zeros(N_FORCE) if sample.gamma_f is None else np.asarray(sample.gamma_f, dtype=float).ravel()
    t = np.zeros(N_TORQUE) if sample.gamma_tau is None else np.asarray(sample.gamma_tau, dtype=float).ravel()
    return np.concatenate([f, t])


def leaky_relu(z, slope=LEAKY_SLOPE):
    return np.where(z > 0, z, slope * z)


def leaky_relu_grad(z, slope=LEAKY_SLOPE):
    return np.where(z > 0, 1.0, slope)


@dataclass
class Mlp:
    """Weights, biases and normalization statistics.

    ``weights[k]`` has shape ``(sizes[k], sizes[k + 1])``; the last layer is
    linear, all others use Leaky-ReLU.
    """

    sizes: tuple
    weights: list
    biases: list
    slope: float = LEAKY_SLOPE
    in_mean: np.ndarray = None
    in_std: np.ndarray = None
    out_mean: np.ndarray = None
    out_std: np.ndarray = None

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise InvalidParameterError("layer count does not match sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[k], self.sizes[k + 1]) or b.shape != (self.sizes[k + 1],):
                raise InvalidParameterError(f"layer {k} has inconsistent shape")
        if self.in_mean is None:
            self.in_mean, self.in_std = np.zeros(self.sizes[0]), np.ones(self.sizes[0])
        if self.out_mean is None:
            self.out_mean, self.out_std = np.zeros(self.sizes[-1]), np.ones(self.sizes[-1])

    @property
    def n_params(self):
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def params(self):
        """Trainable arrays in a fixed order (weights and biases interleaved)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return Mlp(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.slope,
                   self.in_mean.copy(), self.in_std.copy(), self.out_mean.copy(), self.out_std.copy())

    def set_normalization(self, x, y=None, floor=1e-8):
        """Per-feature statistics from training inputs (and targets)."""
        x = np.asarray(x, dtype=float)
        self.in_mean = x.mean(axis=0)
        self.in_std = np.where(x.std(axis=0) > floor, x.std(axis=0), 1.0)
        if y is not None:
            y = np.asarray(y, dtype=float)
            self.out_mean = y.mean(axis=0)
            self.out_std = np.where(y.std(axis=0) > floor, y.std(axis=0), 1.0)

    def normalize_input(self, x):
        return (np.asarray(x, dtype=float) - self.in_mean) / self.in_std

    def denormalize_output(self, z):
        return z * self.out_std + self.out_mean

    def normalize_output(self, y):
        return (np.asarray(y, dtype=float) - self.out_mean) / self.out_std


def net_init(seed=0, sizes=DEFAULT_SIZES, scheme="he", slope=LEAKY_SLOPE):
    """Fan-in scaled uniform initialization with zero biases.

    ``he``: ``U(-sqrt(6/fan_in), sqrt(6/fan_in))`` (std ``sqrt(2/fan_in)``),
    ``lecun``: bound ``sqrt(3/fan_in)`` (std ``sqrt(1/fan_in)``),
    ``glorot``: bound ``sqrt(6/(fan_in + fan_out))``.
    """
    if scheme not in _SCHEMES:
        raise InvalidParameterError(f"unknown init scheme {scheme!r}")
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise InvalidParameterError("need at least an input and an output layer")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out)) if scheme == "glorot" else np.sqrt(_SCHEMES[scheme] / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(tuple(sizes), weights, biases, slope)


def init_std(scheme, fan_in, fan_out):
    """Standard deviation of the weights drawn by ``net_init``."""
    if scheme == "glorot":
        return np.sqrt(2.0 / (fan_in + fan_out))
    return np.sqrt(_SCHEMES[scheme] / fan_in / 3.0)


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)  # layer inputs (post-activation)
    pre: list = field(default_factory=list)  # pre-activations


def forward_pass(net, x):
    """Standardized forward pass.

    Returns
    -------
    y : ndarray, shape (batch, outputs)
        De-standardized outputs.
    cache : ForwardCache
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.sizes[0]:
        raise InvalidParameterError(f"expected {net.sizes[0]} input features, got {x.shape[-1]}")
    h = net.normalize_input(np.atleast_2d(x))
    cache = ForwardCache()
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre.append(z)
        h = z if k == last else leaky_relu(z, net.slope)
    return net.denormalize_output(h), cache


def split_outputs(y):
    """Split (batch, 84) outputs into force (batch, 12, 4) and torque (batch, 18, 2) coefficients."""
    y = np.atleast_2d(y)
    return y[:, :N_FORCE].reshape(-1, 12, 4), y[:, N_FORCE:].reshape(-1, 18, 2)


def net_forward(net, x):
    """Predicted ``(gamma_f, gamma_tau)`` for a batch of feature vectors."""
    y, _ = forward_pass(net, x)
    return split_outputs(y)


def net_backward(net, cache, dl_dy):
    """Parameter gradients for an upstream gradient on de-standardized outputs.

    Returns a list aligned with ``net.params()``.
    """
    if cache is None or not cache.inputs:
        raise InvalidParameterError("forward activations are missing; run forward_pass first")
    g = np.atleast_2d(np.asarray(dl_dy, dtype=float)) * net.out_std
    grads = [None] * (2 * len(net.weights))
    for k in range(len(net.weights) - 1, -1, -1):
        if k != len(net.weights) - 1:
            g = g * leaky_relu_grad(cache.pre[k], net.slope)
        grads[2 * k] = cache.inputs[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ net.weights[k].T
    return grads


def save_checkpoint(path, net, meta=None):
    """Write a versioned JSON checkpoint.

    Floats are stored with their shortest round-trip representation, so
    loading restores every parameter bit for bit and identical networks
    produce identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": "locodyn-mlp", "version": CHECKPOINT_VERSION, "sizes": list(net.sizes), "slope": net.slope,
        "weights": [w.tolist() for w in net.weights], "biases": [b.tolist() for b in net.biases],
        "in_mean": net.in_mean.tolist(), "in_std": net.in_std.tolist(),
        "out_mean": net.out_mean.tolist(), "out_std": net.out_std.tolist(), "meta": meta or {},
    }
    path.write_text(json.dumps(doc, sort_keys=True))
    return path


def load_checkpoint(path):
    """Read a checkpoint written by ``save_checkpoint``; returns (net, meta)."""
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "locodyn-mlp" or doc.get("version") != CHECKPOINT_VERSION:
            raise InvalidParameterError(f"unsupported checkpoint format/version in {path}")
        arr = lambda v: np.array(v, dtype=float)  # noqa: E731
        net = Mlp(tuple(doc["sizes"]), [arr(w) for w in doc["weights"]], [arr(b) for b in doc["biases"]],
                  float(doc["slope"]), arr(doc["in_mean"]), arr(doc["in_std"]), arr(doc["out_mean"]),
                  arr(doc["out_std"]))
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise InvalidParameterError(f"cannot read checkpoint {path}: {exc}") from exc
    return net, doc.get("meta", {})


def checkpoint_bytes(net):
    """Canonical byte string of all parameters (for hashing and equality)."""
    return b"".join(np.ascontiguousarray(a, dtype=float).tobytes()
                    for a in net.params() + [net.in_mean, net.in_std, net.out_mean, net.out_std])
