"""Material -> cross-section MLP with hand-written reverse mode.

Architecture: ``D_in -> 128 -> 128 -> 1`` with ReLU hidden activations and a
logistic output, all in float64. Inputs are the clamped material vector
(albedo rgb, roughness, metallic), fed raw with no positional encoding.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidStateError

HIDDEN = 128
MATERIAL_DIM = 5
_TINY = np.nextafter(0.0, 1.0)
_ONE_MINUS = np.nextafter(1.0, 0.0)


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the open interval (0, 1) under rounding
    return np.clip(s, _TINY, _ONE_MINUS)


@dataclass
class CrossSectionNetwork:
    layer_sizes: list[int]
    weights: list[np.ndarray]   # weights[k] has shape (out, in)
    biases: list[np.ndarray]

    def __post_init__(self):
        sizes = [int(s) for s in self.layer_sizes]
        if len(sizes) < 2 or sizes[-1] != 1 or min(sizes) < 1:
            raise InvalidInputError(f"bad layer sizes {sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise InvalidInputError("weights/biases do not match layer count")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise InvalidInputError(
                    f"layer {k}: expected W{(sizes[k + 1], sizes[k])}, b{(sizes[k + 1],)}, "
                    f"got {W.shape}, {b.shape}")
        self.layer_sizes = sizes

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = W
            out[f"b{k}"] = b
        return out

    def copy(self) -> "CrossSectionNetwork":
        return CrossSectionNetwork(list(self.layer_sizes),
                                   [W.copy() for W in self.weights],
                                   [b.copy() for b in self.biases])

    def fingerprint(self) -> int:
        h = 0
        for W, b in zip(self.weights, self.biases):
            h = zlib.crc32(W.tobytes(), h)
            h = zlib.crc32(b.tobytes(), h)
        return h


@dataclass
class ForwardCache:
    inputs: np.ndarray           # (B, D_in)
    pre: list[np.ndarray]        # pre-activations per layer, (B, out)
    post: list[np.ndarray]       # activations per layer, (B, out)
    single: bool
    fingerprint: int


def init_network(seed: int, input_dim: int = MATERIAL_DIM,
                 hidden: tuple[int, ...] = (HIDDEN, HIDDEN)) -> CrossSectionNetwork:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases."""
    if input_dim < 1:
        raise InvalidInputError("input_dim must be >= 1")
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return CrossSectionNetwork(sizes, weights, biases)


def forward(net: CrossSectionNetwork, m) -> tuple[np.ndarray | float, ForwardCache]:
    """Cross section for one material vector (D,) or a batch (B, D)."""
    x = np.asarray(m, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != net.input_dim:
        raise InvalidInputError(f"expected material dim {net.input_dim}, got shape {x.shape}")
    pre, post = [], []
    h = x2
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W.T + b
        h = sigmoid(z) if k == last else np.maximum(z, 0.0)
        pre.append(z)
        post.append(h)
    sigma = h[:, 0]
    cache = ForwardCache(x2, pre, post, single, net.fingerprint())
    return (float(sigma[0]) if single else sigma), cache


def backward(net: CrossSectionNetwork, cache: ForwardCache, dsigma):
    """Reverse pass. Returns (dL/dm, {param name: dL/dparam}) summed over the batch."""
    if cache.fingerprint != net.fingerprint():
        raise InvalidStateError("forward cache was produced by different network parameters")
    batch = cache.inputs.shape[0]
    g = np.asarray(dsigma, dtype=np.float64).reshape(-1)
    if g.shape[0] != batch:
        raise InvalidStateError(f"dsigma has {g.shape[0]} entries, cache holds {batch}")
    s = cache.post[-1][:, 0]
    dz = (g * s * (1.0 - s))[:, None]
    grads = {}
    for k in range(len(net.weights) - 1, -1, -1):
        h_in = cache.post[k - 1] if k > 0 else cache.inputs
        grads[f"W{k}"] = dz.T @ h_in
        grads[f"b{k}"] = dz.sum(axis=0)
        dh = dz @ net.weights[k]
        if k > 0:
            dz = dh * (cache.pre[k - 1] > 0)
    dm = dh[0] if cache.single else dh
    return dm, {name: grads[name] for name in net.named_parameters()}
