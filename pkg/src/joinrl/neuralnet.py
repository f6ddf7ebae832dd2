"""Small fully connected networks with hand-written backprop, Adam, and action masking.

Weight file layout (little-endian)::

    joinrl-mlp 1\\n
    <one line of JSON: {"sizes": [...], "sha256": ..., "meta": {...}}>\\n
    W_0, b_0, W_1, b_1, ... as float64, row-major, W_l of shape (sizes[l], sizes[l+1])
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"joinrl-mlp"
VERSION = 1
MASK_SENTINEL = -1e9


class NetworkError(ValueError):
    pass


class Mlp:
    """ReLU hidden layers, identity output. Works on a single vector or a batch of rows."""

    def __init__(self, sizes, seed: int | None = 0, *, output_scale: float = 0.01, zero: bool = False):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise NetworkError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        rng = np.random.default_rng(seed)
        self._allocate()
        for li, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if not zero:
                limit = np.sqrt(6.0 / fan_in)
                if li == len(sizes) - 2:
                    limit *= output_scale
                self.weights[li][...] = rng.uniform(-limit, limit, size=(fan_in, fan_out))

    def _allocate(self) -> None:
        # all parameters live in one flat vector; weights and biases are views into it
        shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        self.flat = np.zeros(sum(int(np.prod(s)) for s in shapes))
        views = []
        offset = 0
        for shape in shapes:
            n = int(np.prod(shape))
            views.append(self.flat[offset : offset + n].reshape(shape))
            offset += n
        self.weights = views[0::2]
        self.biases = views[1::2]

    def __getstate__(self):
        return {"sizes": self.sizes, "flat": self.flat}

    def __setstate__(self, state):
        self.sizes = list(state["sizes"])
        self._allocate()
        self.flat[...] = state["flat"]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.sizes[-1]

    def copy(self) -> Mlp:
        clone = Mlp.__new__(Mlp)
        clone.sizes = list(self.sizes)
        clone._allocate()
        clone.flat[...] = self.flat
        return clone

    def load_state(self, other: Mlp) -> None:
        if other.sizes != self.sizes:
            raise NetworkError(f"architecture mismatch {other.sizes} vs {self.sizes}")
        self.flat[...] = other.flat

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0] or x.ndim not in (1, 2):
            raise NetworkError(f"expected input width {self.sizes[0]}, got shape {x.shape}")
        # any nan or inf makes the sum non-finite; cheaper than a full isfinite scan
        if not np.isfinite(x.sum()):
            raise NetworkError("non-finite network input")
        return x

    def forward(self, x) -> np.ndarray:
        h = self._check_input(x)
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if li < last:
                h = np.maximum(h, 0.0)
        return h

    __call__ = forward

    def forward_cached(self, x) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass that also returns the layer inputs needed by :meth:`backward`."""
        h = self._check_input(x)
        acts = [h]
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if li < last:
                h = np.maximum(h, 0.0)
                acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], grad_out) -> list[np.ndarray]:
        """Gradients of ``sum(grad_out * output)`` w.r.t. params, in :attr:`params` order.

        For a batch, per-row contributions are summed.
        """
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape[-1] != self.sizes[-1] or g.ndim != acts[0].ndim:
            raise NetworkError(f"output gradient shape {g.shape} does not match network output")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for li in range(len(self.weights) - 1, -1, -1):
            a = acts[li]
            if g.ndim == 1:
                grads[2 * li] = np.outer(a, g)
                grads[2 * li + 1] = g.copy()
            else:
                grads[2 * li] = a.T @ g
                grads[2 * li + 1] = g.sum(axis=0)
            if li:
                g = (g @ self.weights[li].T) * (a > 0)
        return grads


def forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def backward(net: Mlp, x, grad_out) -> list[np.ndarray]:
    _, acts = net.forward_cached(x)
    return net.backward(acts, grad_out)


@dataclass
class Adam:
    """Adam optimizer state for one network."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    t: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def step(self, net: Mlp, grads: list[np.ndarray]) -> None:
        params = net.params
        if len(grads) != len(params):
            raise NetworkError("gradient list does not match parameters")
        for g, p in zip(grads, params):
            if g.shape != p.shape:
                raise NetworkError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        g = np.concatenate([g.ravel() for g in grads])
        sq = float(np.dot(g, g))
        if not np.isfinite(sq):
            raise NetworkError("non-finite gradient")
        if self.max_grad_norm is not None and sq > self.max_grad_norm**2:
            g *= self.max_grad_norm / np.sqrt(sq)
        if len(self.m) == 0:
            self.m = np.zeros_like(net.flat)
            self.v = np.zeros_like(net.flat)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        m, v = self.m, self.v
        tmp = np.multiply(g, 1.0 - self.beta1)
        m *= self.beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - self.beta2
        v *= self.beta2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr / c1
        net.flat -= tmp


def optimize_step(net: Mlp, grads, optimizer: Adam) -> Mlp:
    optimizer.step(net, grads)
    return net


# --- masking -----------------------------------------------------------------


@dataclass(frozen=True)
class MaskedOutput:
    raw: np.ndarray
    mask: np.ndarray
    masked: np.ndarray

    def argmax(self) -> int:
        return int(np.argmax(self.masked))


def apply_mask(raw, mask, *, literal_zero: bool = False) -> MaskedOutput:
    """Suppress invalid actions.

    By default invalid entries become ``-1e9``. ``literal_zero`` multiplies
    by the mask instead, which lets invalid actions win whenever every valid
    value is negative; it exists for comparison only.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if raw.shape != mask.shape:
        raise NetworkError(f"output shape {raw.shape} and mask shape {mask.shape} differ")
    if not mask.any(axis=-1).all():
        raise NetworkError("action mask has no valid entry")
    masked = raw * mask if literal_zero else np.where(mask, raw, MASK_SENTINEL)
    return MaskedOutput(raw, mask, masked)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, MASK_SENTINEL)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --- persistence -------------------------------------------------------------


def _payload(net: Mlp) -> bytes:
    return np.ascontiguousarray(net.flat, dtype="<f8").tobytes()


def save_weights(net: Mlp, path, meta: dict | None = None) -> None:
    payload = _payload(net)
    header = {"sizes": net.sizes, "sha256": hashlib.sha256(payload).hexdigest(), "meta": meta or {}}
    blob = MAGIC + f" {VERSION}\n".encode() + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    Path(path).write_bytes(blob)


def read_weights(path, expect_sizes=None) -> tuple[Mlp, dict]:
    """Load a weight file; returns the network and the metadata dict."""
    blob = Path(path).read_bytes()
    first, _, rest = blob.partition(b"\n")
    if first != MAGIC + f" {VERSION}".encode():
        raise NetworkError(f"{path}: not a version-{VERSION} weight file")
    header_line, sep, payload = rest.partition(b"\n")
    try:
        header = json.loads(header_line)
        sizes = [int(s) for s in header["sizes"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise NetworkError(f"{path}: corrupted header") from exc
    if not sep or hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise NetworkError(f"{path}: corrupted payload")
    if expect_sizes is not None and list(expect_sizes) != sizes:
        raise NetworkError(f"{path}: architecture {sizes} does not match expected {list(expect_sizes)}")
    net = Mlp(sizes, zero=True)
    expected_len = sum(p.size for p in net.params) * 8
    if len(payload) != expected_len:
        raise NetworkError(f"{path}: payload has {len(payload)} bytes, expected {expected_len}")
    net.flat[...] = np.frombuffer(payload, dtype="<f8")
    return net, header["meta"]


def load_weights(path, expect_sizes=None) -> Mlp:
    return read_weights(path, expect_sizes)[0]
