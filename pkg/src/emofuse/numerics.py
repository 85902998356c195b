"""Dense kernels with hand-derived backward passes, AdamW, and the pinned RNG.

Every forward op here has a matching backward that returns exact analytic
gradients; `grad_check` compares them against central finite differences.
Two float precisions exist package-wide: float32 for training (the default)
and float64 for gradient verification, switched via `set_dtype`/`precision`.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ConfigError, DimensionError, TrainingError

# ---------------------------------------------------------------------------
# Precision mode
# ---------------------------------------------------------------------------

_DTYPE = np.dtype(np.float32)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def get_dtype() -> np.dtype:
    """Current global float dtype (float32 training / float64 verification)."""
    return _DTYPE


def set_dtype(name: str) -> None:
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ConfigError(f"unsupported precision {name!r} (float32 or float64)")
    _DTYPE = np.dtype(name)


@contextmanager
def precision(name: str):
    """Temporarily switch the global precision, e.g. `with precision("float64")`."""
    old = _DTYPE.name
    set_dtype(name)
    try:
        yield
    finally:
        set_dtype(old)


def as_tensor(data, rows: int | None = None, cols: int | None = None, *, checked: bool = True) -> np.ndarray:
    """Build a 2-D array in the current dtype, validating shape and finiteness.

    `rows`/`cols`, when given, must match the flattened data length.
    """
    arr = np.asarray(data, dtype=_DTYPE)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise DimensionError(f"data length {arr.size} != {rows}x{cols}")
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise DimensionError(f"expected 2-D tensor, got ndim={arr.ndim}")
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# Deterministic splittable RNG
# ---------------------------------------------------------------------------
#
# The project-wide generator is numpy's Philox (counter-based, 4x64) keyed
# directly by a 64-bit seed. Child streams are keyed by
# blake2b(seed || labels), so a child's draws depend only on (seed, labels),
# never on how much the parent or siblings have drawn.


class Rng:
    """Philox-backed stream with label-derived, order-independent children."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, *labels: object) -> "Rng":
        """Derive an independent stream from this seed and the given labels."""
        tag = "|".join(str(l) for l in labels)
        h = hashlib.blake2b(f"{self.seed}|{tag}".encode(), digest_size=8)
        return Rng(int.from_bytes(h.digest(), "little"))

    # Draw methods delegate to the underlying Generator.
    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]


# ---------------------------------------------------------------------------
# Layers: forward / backward pairs
# ---------------------------------------------------------------------------


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x @ w + b. x is (N, D_in) or (D_in,), w (D_in, D_out), b (D_out,)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: x has {x.shape[-1]} features, w expects {w.shape[0]}")
    if w.shape[1] != b.shape[0]:
        raise DimensionError(f"linear: w outputs {w.shape[1]}, bias has {b.shape[0]}")
    return x @ w + b


def linear_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Gradients (dx, dw, db) of y = x @ w + b for upstream dy."""
    if x.ndim == 1:
        dw = np.outer(x, dy)
        db = dy.copy()
        dx = dy @ w.T
    else:
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ w.T
    return dx, dw, db


def layer_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalize the last axis with population variance; returns (y, cache)."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)  # population variance
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    return y, (xhat, inv_std)


def layer_norm_backward(cache, gamma: np.ndarray, dy: np.ndarray):
    """Gradients (dx, dgamma, dbeta) for layer_norm_forward."""
    xhat, inv_std = cache
    d = xhat.shape[-1]
    dxhat = dy * gamma
    # dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    if xhat.ndim == 1:
        dgamma = dy * xhat
        dbeta = dy.copy()
    else:
        dgamma = (dy * xhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
    return dx, dgamma, dbeta


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU: x * Phi(x), with Phi the standard normal CDF via erf."""
    return x * 0.5 * (1.0 + special.erf(x / _SQRT2))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """dy * (Phi(x) + x * phi(x))."""
    phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    cdf = 0.5 * (1.0 + special.erf(x / _SQRT2))
    return dy * (cdf + x * phi)


def dropout(x: np.ndarray, p: float, mode: str, rng: Rng | None):
    """Inverted dropout. Returns (y, mask); mask is None on the identity path.

    Train mode zeroes each element with probability p and scales survivors by
    1/(1-p); eval mode returns the input untouched.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x, None
    if mode != "train":
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ConfigError("dropout in train mode requires an rng")
    keep = rng.random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    return x * keep * scale, keep


def dropout_backward(mask: np.ndarray | None, p: float, dy: np.ndarray) -> np.ndarray:
    if mask is None:
        return dy
    return dy * mask * np.asarray(1.0 / (1.0 - p), dtype=dy.dtype)


def softmax(x: np.ndarray) -> np.ndarray:
    """Max-subtracted stable softmax along the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    """Moments and step count for one parameter, plus the update hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 5e-5
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState) -> np.ndarray:
    """One bias-corrected Adam update with decoupled weight decay.

    Mutates `state` in place and returns the updated parameter.
    """
    if param.shape != grad.shape:
        raise DimensionError(f"adamw: param {param.shape} vs grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(grad)))[0]
        raise TrainingError(f"non-finite gradient at index {tuple(bad)} (step {state.t + 1})")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return param - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)) - state.lr * state.weight_decay * param


@dataclass
class AdamW:
    """Optimizer over a dict of named parameters, one AdamWState per name."""

    lr: float = 5e-5
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamWState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update every parameter in place (dict values replaced)."""
        for name, p in params.items():
            st = self.states.get(name)
            if st is None:
                st = AdamWState(m=np.zeros_like(p), v=np.zeros_like(p))
                self.states[name] = st
            st.lr = self.lr
            st.weight_decay = self.weight_decay
            st.beta1, st.beta2, st.eps = self.beta1, self.beta2, self.eps
            try:
                params[name] = adamw_step(p, grads[name], st)
            except TrainingError as exc:
                raise TrainingError(f"parameter {name!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, point: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f(x)` must return (scalar value, analytic gradient w.r.t. x). Runs only
    in float64 verification mode; float32 finite differences are meaningless
    at eps=1e-5.
    """
    point = np.asarray(point)
    if point.dtype != np.float64:
        raise ConfigError("grad_check requires a float64 point (verification mode)")
    _, analytic = f(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise DimensionError(f"analytic gradient {analytic.shape} vs point {point.shape}")
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up, _ = f(point)
        flat[i] = orig - eps
        down, _ = f(point)
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
