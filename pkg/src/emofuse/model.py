"""The classification head: attention pooling, dense stack, weighted CE loss.

Parameters live in a flat dict keyed by name ("pool.u", "proj.w",
"hidden0.w", ..., "out.b") so the optimizer and the checkpoint format can
treat them uniformly. Forward passes return a cache consumed by the matching
backward pass; gradients are exact and validated by `numerics.grad_check`.

Checkpoint file layout (little-endian):

    magic "EMCK" | version u16 = 1 | n_blocks u32
    per block: name_len u16 | name UTF-8 | rank u8 | dims u32 each | float32 data
    metadata:  hash_len u16 | config hash UTF-8 | best val macro F1 f64 | epoch u32
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, ParseError
from .numerics import (
    Rng,
    dropout,
    dropout_backward,
    gelu,
    gelu_backward,
    get_dtype,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    softmax,
)

CHECKPOINT_MAGIC = b"EMCK"
CHECKPOINT_VERSION = 1


def _xavier(rng: Rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(get_dtype())


def init_pooling(embed_dim: int, rng: Rng) -> np.ndarray:
    """Xavier-uniform pooling vector u (fan_in = E, fan_out = 1)."""
    if embed_dim < 1:
        raise DimensionError(f"embed_dim must be >= 1, got {embed_dim}")
    return _xavier(rng, embed_dim, 1, embed_dim)


def init_model(embed_dim: int, hidden_width: int, hidden_layers: int, n_classes: int, rng: Rng) -> dict[str, np.ndarray]:
    """Fresh parameter dict: pooling vector, projection, hidden stack, output.

    Matrices are Xavier-uniform, biases zero, layer-norm gain/shift one/zero.
    Each parameter gets its own child stream so init is order-independent.
    """
    dtype = get_dtype()
    params: dict[str, np.ndarray] = {}
    params["pool.u"] = init_pooling(embed_dim, rng.child("pool.u"))
    params["proj.w"] = _xavier(rng.child("proj.w"), embed_dim, hidden_width, (embed_dim, hidden_width))
    params["proj.b"] = np.zeros(hidden_width, dtype=dtype)
    for i in range(hidden_layers):
        params[f"hidden{i}.w"] = _xavier(
            rng.child(f"hidden{i}.w"), hidden_width, hidden_width, (hidden_width, hidden_width)
        )
        params[f"hidden{i}.b"] = np.zeros(hidden_width, dtype=dtype)
        params[f"hidden{i}.gamma"] = np.ones(hidden_width, dtype=dtype)
        params[f"hidden{i}.beta"] = np.zeros(hidden_width, dtype=dtype)
    params["out.w"] = _xavier(rng.child("out.w"), hidden_width, n_classes, (hidden_width, n_classes))
    params["out.b"] = np.zeros(n_classes, dtype=dtype)
    return params


def n_hidden_layers(params: dict[str, np.ndarray]) -> int:
    return sum(1 for k in params if k.startswith("hidden") and k.endswith(".w"))


def model_dims(params: dict[str, np.ndarray]) -> tuple[int, int, int, int]:
    """(embed_dim, hidden_width, hidden_layers, n_classes) from parameter shapes."""
    return (
        params["pool.u"].shape[0],
        params["proj.w"].shape[1],
        n_hidden_layers(params),
        params["out.b"].shape[0],
    )


# ---------------------------------------------------------------------------
# Attention pooling
# ---------------------------------------------------------------------------


def attn_pool_forward(h: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool T x E frames into one E-vector.

    Scores are scaled dot products s_t = h_t . u / sqrt(E); the weights are
    their stable softmax and c = sum_t w_t h_t. Returns (c, w).
    """
    if h.ndim != 2:
        raise DimensionError(f"hidden state must be T x E, got ndim={h.ndim}")
    if h.shape[0] == 0:
        raise DimensionError("attention pooling needs at least one frame")
    if h.shape[1] != u.shape[0]:
        raise DimensionError(f"frame dim {h.shape[1]} != pooling dim {u.shape[0]}")
    scores = (h @ u) / math.sqrt(h.shape[1])
    w = softmax(scores)
    c = w @ h
    return c, w


def attn_pool_backward(h: np.ndarray, u: np.ndarray, w: np.ndarray, dc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dh, du) of c = sum_t w_t h_t through the softmax coupling."""
    inv_sqrt_e = 1.0 / math.sqrt(h.shape[1])
    g = h @ dc  # dL/dw_t
    ds = w * (g - np.dot(w, g))  # softmax backward on scores
    du = (ds @ h) * inv_sqrt_e
    dh = np.outer(w, dc) + np.outer(ds, u) * inv_sqrt_e
    return dh, du


# ---------------------------------------------------------------------------
# Classifier stack
# ---------------------------------------------------------------------------


def classifier_forward(c: np.ndarray, params: dict[str, np.ndarray], p: float = 0.0, mode: str = "eval", rng: Rng | None = None):
    """Projection, then hidden blocks of linear -> dropout -> layer norm -> GELU,
    then the output linear. Returns (logits, cache)."""
    cache: dict = {"c": c, "mode": mode, "p": p}
    x = linear_forward(c, params["proj.w"], params["proj.b"])
    cache["proj_in"] = c
    blocks = []
    for i in range(n_hidden_layers(params)):
        lin_in = x
        a = linear_forward(x, params[f"hidden{i}.w"], params[f"hidden{i}.b"])
        d, mask = dropout(a, p, mode, rng)
        n, ln_cache = layer_norm_forward(d, params[f"hidden{i}.gamma"], params[f"hidden{i}.beta"])
        x = gelu(n)
        blocks.append({"lin_in": lin_in, "mask": mask, "ln_cache": ln_cache, "n": n})
    cache["blocks"] = blocks
    cache["out_in"] = x
    logits = linear_forward(x, params["out.w"], params["out.b"])
    return logits, cache


def classifier_backward(params: dict[str, np.ndarray], cache: dict, dlogits: np.ndarray):
    """Gradients (dc, grads dict) through the classifier stack."""
    grads: dict[str, np.ndarray] = {}
    dx, grads["out.w"], grads["out.b"] = linear_backward(cache["out_in"], params["out.w"], dlogits)
    for i in reversed(range(len(cache["blocks"]))):
        blk = cache["blocks"][i]
        dn = gelu_backward(blk["n"], dx)
        dd, grads[f"hidden{i}.gamma"], grads[f"hidden{i}.beta"] = layer_norm_backward(
            blk["ln_cache"], params[f"hidden{i}.gamma"], dn
        )
        da = dropout_backward(blk["mask"], cache["p"], dd)
        dx, grads[f"hidden{i}.w"], grads[f"hidden{i}.b"] = linear_backward(
            blk["lin_in"], params[f"hidden{i}.w"], da
        )
    dc, grads["proj.w"], grads["proj.b"] = linear_backward(cache["proj_in"], params["proj.w"], dx)
    return dc, grads


def model_forward(h: np.ndarray, params: dict[str, np.ndarray], p: float = 0.0, mode: str = "eval", rng: Rng | None = None):
    """Attention pooling followed by the classifier. Returns (logits, cache)."""
    c, w = attn_pool_forward(h, params["pool.u"])
    logits, clf_cache = classifier_forward(c, params, p, mode, rng)
    return logits, {"h": h, "w": w, "clf": clf_cache}


def model_backward(params: dict[str, np.ndarray], cache: dict, dlogits: np.ndarray):
    """Gradients (dh, grads dict incl. 'pool.u') for the full head."""
    dc, grads = classifier_backward(params, cache["clf"], dlogits)
    dh, grads["pool.u"] = attn_pool_backward(cache["h"], params["pool.u"], cache["w"], dc)
    return dh, grads


def predict(h: np.ndarray, params: dict[str, np.ndarray]) -> int:
    """Eval-mode argmax class; ties break toward the lower index."""
    logits, _ = model_forward(h, params)
    return int(np.argmax(logits))


# ---------------------------------------------------------------------------
# Loss and class weights
# ---------------------------------------------------------------------------


def weighted_cross_entropy(logits: np.ndarray, label: int, weights: np.ndarray):
    """Per-sample weighted CE: loss = w[label] * (-log softmax(logits)[label]).

    Returns (loss, dlogits) with dlogits = w[label] * (softmax - onehot).
    Batch normalization by the sum of sample weights is the caller's job.
    """
    if not 0 <= label < logits.shape[0]:
        raise DataError(f"label {label} out of range for {logits.shape[0]} classes")
    probs = softmax(logits.astype(np.float64))
    w = float(weights[label])
    # log-sum-exp form avoids log(0) for very confident wrong logits
    shifted = logits.astype(np.float64) - logits.max()
    log_prob = shifted[label] - math.log(np.exp(shifted).sum())
    loss = -w * log_prob
    dlogits = w * probs
    dlogits[label] -= w
    return float(loss), dlogits.astype(logits.dtype)


def compute_class_weights(counts) -> np.ndarray:
    """Balanced inverse-frequency weights w_k = N / (K * n_k)."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        missing = int(np.argmin(counts))
        raise DataError(f"class {missing} absent from the training split")
    return (counts.sum() / (len(counts) * counts)).astype(get_dtype())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class CheckpointMeta:
    config_hash: str
    best_val_f1: float
    epoch: int


def write_checkpoint(params: dict[str, np.ndarray], meta: CheckpointMeta) -> bytes:
    out = [struct.pack("<4sHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    h = meta.config_hash.encode("utf-8")
    out.append(struct.pack("<H", len(h)))
    out.append(h)
    out.append(struct.pack("<dI", meta.best_val_f1, meta.epoch))
    return b"".join(out)


def read_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], CheckpointMeta]:
    if len(data) < 10:
        raise ParseError("checkpoint header truncated")
    magic, version, n_blocks = struct.unpack_from("<4sHI", data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    pos = 10
    params: dict[str, np.ndarray] = {}
    dtype = get_dtype()
    try:
        for _ in range(n_blocks):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            params[name] = arr.astype(dtype)
        (hash_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        config_hash = data[pos : pos + hash_len].decode("utf-8")
        pos += hash_len
        best_f1, epoch = struct.unpack_from("<dI", data, pos)
        pos += 12
    except (struct.error, ValueError) as exc:
        raise ParseError(f"checkpoint truncated or corrupt: {exc}") from exc
    if pos != len(data):
        raise ParseError(f"checkpoint has {len(data) - pos} trailing bytes")
    return params, CheckpointMeta(config_hash, best_f1, epoch)


def save_checkpoint(path, params: dict[str, np.ndarray], meta: CheckpointMeta) -> None:
    with open(path, "wb") as fh:
        fh.write(write_checkpoint(params, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], CheckpointMeta]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh.read())
