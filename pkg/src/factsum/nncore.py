"""Minimal differentiable numeric kernel on top of numpy float64 arrays.

Every forward op used by the summarization model has a hand-written
analytic backward, so the whole model can be verified against central
finite differences without an autodiff framework.  Parameters and
gradients live in flat ``{name: ndarray}`` dicts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

CLIP_LO = -5.0
CLIP_HI = 5.0


def sigmoid(x):
    # numerically stable split by sign
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits, axis=-1):
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def masked_softmax(scores, mask):
    """Softmax over the positions where mask==1; masked entries get 0.

    An all-zero mask yields the all-zero vector (consumers then produce a
    zero context).  Works on a vector or batched along the last axis.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    neg = np.where(mask > 0, scores, -np.inf)
    mx = np.max(neg, axis=-1, keepdims=True)
    # rows with no unmasked entry: shift by 0 to avoid inf-inf
    mx = np.where(np.isfinite(mx), mx, 0.0)
    ex = np.exp(neg - mx)  # exp(-inf) = 0, so masked scores never leak
    z = np.sum(ex, axis=-1, keepdims=True)
    return np.where(z > 0, ex / np.where(z > 0, z, 1.0), 0.0)


def masked_softmax_backward(alpha, dalpha):
    """Gradient of masked_softmax w.r.t. the raw scores.

    Masked positions have alpha==0, so they automatically receive zero
    gradient.  Shapes follow the forward call.
    """
    inner = np.sum(alpha * dalpha, axis=-1, keepdims=True)
    return alpha * (dalpha - inner)


@dataclass
class GruParams:
    """One GRU cell: input, recurrent and bias weights for the z/r/h gates.

    W_*: (input_dim, hidden), U_*: (hidden, hidden), b_*: (hidden,).
    """

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    GATES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")

    @classmethod
    def from_dict(cls, params, prefix):
        return cls(*(params[f"{prefix}.{g}"] for g in cls.GATES))

    @classmethod
    def register(cls, params, prefix, input_dim, hidden_dim, rng):
        for g in ("z", "r", "h"):
            params[f"{prefix}.W_{g}"] = glorot(rng, input_dim, hidden_dim)
            params[f"{prefix}.U_{g}"] = glorot(rng, hidden_dim, hidden_dim)
            params[f"{prefix}.b_{g}"] = np.zeros(hidden_dim)


def gru_cell(x, h_prev, p: GruParams):
    """Single GRU update; x (..., input_dim), h_prev (..., hidden)."""
    h, _ = gru_cell_fwd(x, h_prev, p)
    return h


def gru_cell_fwd(x, h_prev, p: GruParams):
    if x.shape[-1] != p.W_z.shape[0] or h_prev.shape[-1] != p.U_z.shape[0]:
        raise ValueError(
            f"gru_cell dimension mismatch: x {x.shape}, h {h_prev.shape}, "
            f"W {p.W_z.shape}, U {p.U_z.shape}"
        )
    z = sigmoid(x @ p.W_z + h_prev @ p.U_z + p.b_z)
    r = sigmoid(x @ p.W_r + h_prev @ p.U_r + p.b_r)
    rh = r * h_prev
    h_tilde = np.tanh(x @ p.W_h + rh @ p.U_h + p.b_h)
    h = (1.0 - z) * h_prev + z * h_tilde
    return h, (x, h_prev, z, r, rh, h_tilde)


def gru_cell_bwd(dh, cache, p: GruParams, g: GruParams):
    """Backward through one GRU update.

    Accumulates parameter gradients into ``g`` (same field layout as the
    params) and returns (dx, dh_prev).
    """
    x, h_prev, z, r, rh, h_tilde = cache
    dz = dh * (h_tilde - h_prev)
    dh_tilde = dh * z
    dh_prev = dh * (1.0 - z)

    da_h = dh_tilde * (1.0 - h_tilde * h_tilde)
    g.W_h += x.T @ da_h
    g.U_h += rh.T @ da_h
    g.b_h += da_h.sum(axis=0)
    drh = da_h @ p.U_h.T
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    dx = da_h @ p.W_h.T

    da_z = dz * z * (1.0 - z)
    g.W_z += x.T @ da_z
    g.U_z += h_prev.T @ da_z
    g.b_z += da_z.sum(axis=0)
    dh_prev = dh_prev + da_z @ p.U_z.T
    dx = dx + da_z @ p.W_z.T

    da_r = dr * r * (1.0 - r)
    g.W_r += x.T @ da_r
    g.U_r += h_prev.T @ da_r
    g.b_r += da_r.sum(axis=0)
    dh_prev = dh_prev + da_r @ p.U_r.T
    dx = dx + da_r @ p.W_r.T
    return dx, dh_prev


@dataclass
class AttnParams:
    """Additive attention scorer: e = v . tanh(W_q s + W_k h + b)."""

    W_q: np.ndarray
    W_k: np.ndarray
    b: np.ndarray
    v: np.ndarray

    FIELDS = ("W_q", "W_k", "b", "v")

    @classmethod
    def from_dict(cls, params, prefix):
        return cls(*(params[f"{prefix}.{f}"] for f in cls.FIELDS))

    @classmethod
    def register(cls, params, prefix, query_dim, key_dim, attn_dim, rng):
        params[f"{prefix}.W_q"] = glorot(rng, query_dim, attn_dim)
        params[f"{prefix}.W_k"] = glorot(rng, key_dim, attn_dim)
        params[f"{prefix}.b"] = np.zeros(attn_dim)
        params[f"{prefix}.v"] = glorot(rng, attn_dim, 1)[:, 0]


def attention_score(s, h, p: AttnParams):
    """Unnormalized additive attention energy for one query/key pair."""
    if s.shape[-1] != p.W_q.shape[0] or h.shape[-1] != p.W_k.shape[0]:
        raise ValueError("attention_score dimension mismatch")
    return np.tanh(s @ p.W_q + h @ p.W_k + p.b) @ p.v


def dropout_mask(rng, shape, p):
    """Inverted-dropout multiplier: keep with prob 1-p, scale by 1/(1-p)."""
    if p <= 0.0:
        return np.ones(shape)
    keep = (rng.random(shape) >= p).astype(np.float64)
    return keep / (1.0 - p)


def glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update, in place; returns (params, state)."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        gr = grads[name]
        if gr.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(gr)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * gr
        v *= b2
        v += (1.0 - b2) * gr * gr
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_gradients(grads, lo=CLIP_LO, hi=CLIP_HI):
    """Componentwise value clipping to [lo, hi], in place."""
    if isinstance(grads, dict):
        for gr in grads.values():
            np.clip(gr, lo, hi, out=gr)
        return grads
    np.clip(grads, lo, hi, out=grads)
    return grads


def rel_error(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def finite_diff_check(loss_fn, grad_fn, params, epsilon=1e-5):
    """Compare analytic gradients against central finite differences.

    loss_fn(params) -> float must be deterministic (reseed any internal
    randomness per call).  Returns the max over all parameter components
    of |a - n| / max(1e-8, |a| + |n|).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    analytic = grad_fn(params)
    worst = 0.0
    for name, p in params.items():
        a_grad = analytic[name]
        flat = p.reshape(-1)
        a_flat = np.asarray(a_grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn(params)
            flat[i] = orig - epsilon
            down = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while probing {name}")
            numeric = (up - down) / (2.0 * epsilon)
            worst = max(worst, rel_error(a_flat[i], numeric))
    return worst


# --- checkpoint container ------------------------------------------------
#
# Layout: magic, u32 version, u32 meta length + UTF-8 JSON meta, u32 entry
# count, then per entry: u16 name length + name, u8 dtype tag, u8 ndim,
# u32 dims, raw little-endian values.  Round-trips bit-exactly at the
# stored precision.

CKPT_MAGIC = b"FSUMCKPT"
CKPT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {"f4": 0, "f8": 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, meta=None, precision="f4"):
    """Write named tensors plus a JSON meta blob; default single precision."""
    if precision not in _TAG_FOR:
        raise CheckpointError(f"unknown precision {precision!r}")
    tag = _TAG_FOR[precision]
    dtype = _DTYPE_TAGS[tag]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype=dtype)  # tobytes emits C order
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, meta) at the stored precision."""
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"unknown dtype tag {tag}")
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            dtype = _DTYPE_TAGS[tag]
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(n * dtype.itemsize)
            if len(raw) != n * dtype.itemsize:
                raise CheckpointError(f"truncated entry {name!r}")
            params[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        return params, meta
