"""Transformer building blocks: RMS normalization, gated MLP, rotary positions,
and the attention variants the energy model needs.

The interesting construction is paired-stream causal attention.  The model
carries two aligned streams: observed states z_o and, for every position, a
candidate prediction z_p of the *next* element.  Each prediction must see the
context up to its slot and itself, never other predictions, never the future.
Two implementations are provided:

* `pair_attention_efficient` builds the S x (So+1) score matrix directly:
  observed-key scores get one extra column appended, the superdiagonal (which
  would hold the key of the very token being predicted) is zeroed by mask
  multiplication and replaced with each prediction's self score
  sum(q_p * k_p)/sqrt(d_k), a single softmax normalizes each row, and the
  superdiagonal weight is peeled back off to weight v_p while the rest
  weights v_o.

* `pair_attention_simplified` concatenates both streams into one length-2S
  sequence and runs ordinary attention under a generalized causal mask.  It
  costs roughly 4x the FLOPs and exists as the oracle the efficient version
  is checked against.

Observed streams may carry `prefix` leading slots (the learnable step
embedding) that every row, observed or predicted, is allowed to attend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .autodiff import (
    ContractViolation,
    Value,
    concat,
    gather_rows,
    masked_fill,
    matmul,
    mean,
    mul,
    reshape,
    silu,
    slice_,
    softmax,
    sqrt,
    sum_,
    transpose,
    unslice,
)

NEG_FILL = -1e30  # large finite negative; exp underflows to exactly 0.0


@dataclass
class AttentionConfig:
    heads: int
    head_dim: int
    rotary_base: Optional[float] = 10000.0
    causal: bool = True

    @property
    def embed_dim(self) -> int:
        return self.heads * self.head_dim

    def validate_dim(self, dim: int) -> None:
        if self.heads * self.head_dim != dim:
            raise ContractViolation(
                f"heads*head_dim = {self.heads}*{self.head_dim} != embed dim {dim}")


@dataclass
class SequencePair:
    """Aligned observed/prediction streams.

    z_o: [batch, So, D] observed states; z_p: [batch, S, D] predictions, one
    per position (the prediction for the element following slot t).  Normally
    So == S; So = S + prefix when always-visible prefix slots (the step
    embedding) are prepended to the observed stream.
    """

    z_o: Value
    z_p: Value

    def __post_init__(self):
        if self.z_o.ndim != 3 or self.z_p.ndim != 3:
            raise ContractViolation("SequencePair streams must be [batch, length, dim]")
        bo, so, do = self.z_o.shape
        bp, sp, dp = self.z_p.shape
        if bo != bp or do != dp or so < sp:
            raise ContractViolation(
                f"incompatible pair shapes {self.z_o.shape} vs {self.z_p.shape}")

    @property
    def prefix(self) -> int:
        return self.z_o.shape[1] - self.z_p.shape[1]


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> Value:
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return Value(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def rms_normalize(x: Value, gain: Value, eps: float = 1e-5) -> Value:
    scale = sqrt(mean(mul(x, x), axis=-1, keepdims=True) + eps)
    return mul(x / scale, gain)


def init_mlp_params(rng: np.random.Generator, dim: int, hidden: int) -> dict:
    return {
        "w_in": xavier_uniform(rng, dim, hidden),
        "w_gate": xavier_uniform(rng, dim, hidden),
        "w_out": xavier_uniform(rng, hidden, dim),
    }


def gated_mlp(x: Value, params: dict) -> Value:
    return matmul(mul(silu(matmul(x, params["w_in"])), matmul(x, params["w_gate"])),
                  params["w_out"])


def rotary_encode(x: Value, positions: np.ndarray, base: float) -> Value:
    """Rotate feature pairs of x [..., S, d] by position-dependent angles."""
    d = x.shape[-1]
    if d % 2:
        raise ContractViolation(f"rotary needs an even feature dim, got {d}")
    positions = np.asarray(positions, dtype=np.int64)
    inv_freq = base ** (-np.arange(d // 2, dtype=np.float64) * 2.0 / d)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    cos = Value(np.cos(angles))
    sin = Value(np.sin(angles))
    even_key = (Ellipsis, slice(0, None, 2))
    odd_key = (Ellipsis, slice(1, None, 2))
    even, odd = x[even_key], x[odd_key]
    rot_even = mul(even, cos) - mul(odd, sin)
    rot_odd = mul(even, sin) + mul(odd, cos)
    return unslice(rot_even, even_key, x.shape) + unslice(rot_odd, odd_key, x.shape)


def init_attention_params(rng: np.random.Generator, dim: int, shared_pair: bool = True) -> dict:
    params = {
        "wq": xavier_uniform(rng, dim, dim),
        "wk": xavier_uniform(rng, dim, dim),
        "wv": xavier_uniform(rng, dim, dim),
        "wo": xavier_uniform(rng, dim, dim),
    }
    if not shared_pair:
        params["wq_p"] = xavier_uniform(rng, dim, dim)
        params["wk_p"] = xavier_uniform(rng, dim, dim)
        params["wv_p"] = xavier_uniform(rng, dim, dim)
    return params


def split_heads(x: Value, heads: int) -> Value:
    b, s, d = x.shape
    return transpose(reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Value) -> Value:
    b, h, s, dk = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, s, h * dk))


def _project(x: Value, w: Value, cfg: AttentionConfig,
             positions: Optional[np.ndarray]) -> Value:
    out = split_heads(matmul(x, w), cfg.heads)
    if cfg.rotary_base is not None and positions is not None:
        out = rotary_encode(out, positions, cfg.rotary_base)
    return out


@lru_cache(maxsize=64)
def causal_mask(s: int) -> np.ndarray:
    m = np.triu(np.ones((s, s), dtype=bool), k=1)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def pair_row_mask(s: int, so: int) -> np.ndarray:
    """Disallowed entries of the padded [S, So+1] prediction score matrix.

    Row i may attend observed columns 0..i+prefix and its own (superdiagonal)
    column i+prefix+1, with prefix = so - s."""
    prefix = so - s
    cols = np.arange(so + 1)[None, :]
    rows = np.arange(s)[:, None]
    m = cols > rows + prefix + 1
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def generalized_causal_mask(s: int, so: int) -> np.ndarray:
    """Disallowed entries of the [So+S, So+S] concatenated-stream matrix.

    Observed row i: observed columns <= i only.  Prediction row i: observed
    columns <= i+prefix plus its own prediction column.  Nothing attends other
    predictions or the future."""
    prefix = so - s
    total = so + s
    m = np.ones((total, total), dtype=bool)
    for i in range(so):
        m[i, : i + 1] = False
    for i in range(s):
        m[so + i, : i + prefix + 1] = False
        m[so + i, so + i] = False
    m.setflags(write=False)
    return m


def _attend(q: Value, k: Value, v: Value, mask: Optional[np.ndarray], head_dim: int) -> Value:
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    if mask is not None:
        scores = masked_fill(scores, mask, NEG_FILL)
    return matmul(softmax(scores, axis=-1), v)


def standard_causal_attention(x: Value, cfg: AttentionConfig, params: dict,
                              positions: Optional[np.ndarray] = None) -> Value:
    cfg.validate_dim(x.shape[-1])
    s = x.shape[1]
    if positions is None:
        positions = np.arange(s)
    q = _project(x, params["wq"], cfg, positions)
    k = _project(x, params["wk"], cfg, positions)
    v = split_heads(matmul(x, params["wv"]), cfg.heads)
    out = _attend(q, k, v, causal_mask(s), cfg.head_dim)
    return matmul(merge_heads(out), params["wo"])


def bidirectional_attention(x: Value, cfg: AttentionConfig, params: dict,
                            positions: Optional[np.ndarray] = None) -> Value:
    cfg.validate_dim(x.shape[-1])
    if positions is None and cfg.rotary_base is not None:
        positions = np.arange(x.shape[1])
    q = _project(x, params["wq"], cfg, positions)
    k = _project(x, params["wk"], cfg, positions)
    v = split_heads(matmul(x, params["wv"]), cfg.heads)
    out = _attend(q, k, v, None, cfg.head_dim)
    return matmul(merge_heads(out), params["wo"])


def _pair_projections(pair: SequencePair, cfg: AttentionConfig, params: dict):
    so = pair.z_o.shape[1]
    s = pair.z_p.shape[1]
    prefix = so - s
    pos_o = np.arange(so)
    pos_p = np.arange(s) + prefix + 1  # the prediction for slot t carries position t+1
    wq_p = params.get("wq_p", params["wq"])
    wk_p = params.get("wk_p", params["wk"])
    wv_p = params.get("wv_p", params["wv"])
    q_o = _project(pair.z_o, params["wq"], cfg, pos_o)
    k_o = _project(pair.z_o, params["wk"], cfg, pos_o)
    v_o = split_heads(matmul(pair.z_o, params["wv"]), cfg.heads)
    q_p = _project(pair.z_p, wq_p, cfg, pos_p)
    k_p = _project(pair.z_p, wk_p, cfg, pos_p)
    v_p = split_heads(matmul(pair.z_p, wv_p), cfg.heads)
    return q_o, k_o, v_o, q_p, k_p, v_p, prefix


def pair_attention_efficient(pair: SequencePair, cfg: AttentionConfig, params: dict) -> SequencePair:
    """Superdiagonal construction; see module docstring.

    The observed stream is updated exactly as standard causal attention,
    independent of z_p.  The padded prediction score matrix is manipulated on
    a flattened view: for an [S, So+1] matrix the superdiagonal (row i, column
    i+prefix+1) lies at flat offsets prefix+1, prefix+1+(So+2), ...: a plain
    strided slice, which keeps every mask operation an exact 0/1 multiply.
    """
    cfg.validate_dim(pair.z_o.shape[-1])
    b = pair.z_o.shape[0]
    so, s = pair.z_o.shape[1], pair.z_p.shape[1]
    q_o, k_o, v_o, q_p, k_p, v_p, prefix = _pair_projections(pair, cfg, params)
    h = cfg.heads
    scale = 1.0 / math.sqrt(cfg.head_dim)

    out_o = _attend(q_o, k_o, v_o, causal_mask(so), cfg.head_dim)

    scores = mul(matmul(q_p, transpose(k_o, (0, 1, 3, 2))), scale)  # [B,H,S,So]
    padded = concat([scores, Value(np.zeros((b, h, s, 1)))], axis=-1)
    flat = reshape(padded, (b, h, s * (so + 1)))
    sd_key = (Ellipsis, slice(prefix + 1, None, so + 2))
    sd_flat_mask = np.zeros(s * (so + 1), dtype=bool)
    sd_flat_mask[prefix + 1 :: so + 2] = True

    self_scores = mul(sum_(mul(q_p, k_p), axis=-1), scale)  # [B,H,S]
    flat = masked_fill(flat, sd_flat_mask, 0.0) + unslice(self_scores, sd_key, flat.shape)
    full = reshape(flat, (b, h, s, so + 1))
    weights = softmax(masked_fill(full, pair_row_mask(s, so), NEG_FILL), axis=-1)

    w_flat = reshape(weights, (b, h, s * (so + 1)))
    self_w = slice_(w_flat, sd_key)  # [B,H,S]
    ctx_w = reshape(masked_fill(w_flat, sd_flat_mask, 0.0), (b, h, s, so + 1))
    ctx_w = slice_(ctx_w, (Ellipsis, slice(0, so)))
    out_p = matmul(ctx_w, v_o) + mul(v_p, reshape(self_w, (b, h, s, 1)))

    return SequencePair(
        z_o=matmul(merge_heads(out_o), params["wo"]),
        z_p=matmul(merge_heads(out_p), params["wo"]),
    )


def pair_attention_simplified(pair: SequencePair, cfg: AttentionConfig, params: dict) -> SequencePair:
    """Oracle implementation: one [So+S, So+S] attention under the generalized
    causal mask.  Around 4x the FLOPs of standard attention; used to verify
    the efficient construction."""
    cfg.validate_dim(pair.z_o.shape[-1])
    so, s = pair.z_o.shape[1], pair.z_p.shape[1]
    q_o, k_o, v_o, q_p, k_p, v_p, _ = _pair_projections(pair, cfg, params)
    q = concat([q_o, q_p], axis=2)
    k = concat([k_o, k_p], axis=2)
    v = concat([v_o, v_p], axis=2)
    out = _attend(q, k, v, generalized_causal_mask(s, so), cfg.head_dim)
    merged = matmul(merge_heads(out), params["wo"])
    return SequencePair(
        z_o=slice_(merged, (slice(None), slice(0, so))),
        z_p=slice_(merged, (slice(None), slice(so, so + s))),
    )


def step_embedding(table: Value, step_index: int) -> Value:
    """Select the learnable per-optimization-step slot, shape [1, D]."""
    if not 0 <= step_index < table.shape[0]:
        raise ContractViolation(
            f"step index {step_index} out of range [0, {table.shape[0]})")
    return gather_rows(table, np.array([step_index]))
