"""Two-stage attention fusion over keypoint features.

Stage one runs self-attention *within* each keypoint across its six
feature representations (four voxel scales, raw-point, BEV) after
reducing them to a common width.  Stage two concatenates the six outputs
per keypoint and runs self-attention *across* keypoints.  Neither stage
uses positional encodings, so keypoint order is a pure relabeling; the
sorted-accumulation kernels in numerics make that equivariance exact.

Attention logits are scaled by 1/sqrt(d_in) of the incoming token width
(the published form); a config switch selects the conventional
1/sqrt(d_k) instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .numerics import (
    DimensionError,
    Tensor,
    add,
    attn_mix,
    bmm_nt,
    concat_cols,
    layer_norm,
    matmul,
    relu,
    reshape,
    scale,
    slice_cols,
    softmax_rows,
)

REP_ORDER = ("voxel_1x", "voxel_2x", "voxel_4x", "voxel_8x", "point", "bev")


@dataclass(frozen=True)
class AttentionConfig:
    """Shape and variant parameters for one encoder stack."""

    d_model: int
    n_heads: int
    n_layers: int
    d_head: int = 0  # 0 = d_model // n_heads
    ffn_mult: int = 2
    scale_kind: str = "d_in"  # "d_in" (published equation) or "d_k"

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 1:
            raise ValueError("d_model, n_heads, n_layers must be positive")
        if self.d_head == 0 and self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.scale_kind not in ("d_in", "d_k"):
            raise ValueError(f"unknown scale kind {self.scale_kind!r}")

    @property
    def head_dim(self) -> int:
        return self.d_head if self.d_head else self.d_model // self.n_heads


def attention(
    xl: Tensor,
    xs: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    seq_len: Optional[int] = None,
    scale_kind: str = "d_in",
) -> Tensor:
    """Scaled dot-product attention; queries and keys from xl, values from xs.

    When ``seq_len`` is given, rows are treated as stacked independent
    sequences of that length and attention runs within each block.
    """
    if xl.shape[0] != xs.shape[0]:
        raise DimensionError("query and value sources need equal row counts")
    s = seq_len if seq_len is not None else xl.shape[0]
    if xl.shape[0] % s:
        raise DimensionError(f"row count {xl.shape[0]} not a multiple of sequence length {s}")
    q = matmul(xl, wq)
    k = matmul(xl, wk)
    v = matmul(xs, wv)
    d_in = xl.shape[1]
    d_scale = d_in if scale_kind == "d_in" else wq.shape[1]
    logits = scale(bmm_nt(q, k, s, s), 1.0 / math.sqrt(d_scale))
    weights = softmax_rows(logits)
    return attn_mix(weights, v, s, s)


def multi_head(
    x: Tensor,
    heads: Sequence[Tuple[Tensor, Tensor, Tensor]],
    w_o: Tensor,
    seq_len: Optional[int] = None,
    scale_kind: str = "d_in",
) -> Tensor:
    """Per-head self-attention, channel concatenation, output projection."""
    outs = [attention(x, x, wq, wk, wv, seq_len=seq_len, scale_kind=scale_kind) for wq, wk, wv in heads]
    cat = outs[0] if len(outs) == 1 else concat_cols(outs)
    return matmul(cat, w_o)


@dataclass
class EncoderLayerParams:
    """Weights of one post-norm encoder layer."""

    heads: List[Tuple[Tensor, Tensor, Tensor]]
    w_o: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


def encoder_layer(
    x: Tensor,
    p: EncoderLayerParams,
    seq_len: Optional[int] = None,
    scale_kind: str = "d_in",
    ln_eps: float = 1e-5,
) -> Tensor:
    """x <- LN(x + MHSA(x)); x <- LN(x + FFN(x)) with a 2x-wide ReLU FFN."""
    att = multi_head(x, p.heads, p.w_o, seq_len=seq_len, scale_kind=scale_kind)
    x = layer_norm(add(x, att), p.ln1_gain, p.ln1_bias, ln_eps)
    h = relu(add(matmul(x, p.ffn_w1), p.ffn_b1))
    f = add(matmul(h, p.ffn_w2), p.ffn_b2)
    return layer_norm(add(x, f), p.ln2_gain, p.ln2_bias, ln_eps)


def encoder_stack(
    x: Tensor,
    layers: Sequence[EncoderLayerParams],
    seq_len: Optional[int] = None,
    scale_kind: str = "d_in",
) -> Tensor:
    for p in layers:
        x = encoder_layer(x, p, seq_len=seq_len, scale_kind=scale_kind)
    return x


def feature_reduce(feats: Sequence[Tensor], weights: Sequence[Tensor]) -> List[Tensor]:
    """Project each representation to the common width (bias-free, so
    all-zero feature rows stay exactly zero)."""
    if len(feats) != len(weights):
        raise DimensionError("one reduction map per representation required")
    out = []
    for f, w in zip(feats, weights):
        if f.shape[1] != w.shape[0]:
            raise DimensionError(f"reduction map {w.shape} for features {f.shape}")
        out.append(matmul(f, w))
    return out


def interleave_tokens(fhat: Sequence[Tensor]) -> Tensor:
    """Stack six (n, c) matrices into (6n, c) rows grouped per keypoint."""
    widths = {f.shape[1] for f in fhat}
    if len(widths) != 1:
        raise DimensionError("token widths must match after reduction")
    c = widths.pop()
    n = fhat[0].shape[0]
    cat = concat_cols(list(fhat))  # (n, 6c); row i holds keypoint i's tokens
    return reshape(cat, (n * len(fhat), c))


def deinterleave_tokens(tokens: Tensor, n_reps: int) -> List[Tensor]:
    """Inverse of interleave_tokens: (k*n_reps, c) -> n_reps of (k, c)."""
    total, c = tokens.shape
    if total % n_reps:
        raise DimensionError("token count not a multiple of representation count")
    n = total // n_reps
    cat = reshape(tokens, (n, n_reps * c))
    return [slice_cols(cat, i * c, (i + 1) * c) for i in range(n_reps)]


def multi_rep_scale_layer(
    fhat: Sequence[Tensor],
    layers: Sequence[EncoderLayerParams],
    back_weights: Sequence[Tensor],
    cfg: AttentionConfig,
) -> List[Tensor]:
    """Intra-point fusion: a 6-token encoder per keypoint, batched.

    Keypoints are mathematically independent blocks; the result is then
    projected back to each representation's original width.
    """
    n_reps = len(fhat)
    tokens = interleave_tokens(fhat)
    fused = encoder_stack(tokens, layers, seq_len=n_reps, scale_kind=cfg.scale_kind)
    per_rep = deinterleave_tokens(fused, n_reps)
    out = []
    for t, w in zip(per_rep, back_weights):
        out.append(matmul(t, w))
    return out


def concat_split(t_list: Sequence[Tensor]) -> Tensor:
    """Row-wise concatenation of the six per-representation outputs in the
    fixed order (voxel 1x, 2x, 4x, 8x, point, bev); width is the sum."""
    heights = {t.shape[0] for t in t_list}
    if len(heights) != 1:
        raise DimensionError("per-representation outputs must share the keypoint count")
    return concat_cols(list(t_list))


def split_columns(t: Tensor, widths: Sequence[int]) -> List[Tensor]:
    """Undo concat_split given the per-representation widths."""
    if sum(widths) != t.shape[1]:
        raise DimensionError(f"widths {tuple(widths)} do not sum to {t.shape[1]}")
    out, start = [], 0
    for w in widths:
        out.append(slice_cols(t, start, start + w))
        start += w
    return out


def mutual_relation_layer(
    seq: Tensor,
    entry_w: Tensor,
    layers: Sequence[EncoderLayerParams],
    exit_w: Tensor,
    cfg: AttentionConfig,
) -> Tensor:
    """Inter-point fusion: one encoder over the n keypoint tokens.

    The concatenated width is linearly mapped to the encoder width on
    entry and back on exit, so the output matches the input shape.
    """
    x = matmul(seq, entry_w)
    x = encoder_stack(x, layers, seq_len=None, scale_kind=cfg.scale_kind)
    return matmul(x, exit_w)
