# ccanlab/attention.py
"""
Scaled dot-product cross-attention and its context-aware variant.

The context-aware path mixes two softmax branches over the same scores:
the ordinary global one, and a local one restricted to a window of `win`
source positions centred on the argmax-aligned source token. A per-position
sigmoid gate g, computed from the pre-split query with a single vector W
shared by all heads, weights the global branch and (1 - g) the local one:

    out_i = g_i * softmax(psi_i) V + (1 - g_i) * softmax(L(psi_i)) V

The window location is a constant of the backward pass.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ccanlab.common import ConfigError, EmptySupportError, ShapeError, validate_window
from ccanlab.layers import Linear, Module
from ccanlab.tensor import (
    NEG_INF, Parameter, Tensor, add, masked_fill, matmul, mul, reshape, sigmoid, softmax_rows, sub, transpose,
)

logger = logging.getLogger(__name__)

VANILLA = "vanilla"
CCAN = "ccan"

# AttnScores and AttnWeights are Tensors of shape [..., heads, T_tgt, T_src]:
# raw scores with -inf at excluded sources, and their row-stochastic softmax.
AttnScores = Tensor
AttnWeights = Tensor


@dataclass(frozen=True)
class WindowSpec:
    """Total window width `win` (odd); the local branch keeps |j - j*| <= half."""
    win: int = 9

    def __post_init__(self):
        validate_window(self.win)

    @property
    def half(self) -> int:
        return (self.win - 1) // 2


@dataclass
class CrossAttentionDump:
    """Per-head weights of one cross-attention call. Local weights and gates exist only on the CCAN path."""
    global_weights: np.ndarray
    local_weights: Optional[np.ndarray] = None
    gates: Optional[np.ndarray] = None

    def effective_weights(self) -> np.ndarray:
        """Per-head distribution actually applied to V: g * global + (1 - g) * local."""
        if self.gates is None:
            return self.global_weights
        g = self.gates[..., None, :, None]
        return g * self.global_weights + (1.0 - g) * self.local_weights

    def head_average(self, kind: str = "effective") -> np.ndarray:
        if kind == "global":
            weights = self.global_weights
        elif kind == "effective":
            weights = self.effective_weights()
        else:
            raise ConfigError(f"unknown attention distribution {kind!r}; use 'effective' or 'global'")
        return weights.mean(axis=-3)


# ==================== SCORES & ALIGNMENT ====================

def attn_scores(Q: Tensor, K: Tensor, src_pad: np.ndarray) -> AttnScores:
    """psi = Q K^T / sqrt(d_k); padded source columns become -inf."""
    if Q.shape[-1] != K.shape[-1] or Q.ndim != K.ndim:
        raise ShapeError("attn_scores", Q.shape, K.shape)
    src_pad = np.asarray(src_pad, dtype=bool)
    if src_pad.shape[-1] != K.shape[-2]:
        raise ShapeError("attn_scores", K.shape, src_pad.shape, detail="padding mask must cover the source axis")
    if np.any(np.all(src_pad, axis=-1)):
        raise EmptySupportError("attention over an all-padding source")

    d_k = Q.shape[-1]
    axes = tuple(range(K.ndim - 2)) + (K.ndim - 1, K.ndim - 2)
    scores = mul(matmul(Q, transpose(K, axes)), 1.0 / np.sqrt(d_k))
    extra = max(scores.ndim - src_pad.ndim, 0)
    pad = src_pad.reshape(src_pad.shape[:-1] + (1,) * extra + src_pad.shape[-1:])
    return masked_fill(scores, np.broadcast_to(pad, scores.shape))


def aligned_index(score_row) -> int:
    """Index of the largest score; ties go to the lowest index."""
    row = np.asarray(score_row, dtype=float)
    if not np.any(np.isfinite(row)):
        raise EmptySupportError("no finite score to align to")
    return int(np.argmax(np.where(np.isnan(row), NEG_INF, row)))


def aligned_indices(scores: np.ndarray) -> np.ndarray:
    """Vectorised aligned_index over the last axis."""
    if np.any(~np.any(np.isfinite(scores), axis=-1)):
        raise EmptySupportError("no finite score to align to")
    return np.argmax(scores, axis=-1)


def window_mask(scores: np.ndarray, window: WindowSpec) -> np.ndarray:
    """Boolean array, True outside the clipped window around each row's aligned source."""
    centre = aligned_indices(scores)
    positions = np.arange(scores.shape[-1])
    return np.abs(positions - centre[..., None]) > window.half


def local_mask(scores: AttnScores, window: WindowSpec) -> AttnScores:
    """L(psi): keep psi_ij for |j - j*| <= half, -inf elsewhere; padding stays -inf."""
    return masked_fill(scores, window_mask(scores.data, window))


# ==================== GATE & COMBINATION ====================

def gate(decoder_state: Tensor, W: Tensor) -> Tensor:
    """g_i = sigmoid(W . state_i), one scalar per target position."""
    d = decoder_state.shape[-1]
    if W.shape != (d,):
        raise ShapeError("gate", decoder_state.shape, W.shape)
    projected = matmul(decoder_state, reshape(W, (d, 1)))
    return sigmoid(reshape(projected, decoder_state.shape[:-1]))


def attend(scores: AttnScores, V: Tensor) -> Tuple[Tensor, AttnWeights]:
    weights = softmax_rows(scores)
    return matmul(weights, V), weights


def merge_heads(x: Tensor) -> Tensor:
    """[..., h, T, d_k] -> [..., T, h * d_k]"""
    lead = x.shape[:-3]
    h, t, d_k = x.shape[-3:]
    n = len(lead)
    moved = transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return reshape(moved, lead + (t, h * d_k))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., T, d] -> [..., h, T, d / h]"""
    lead = x.shape[:-2]
    t, d = x.shape[-2:]
    n = len(lead)
    shaped = reshape(x, lead + (t, n_heads, d // n_heads))
    return transpose(shaped, tuple(range(n)) + (n + 1, n, n + 2))


def vanilla_attention(Q: Tensor, K: Tensor, V: Tensor, src_pad: np.ndarray) -> Tuple[Tensor, CrossAttentionDump]:
    context, weights = attend(attn_scores(Q, K, src_pad), V)
    return context, CrossAttentionDump(global_weights=weights.data)


def ccan(Q: Tensor, K: Tensor, V: Tensor, src_pad: np.ndarray, W: Tensor, window: WindowSpec,
         gate_state: Optional[Tensor] = None) -> Tuple[Tensor, CrossAttentionDump]:
    """
    Context-aware cross-attention over per-head Q [..., h, T_tgt, d_k].

    The gate reads `gate_state` ([..., T_tgt, d_model]); by default that is the
    query with its heads merged back, i.e. the pre-split projected query.
    """
    scores = attn_scores(Q, K, src_pad)
    global_context, global_weights = attend(scores, V)
    local_context, local_weights = attend(local_mask(scores, window), V)

    if gate_state is None:
        gate_state = merge_heads(Q)
    g = gate(gate_state, W)
    g_heads = reshape(g, g.shape[:-1] + (1, g.shape[-1], 1))
    context = add(mul(g_heads, global_context), mul(sub(1.0, g_heads), local_context))
    dump = CrossAttentionDump(global_weights=global_weights.data, local_weights=local_weights.data, gates=g.data)
    return context, dump


# ==================== MULTI-HEAD WRAPPERS ====================

class MultiHeadAttention(Module):
    """Standard multi-head scaled dot-product attention with key padding and an optional causal mask."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} is not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)

    def __call__(self, query_state: Tensor, key_state: Tensor, key_pad: np.ndarray,
                 causal: bool = False) -> Tuple[Tensor, np.ndarray]:
        Q = split_heads(self.q_proj(query_state), self.n_heads)
        K = split_heads(self.k_proj(key_state), self.n_heads)
        V = split_heads(self.v_proj(key_state), self.n_heads)
        scores = attn_scores(Q, K, key_pad)
        if causal:
            t_q, t_k = scores.shape[-2:]
            future = np.triu(np.ones((t_q, t_k), dtype=bool), k=1)
            scores = masked_fill(scores, np.broadcast_to(future, scores.shape))
        context, weights = attend(scores, V)
        return self.out_proj(merge_heads(context)), weights.data


class CrossAttention(MultiHeadAttention):
    """
    Decoder-to-encoder attention, either vanilla or context-aware.

    In CCAN mode the layer owns one extra Parameter, the gate vector of size
    d_model, initialised to zero so that g starts at exactly 0.5.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, mode: str = VANILLA,
                 window: Optional[WindowSpec] = None):
        super().__init__(d_model, n_heads, rng)
        if mode not in (VANILLA, CCAN):
            raise ConfigError(f"cross-attention mode must be {VANILLA!r} or {CCAN!r}, got {mode!r}")
        self.mode = mode
        self.window = window or WindowSpec()
        if mode == CCAN:
            self.gate_weight = Parameter(np.zeros(d_model))

    def __call__(self, decoder_state: Tensor, encoder_state: Tensor, src_pad: np.ndarray,
                 mode: Optional[str] = None) -> Tuple[Tensor, CrossAttentionDump]:
        """`mode` may force the vanilla path on a CCAN layer (the AT decoder never uses CCAN)."""
        mode = mode or self.mode
        if mode == CCAN and self.mode != CCAN:
            raise ConfigError("this cross-attention layer has no gate parameter")
        query = self.q_proj(decoder_state)
        Q = split_heads(query, self.n_heads)
        K = split_heads(self.k_proj(encoder_state), self.n_heads)
        V = split_heads(self.v_proj(encoder_state), self.n_heads)
        if mode == CCAN:
            context, dump = ccan(Q, K, V, src_pad, self.gate_weight, self.window, gate_state=query)
        else:
            context, dump = vanilla_attention(Q, K, V, src_pad)
        return self.out_proj(merge_heads(context)), dump


def multi_head_cross_attention(decoder_state: Tensor, encoder_state: Tensor, src_pad: np.ndarray,
                               layer: CrossAttention, mode: Optional[str] = None):
    return layer(decoder_state, encoder_state, src_pad, mode=mode)
