# ccanlab/model.py
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ccanlab.analysis import SentenceAttn
from ccanlab.attention import (
    CCAN, VANILLA, CrossAttention, CrossAttentionDump, MultiHeadAttention, WindowSpec, multi_head_cross_attention,
)
from ccanlab.common import BOS_ID, EOS_ID, MASK_ID, PAD_ID, DataError
from ccanlab.config import ModelConfig
from ccanlab.layers import Embedding, FeedForward, LayerNorm, Linear, Module, sinusoidal_positions
from ccanlab.tensor import (
    Tensor, add, cross_entropy, dropout, make_rng, matmul, mul, reshape, softmax_rows,
)

logger = logging.getLogger(__name__)


# ==================== BATCHES & DUMPS ====================

@dataclass
class TokenBatch:
    """Padded id matrices; `masked` marks CMLM positions replaced by MASK."""
    src: np.ndarray
    tgt: Optional[np.ndarray] = None
    masked: Optional[np.ndarray] = None

    @property
    def src_pad(self) -> np.ndarray:
        return self.src == PAD_ID

    @property
    def tgt_pad(self) -> np.ndarray:
        return self.tgt == PAD_ID

    @property
    def src_lengths(self) -> np.ndarray:
        return (~self.src_pad).sum(axis=1)

    @property
    def tgt_lengths(self) -> np.ndarray:
        return (~self.tgt_pad).sum(axis=1)

    @classmethod
    def from_sequences(cls, src: Sequence[Sequence[int]], tgt: Optional[Sequence[Sequence[int]]] = None) -> "TokenBatch":
        return cls(src=pad_sequences(src), tgt=None if tgt is None else pad_sequences(tgt))


def pad_sequences(seqs: Sequence[Sequence[int]], width: Optional[int] = None) -> np.ndarray:
    width = width or max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), max(width, 1)), PAD_ID, dtype=np.int64)
    for i, seq in enumerate(seqs):
        out[i, :len(seq)] = seq
    return out


@dataclass
class AttnDump:
    """Cross-attention captured from every decoder layer of one batched forward pass."""
    layers: List[CrossAttentionDump]
    src_pad: np.ndarray
    tgt_pad: np.ndarray

    def sentence(self, index: int, heads: bool = False, length: Optional[int] = None) -> SentenceAttn:
        """
        Trim one sentence to its non-pad target rows (or the first `length` of
        them) and non-pad sources, renormalising each row over those sources.
        Per-head distributions, when requested, are the effective ones.
        """
        rows = np.flatnonzero(~self.tgt_pad[index])
        if length is not None:
            rows = rows[:length]
        cols = np.flatnonzero(~self.src_pad[index])

        def trim(dist: np.ndarray) -> np.ndarray:
            cut = dist[..., rows, :][..., cols].astype(np.float64)
            return cut / cut.sum(axis=-1, keepdims=True)

        effective, plain, gates, per_head = [], [], [], []
        for layer in self.layers:
            effective.append(trim(layer.head_average("effective")[index]))
            plain.append(trim(layer.head_average("global")[index]))
            gates.append(None if layer.gates is None else layer.gates[index][rows].astype(np.float64))
            if heads:
                per_head.append(trim(layer.effective_weights()[index]))
        return SentenceAttn(layers=effective, gates=gates, heads=per_head if heads else None,
                            global_layers=plain)


@dataclass
class LossBreakdown:
    total: Tensor
    token_loss: float
    length_loss: float
    predicted: int


# ==================== LAYERS ====================

class EncoderLayer(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.self_norm = LayerNorm(config.d_model)
        self.self_attn = MultiHeadAttention(config.d_model, config.n_heads, rng)
        self.ffn_norm = LayerNorm(config.d_model)
        self.ffn = FeedForward(config.d_model, config.d_ff, rng, config.dropout)
        self.rate = config.dropout

    def __call__(self, x: Tensor, pad: np.ndarray, rng=None) -> Tensor:
        h = self.self_norm(x)
        attended, _ = self.self_attn(h, h, pad)
        x = add(x, dropout(attended, self.rate, rng, self.training))
        x = add(x, dropout(self.ffn(self.ffn_norm(x), rng), self.rate, rng, self.training))
        return x


class DecoderLayer(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, cross_mode: str):
        self.self_norm = LayerNorm(config.d_model)
        self.self_attn = MultiHeadAttention(config.d_model, config.n_heads, rng)
        self.cross_norm = LayerNorm(config.d_model)
        self.cross_attn = CrossAttention(config.d_model, config.n_heads, rng, mode=cross_mode,
                                         window=WindowSpec(config.win))
        self.ffn_norm = LayerNorm(config.d_model)
        self.ffn = FeedForward(config.d_model, config.d_ff, rng, config.dropout)
        self.rate = config.dropout

    def __call__(self, x: Tensor, tgt_pad: np.ndarray, enc: Tensor, src_pad: np.ndarray, causal: bool,
                 rng=None, cross_mode: Optional[str] = None) -> Tuple[Tensor, CrossAttentionDump]:
        h = self.self_norm(x)
        attended, _ = self.self_attn(h, h, tgt_pad, causal=causal)
        x = add(x, dropout(attended, self.rate, rng, self.training))
        crossed, dump = multi_head_cross_attention(self.cross_norm(x), enc, src_pad, self.cross_attn, mode=cross_mode)
        x = add(x, dropout(crossed, self.rate, rng, self.training))
        x = add(x, dropout(self.ffn(self.ffn_norm(x), rng), self.rate, rng, self.training))
        return x, dump


# ==================== MODEL ====================

class NATModel(Module):
    """
    Transformer encoder-decoder trained either as a CMLM (mode "nat") or
    left-to-right (mode "at"). Decoder layers listed in `ccan_layers` use
    context-aware cross-attention in NAT mode; the AT decoder is always vanilla.
    """

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        rng = make_rng(config.seed)
        self.embed = Embedding(config.vocab_size, config.d_model, rng)
        self.encoder = [EncoderLayer(config, rng) for _ in range(config.enc_layers)]
        self.enc_norm = LayerNorm(config.d_model)
        self.decoder = [
            DecoderLayer(config, rng, CCAN if config.mode == "nat" and i + 1 in config.ccan_layers else VANILLA)
            for i in range(config.dec_layers)
        ]
        self.dec_norm = LayerNorm(config.d_model)
        self.output = Linear(config.d_model, config.vocab_size, rng, init="normal", scale=0.02)
        self.length_head = Linear(config.d_model, 2 * config.length_offset_range + 1, None, init="zeros")
        self.positions = sinusoidal_positions(config.max_len + 2, config.d_model)
        for name, param in self.named_parameters().items():
            param.name = name

    def _embed(self, ids: np.ndarray, rng) -> Tensor:
        x = add(self.embed(ids), self.positions[: ids.shape[1]])
        return dropout(x, self.config.dropout, rng, self.training)

    def _check_ids(self, ids: np.ndarray, what: str, limit: int) -> None:
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise DataError(f"{what} batch must be a non-empty [B, T] id matrix, got shape {ids.shape}")
        if ids.shape[1] > limit:
            raise DataError(f"{what} length {ids.shape[1]} exceeds max_len {limit}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise DataError(f"{what} ids outside vocabulary of size {self.config.vocab_size}")

    # ---- encoder & length ----
    def encode(self, src: np.ndarray, rng=None) -> Tensor:
        src = np.asarray(src)
        self._check_ids(src, "source", self.config.max_len)
        pad = src == PAD_ID
        x = self._embed(src, rng)
        for layer in self.encoder:
            x = layer(x, pad, rng)
        return self.enc_norm(x)

    def length_logits(self, enc_states: Tensor, src_pad: np.ndarray) -> Tensor:
        keep = (~src_pad).astype(enc_states.data.dtype)
        weights = keep / np.maximum(keep.sum(axis=1, keepdims=True), 1.0)
        pooled = matmul(Tensor(weights[:, None, :]), enc_states)
        return self.length_head(reshape(pooled, (enc_states.shape[0], enc_states.shape[2])))

    def predict_length(self, enc_states: Tensor, src_pad: np.ndarray) -> np.ndarray:
        """Distribution over offsets -R..R of target length relative to source length."""
        return softmax_rows(self.length_logits(enc_states, src_pad)).data

    def predicted_lengths(self, enc_states: Tensor, src_pad: np.ndarray) -> np.ndarray:
        offsets = np.argmax(self.predict_length(enc_states, src_pad), axis=-1) - self.config.length_offset_range
        src_lengths = (~src_pad).sum(axis=1)
        return np.clip(src_lengths + offsets, 1, self.config.max_len)

    # ---- decoders ----
    def _decode(self, tgt_in: np.ndarray, enc_states: Tensor, src_pad: np.ndarray, causal: bool,
                rng=None, cross_mode: Optional[str] = None) -> Tuple[Tensor, AttnDump]:
        tgt_pad = tgt_in == PAD_ID
        x = self._embed(tgt_in, rng)
        dumps = []
        for layer in self.decoder:
            x, dump = layer(x, tgt_pad, enc_states, src_pad, causal, rng, cross_mode)
            dumps.append(dump)
        logits = self.output(self.dec_norm(x))
        return logits, AttnDump(layers=dumps, src_pad=src_pad, tgt_pad=tgt_pad)

    def decode_cmlm(self, tgt_in: np.ndarray, enc_states: Tensor, src_pad: np.ndarray,
                    rng=None) -> Tuple[Tensor, AttnDump]:
        """Bidirectional decoder pass; logits for every position, MASK or not."""
        tgt_in = np.asarray(tgt_in)
        self._check_ids(tgt_in, "target", self.config.max_len)
        return self._decode(tgt_in, enc_states, src_pad, causal=False, rng=rng)

    def decode_at(self, prefix: np.ndarray, enc_states: Tensor, src_pad: np.ndarray,
                  rng=None) -> Tuple[Tensor, AttnDump]:
        """Causal decoder pass over a BOS-initial prefix; logits at t predict token t + 1."""
        prefix = np.asarray(prefix)
        self._check_ids(prefix, "prefix", self.config.max_len + 1)
        if np.any(prefix[:, 0] != BOS_ID):
            raise DataError("autoregressive prefix must start with BOS")
        return self._decode(prefix, enc_states, src_pad, causal=True, rng=rng, cross_mode=VANILLA)

    # ---- losses ----
    def length_targets(self, batch: TokenBatch) -> np.ndarray:
        r = self.config.length_offset_range
        return np.clip(batch.tgt_lengths - batch.src_lengths, -r, r) + r

    def cmlm_loss(self, batch: TokenBatch, rng: np.random.Generator) -> LossBreakdown:
        """
        Sample k ~ U{1..T} per sentence, mask k random target positions and
        score them, plus `length_loss_weight` times the length cross-entropy.
        """
        lengths = batch.tgt_lengths
        if np.any(lengths == 0):
            raise DataError("cmlm_loss needs a non-empty target for every sentence")
        masked = np.zeros(batch.tgt.shape, dtype=bool)
        for b, length in enumerate(lengths):
            k = rng.integers(1, length + 1)
            masked[b, rng.permutation(length)[:k]] = True
        tgt_in = np.where(masked, MASK_ID, batch.tgt)
        batch.masked = masked

        enc = self.encode(batch.src, rng)
        logits, _ = self.decode_cmlm(tgt_in, enc, batch.src_pad, rng)
        token_loss = cross_entropy(logits, batch.tgt, ignore_mask=~masked)
        length_loss = cross_entropy(self.length_logits(enc, batch.src_pad), self.length_targets(batch))
        total = add(token_loss, mul(length_loss, self.config.length_loss_weight))
        return LossBreakdown(total=total, token_loss=token_loss.item(), length_loss=length_loss.item(),
                             predicted=int(masked.sum()))

    def at_loss(self, batch: TokenBatch, rng: Optional[np.random.Generator] = None) -> LossBreakdown:
        """Teacher-forced next-token loss: input BOS + y, output y + EOS."""
        lengths = batch.tgt_lengths
        if np.any(lengths == 0):
            raise DataError("at_loss needs a non-empty target for every sentence")
        bsz, width = batch.tgt.shape
        prefix = np.full((bsz, width + 1), PAD_ID, dtype=np.int64)
        gold = np.full((bsz, width + 1), PAD_ID, dtype=np.int64)
        for b, length in enumerate(lengths):
            prefix[b, 0] = BOS_ID
            prefix[b, 1:length + 1] = batch.tgt[b, :length]
            gold[b, :length] = batch.tgt[b, :length]
            gold[b, length] = EOS_ID
        enc = self.encode(batch.src, rng)
        logits, _ = self.decode_at(prefix, enc, batch.src_pad, rng)
        token_loss = cross_entropy(logits, gold, ignore_mask=gold == PAD_ID)
        return LossBreakdown(total=token_loss, token_loss=token_loss.item(), length_loss=0.0,
                             predicted=int((gold != PAD_ID).sum()))

    def loss(self, batch: TokenBatch, rng: np.random.Generator) -> LossBreakdown:
        if self.config.mode == "at":
            return self.at_loss(batch, rng)
        return self.cmlm_loss(batch, rng)


def parameter_count(model: NATModel) -> Dict[str, int]:
    """Total scalar parameters and how many belong to CCAN gates."""
    params = model.named_parameters()
    gate = sum(p.size for name, p in params.items() if name.endswith("gate_weight"))
    return {"total": int(sum(p.size for p in params.values())), "gate": int(gate)}
