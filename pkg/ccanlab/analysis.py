# ccanlab/analysis.py
"""
Diagnostics for trained models: locality entropy of cross-attention,
per-layer gate importance, clipped n-gram precision, corpus BLEU and
paired bootstrap resampling.
"""

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from nltk.translate.bleu_score import corpus_bleu as nltk_corpus_bleu, modified_precision

from ccanlab.common import ConfigError, DataError, NumericError
from ccanlab.tensor import make_rng

logger = logging.getLogger(__name__)

HEAD_AVERAGE = "average-then-entropy"
HEAD_ENTROPY = "entropy-then-average"
ROW_TOLERANCE = 1e-6


# ==================== TYPES ====================

@dataclass
class SentenceAttn:
    """
    Cross-attention of one sentence: per decoder layer a head-averaged [m x n]
    distribution over non-pad sources, the gates of that layer ([m], None
    without CCAN) and optionally per-head [h x m x n] distributions.

    `layers` holds the distribution applied to the values (g * global +
    (1 - g) * local on CCAN layers); `global_layers` the plain softmax one.
    """
    layers: List[np.ndarray]
    gates: List[Optional[np.ndarray]] = field(default_factory=list)
    heads: Optional[List[np.ndarray]] = None
    global_layers: Optional[List[np.ndarray]] = None

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def to_dict(self) -> Dict[str, Any]:
        record = {
            "layers": [layer.tolist() for layer in self.layers],
            "gates": [None if g is None else g.tolist() for g in self.gates],
        }
        if self.global_layers is not None:
            record["global"] = [layer.tolist() for layer in self.global_layers]
        if self.heads is not None:
            record["heads"] = [h.tolist() for h in self.heads]
        return record

    @classmethod
    def from_dict(cls, record: Dict[str, Any], kind: str = "effective") -> "SentenceAttn":
        """Rebuild from a dump record; `kind="global"` puts the plain softmax distributions in `layers`."""
        if "layers" not in record:
            raise DataError("attention record has no 'layers' field")
        if kind not in ("effective", "global"):
            raise ConfigError(f"unknown attention distribution {kind!r}; use 'effective' or 'global'")
        effective = [np.asarray(layer, dtype=np.float64) for layer in record["layers"]]
        plain = [np.asarray(layer, dtype=np.float64) for layer in record.get("global", record["layers"])]
        gates = [None if g is None else np.asarray(g, dtype=np.float64)
                 for g in record.get("gates", [None] * len(effective))]
        heads = record.get("heads")
        if heads is not None:
            heads = [np.asarray(h, dtype=np.float64) for h in heads]
        return cls(layers=plain if kind == "global" else effective, gates=gates, heads=heads,
                   global_layers=plain)


@dataclass
class MetricsReport:
    """Named scalars plus row-oriented series (per layer, per n, ...), JSON serialisable."""
    kind: str
    scalars: Dict[str, Optional[float]] = field(default_factory=dict)
    series: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "MetricsReport":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise DataError(f"metrics file not found: {path}")
        except json.JSONDecodeError as e:
            raise DataError(f"metrics file {path} is not valid JSON: {e}")
        if "kind" not in data:
            raise DataError(f"metrics file {path} has no 'kind'")
        return cls(kind=data["kind"], scalars=data.get("scalars", {}),
                   series=data.get("series", {}), meta=data.get("meta", {}))


# ==================== DUMP FILES ====================

def write_attention_dump(sents: Sequence[SentenceAttn], path: str, tolerance: float = ROW_TOLERANCE) -> None:
    """
    One JSON object per line and sentence: {"index", "layers", "gates", "global"
    and optionally "heads"}. Every distribution row is checked before writing.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, sent in enumerate(sents):
            for layer in sent.layers + (sent.global_layers or []) + (sent.heads or []):
                check_row_stochastic(layer, what=f"sentence {i + 1}", tolerance=tolerance)
            f.write(json.dumps({"index": i, **sent.to_dict()}, sort_keys=True) + "\n")


def read_attention_dump(path: str, kind: str = "effective") -> List[SentenceAttn]:
    try:
        f = open(path, "r", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"attention dump not found: {path}")
    sents = []
    with f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no}: malformed JSON ({e.msg})")
            try:
                sents.append(SentenceAttn.from_dict(record, kind=kind))
            except DataError as e:
                raise DataError(f"{path}:{line_no}: {e}")
    if not sents:
        logger.warning(f"Attention dump {path} is empty")
    return sents


# ==================== LOCALITY ENTROPY ====================

def _normalised_rows(dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim < 2 or dist.shape[-1] == 0 or dist.shape[-2] == 0:
        raise DataError(f"attention distribution must be a non-empty matrix, got shape {dist.shape}")
    if np.any(dist < 0) or not np.all(np.isfinite(dist)):
        raise DataError("attention distribution has negative or non-finite entries")
    totals = dist.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise DataError("attention row with no mass")
    return dist / totals


def check_row_stochastic(dist: np.ndarray, what: str = "attention", tolerance: float = ROW_TOLERANCE) -> None:
    dist = np.asarray(dist, dtype=np.float64)
    if np.any(dist < 0):
        raise NumericError(f"{what} distribution has negative entries")
    worst = float(np.max(np.abs(dist.sum(axis=-1) - 1.0))) if dist.size else 0.0
    if worst > tolerance:
        raise NumericError(f"{what} rows must sum to 1 within {tolerance}, off by {worst:.3g}")


def entropy_bits(dist: np.ndarray) -> np.ndarray:
    """Row entropies in bits with 0 * log2(0) = 0."""
    safe = np.where(dist > 0, dist, 1.0)
    return -np.sum(np.where(dist > 0, dist * np.log2(safe), 0.0), axis=-1)


def locality_entropy(sent: SentenceAttn, head_reduction: str = HEAD_AVERAGE) -> float:
    """
    LE = -(1 / (L * m)) * sum over layers and target positions of sum_j P log2 P.

    With `head_reduction="entropy-then-average"` the entropy is taken per head
    and averaged, which needs the per-head distributions.
    """
    if sent.num_layers == 0:
        raise DataError("locality entropy of an empty sentence")
    if head_reduction == HEAD_AVERAGE:
        per_layer = [entropy_bits(_normalised_rows(layer)).mean() for layer in sent.layers]
    elif head_reduction == HEAD_ENTROPY:
        if not sent.heads:
            raise DataError("entropy-then-average needs per-head attention (translate with --dump-heads)")
        per_layer = [entropy_bits(_normalised_rows(heads)).mean() for heads in sent.heads]
    else:
        raise ConfigError(f"unknown head reduction {head_reduction!r}; use {HEAD_AVERAGE} or {HEAD_ENTROPY}")
    return float(np.mean(per_layer))


def corpus_le(sents: Sequence[SentenceAttn], head_reduction: str = HEAD_AVERAGE) -> float:
    """Unweighted mean of sentence-level LE."""
    if len(sents) == 0:
        raise DataError("locality entropy of an empty corpus")
    return float(np.mean([locality_entropy(s, head_reduction) for s in sents]))


def layer_le(sents: Sequence[SentenceAttn]) -> List[float]:
    """Per-layer corpus LE (mean over sentences of that layer's mean row entropy)."""
    if len(sents) == 0:
        raise DataError("locality entropy of an empty corpus")
    num_layers = sents[0].num_layers
    return [float(np.mean([entropy_bits(_normalised_rows(s.layers[i])).mean() for s in sents]))
            for i in range(num_layers)]


def top_attended(row: Sequence[float], k: int = 3) -> List[Tuple[int, float]]:
    """The k most attended source positions of one distribution row, ties by index."""
    row = np.asarray(row, dtype=np.float64)
    order = np.lexsort((np.arange(row.size), -row))[:k]
    return [(int(j), float(row[j])) for j in order]


# ==================== GATES ====================

def _local_weights_by_layer(gate_sets: Sequence[Sequence[Optional[np.ndarray]]]) -> List[Optional[np.ndarray]]:
    if len(gate_sets) == 0:
        raise DataError("gate importance of an empty corpus")
    num_layers = max(len(gates) for gates in gate_sets)
    pooled: List[Optional[np.ndarray]] = []
    for layer in range(num_layers):
        values = [np.asarray(gates[layer], dtype=np.float64).reshape(-1)
                  for gates in gate_sets if layer < len(gates) and gates[layer] is not None]
        pooled.append(1.0 - np.concatenate(values) if values else None)
    return pooled


def gate_importance(gate_sets: Sequence[Sequence[Optional[np.ndarray]]]) -> Dict[int, Optional[float]]:
    """
    Importance of localness per 1-based decoder layer: mean of (1 - g) over
    every sentence and target position. Layers without CCAN map to None.
    """
    return {i + 1: (None if local is None else float(local.mean()))
            for i, local in enumerate(_local_weights_by_layer(gate_sets))}


def gate_importance_stats(gate_sets: Sequence[Sequence[Optional[np.ndarray]]]) -> Dict[int, Optional[Dict[str, float]]]:
    return {i + 1: (None if local is None else {"mean": float(local.mean()), "std": float(local.std()),
                                                 "count": int(local.size)})
            for i, local in enumerate(_local_weights_by_layer(gate_sets))}


# ==================== N-GRAMS ====================

def ngram_precision(hyp: Sequence, ref: Sequence, n: int) -> float:
    """Clipped n-gram precision of one sentence; 0 when the hypothesis has no n-grams."""
    if n < 1:
        raise ConfigError(f"n-gram order must be >= 1, got {n}")
    if len(hyp) < n:
        return 0.0
    return float(modified_precision([list(ref)], list(hyp), n))


def corpus_ngram_precision(hyps: Sequence[Sequence], refs: Sequence[Sequence], n: int) -> float:
    """Counts summed over the corpus before dividing; sentences shorter than n add nothing."""
    if n < 1:
        raise ConfigError(f"n-gram order must be >= 1, got {n}")
    _check_parallel(hyps, refs)
    matched = total = 0
    for hyp, ref in zip(hyps, refs):
        if len(hyp) < n:
            continue
        p = modified_precision([list(ref)], list(hyp), n)
        matched += p.numerator
        total += p.denominator
    return matched / total if total else 0.0


def ngram_precision_rows(hyps_a: Sequence[Sequence], hyps_b: Sequence[Sequence], refs: Sequence[Sequence],
                         max_n: int = 9) -> List[Dict[str, float]]:
    """One row per order n = 1..max_n with both corpus precisions and their difference."""
    _check_parallel(hyps_a, refs)
    _check_parallel(hyps_b, refs)
    rows = []
    for n in range(1, max_n + 1):
        a = corpus_ngram_precision(hyps_a, refs, n)
        b = corpus_ngram_precision(hyps_b, refs, n)
        rows.append({"n": n, "precision_a": a, "precision_b": b, "delta": a - b})
    return rows


def ngram_precision_delta(hyps_a: Sequence[Sequence], hyps_b: Sequence[Sequence], refs: Sequence[Sequence],
                          max_n: int = 9) -> Dict[int, float]:
    """precision(A) - precision(B) for n = 1..max_n."""
    return {row["n"]: row["delta"] for row in ngram_precision_rows(hyps_a, hyps_b, refs, max_n)}


def _check_parallel(hyps: Sequence, refs: Sequence) -> None:
    if len(hyps) != len(refs):
        raise DataError(f"corpus size mismatch: {len(hyps)} hypotheses vs {len(refs)} references")


# ==================== BLEU ====================

def bleu_order(refs: Sequence[Sequence], max_n: int = 4) -> int:
    """Highest n-gram order every reference can supply, capped at max_n."""
    return max(1, min(max_n, min(len(r) for r in refs)))


def _bleu(hyps: Sequence[Sequence], refs: Sequence[Sequence], order: int) -> float:
    weights = (1.0 / order,) * order
    with warnings.catch_warnings():
        # nltk warns on every zero n-gram count
        warnings.simplefilter("ignore", UserWarning)
        score = nltk_corpus_bleu([[list(r)] for r in refs], [list(h) for h in hyps], weights=weights)
    return 100.0 * float(score)


def corpus_bleu(hyps: Sequence[Sequence], refs: Sequence[Sequence], max_n: int = 4) -> float:
    """
    Corpus BLEU in [0, 100]: clipped counts aggregated over all sentences, brevity
    penalty, uniform weights and no smoothing. A zero count at any order drives the
    score to (numerically) zero.

    The order is BLEU-4 unless some reference is shorter than four tokens; then it
    drops to the shortest reference length, so an identical corpus still scores 100.
    """
    _check_parallel(hyps, refs)
    if len(hyps) == 0:
        raise DataError("BLEU of an empty corpus")
    return _bleu(hyps, refs, bleu_order(refs, max_n))


def paired_bootstrap(hyps_a: Sequence[Sequence], hyps_b: Sequence[Sequence], refs: Sequence[Sequence],
                     resamples: int = 1000, seed: int = 1, two_sided: bool = False) -> float:
    """
    Paired bootstrap over sentences.

    One-sided (default): the fraction of resampled corpora where BLEU(A) <= BLEU(B),
    i.e. the p-value for "A is better than B". Two-sided: min(1, 2 * min(p_le, p_ge)).
    Every resample is scored at the BLEU order of the full corpus.
    """
    if resamples < 100:
        raise ConfigError(f"paired bootstrap needs at least 100 resamples, got {resamples}")
    _check_parallel(hyps_a, refs)
    _check_parallel(hyps_b, refs)
    if len(refs) == 0:
        raise DataError("bootstrap over an empty corpus")
    order = bleu_order(refs)
    rng = make_rng(seed)
    size = len(refs)
    not_better = not_worse = 0
    for _ in range(resamples):
        idx = rng.integers(0, size, size=size)
        sample_refs = [refs[i] for i in idx]
        bleu_a = _bleu([hyps_a[i] for i in idx], sample_refs, order)
        bleu_b = _bleu([hyps_b[i] for i in idx], sample_refs, order)
        not_better += bleu_a <= bleu_b
        not_worse += bleu_a >= bleu_b
    p_le = not_better / resamples
    if not two_sided:
        return float(p_le)
    return float(min(1.0, 2.0 * min(p_le, not_worse / resamples)))
