# ccanlab/decoding.py
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from ccanlab.analysis import SentenceAttn
from ccanlab.common import BOS_ID, EOS_ID, MASK_ID, PAD_ID, SPECIAL_TOKENS, ConfigError, DataError
from ccanlab.model import AttnDump, NATModel, pad_sequences
from ccanlab.tensor import log_softmax, no_grad

logger = logging.getLogger(__name__)


@dataclass
class DecodeState:
    """One sentence during mask-predict: placed tokens, their probabilities and the iteration."""
    tokens: np.ndarray
    confidences: np.ndarray
    iteration: int
    masked: Optional[np.ndarray] = None


@dataclass
class DecodeOutput:
    tokens: List[List[int]]
    states: List[DecodeState] = field(default_factory=list)
    history: Optional[List[List[DecodeState]]] = None
    dump: Optional[AttnDump] = None
    model_calls: int = 0


def mask_schedule(length: int, iterations: int) -> List[int]:
    """Masks per iteration: n_k = ceil(T * (N - k + 1) / N) for k = 1..N."""
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    if length < 1:
        raise DataError(f"target length must be >= 1, got {length}")
    return [-(-length * (iterations - k + 1) // iterations) for k in range(1, iterations + 1)]


def _best_tokens(logits: np.ndarray, exclude_special: bool = True):
    """Argmax over the vocabulary (special ids excluded) and its renormalised probability."""
    scores = logits.astype(np.float64, copy=True)
    if exclude_special:
        scores[..., :len(SPECIAL_TOKENS)] = -np.inf
    logp = log_softmax(scores)
    best = np.argmax(logp, axis=-1)
    return best, np.exp(np.take_along_axis(logp, best[..., None], axis=-1)[..., 0])


def mask_predict(model: NATModel, src: np.ndarray, iterations: int = 10,
                 lengths: Optional[Union[int, Sequence[int]]] = None,
                 return_history: bool = False) -> DecodeOutput:
    """
    Iterative mask-predict over a padded source batch.

    Iteration 1 predicts every position from an all-MASK target. Iteration
    k >= 2 re-masks the n_k lowest-confidence tokens (ties broken by position)
    and re-predicts only those. Exactly `iterations` decoder calls are made.
    """
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    src = np.asarray(src)
    model.eval()
    with no_grad():
        enc = model.encode(src)
        src_pad = src == PAD_ID
        if lengths is None:
            target_lengths = model.predicted_lengths(enc, src_pad)
        else:
            target_lengths = np.broadcast_to(np.asarray(lengths, dtype=np.int64), (src.shape[0],)).copy()
        if np.any(target_lengths < 1):
            raise DataError(f"target length must be >= 1, got {target_lengths.min()}")
        if np.any(target_lengths > model.config.max_len):
            raise DataError(f"target length {target_lengths.max()} exceeds max_len {model.config.max_len}")

        width = int(target_lengths.max())
        valid = np.arange(width)[None, :] < target_lengths[:, None]
        tokens = np.where(valid, MASK_ID, PAD_ID).astype(np.int64)
        confidences = np.zeros(tokens.shape)
        history: List[List[DecodeState]] = [[] for _ in range(src.shape[0])]
        dump = None
        calls = 0

        for k in range(1, iterations + 1):
            if k > 1:
                for b, length in enumerate(target_lengths):
                    n_k = -(-int(length) * (iterations - k + 1) // iterations)
                    lowest = np.argsort(confidences[b, :length], kind="stable")[:n_k]
                    tokens[b, lowest] = MASK_ID
            masked = tokens == MASK_ID
            logits, dump = model.decode_cmlm(tokens, enc, src_pad)
            calls += 1
            best, prob = _best_tokens(logits.data)
            tokens = np.where(masked, best, tokens)
            confidences = np.where(masked, prob, confidences)
            if return_history:
                for b, length in enumerate(target_lengths):
                    history[b].append(DecodeState(tokens=tokens[b, :length].copy(),
                                                  confidences=confidences[b, :length].copy(),
                                                  iteration=k, masked=masked[b, :length].copy()))
        logger.debug(f"mask-predict finished {src.shape[0]} sentences with {calls} decoder calls")

    states = [DecodeState(tokens=tokens[b, :length].copy(), confidences=confidences[b, :length].copy(),
                          iteration=iterations)
              for b, length in enumerate(target_lengths)]
    return DecodeOutput(tokens=[s.tokens.tolist() for s in states], states=states,
                        history=history if return_history else None, dump=dump, model_calls=calls)


def greedy_at(model: NATModel, src: np.ndarray, max_len: Optional[int] = None,
              capture: bool = False) -> DecodeOutput:
    """
    BOS-seeded left-to-right argmax until EOS or `max_len` tokens.

    With `capture`, one teacher-forced pass over BOS + hypothesis records the
    cross-attention of the positions that produced each output token.
    """
    src = np.asarray(src)
    max_len = max_len or model.config.max_len
    model.eval()
    with no_grad():
        enc = model.encode(src)
        src_pad = src == PAD_ID
        bsz = src.shape[0]
        prefix = np.full((bsz, 1), BOS_ID, dtype=np.int64)
        finished = np.zeros(bsz, dtype=bool)
        calls = 0
        for _ in range(max_len):
            logits, _ = model.decode_at(prefix, enc, src_pad)
            calls += 1
            scores = logits.data[:, -1].astype(np.float64, copy=True)
            scores[:, [PAD_ID, BOS_ID, MASK_ID]] = -np.inf
            step = np.where(finished, PAD_ID, np.argmax(scores, axis=-1))
            prefix = np.concatenate([prefix, step[:, None]], axis=1)
            finished |= step == EOS_ID
            if finished.all():
                break

        hyps = []
        for row in prefix[:, 1:]:
            out = []
            for token in row:
                if token in (EOS_ID, PAD_ID):
                    break
                out.append(int(token))
            hyps.append(out)

        dump = None
        if capture:
            forced = pad_sequences([[BOS_ID] + h for h in hyps])
            _, dump = model.decode_at(forced, enc, src_pad)
    return DecodeOutput(tokens=hyps, dump=dump, model_calls=calls)


# ==================== CORPUS DECODING ====================

@dataclass
class CorpusDecode:
    hypotheses: List[List[int]]
    attention: Optional[List[SentenceAttn]] = None
    seconds: float = 0.0
    model_calls: int = 0


def _decode_batch(model: NATModel, batch: List[List[int]], mode: str, iterations: int, capture: bool, heads: bool):
    src = pad_sequences(batch)
    if mode == "at":
        out = greedy_at(model, src, capture=capture)
        sents = None
        if capture:
            sents = [out.dump.sentence(b, heads=heads, length=max(len(h), 1))
                     for b, h in enumerate(out.tokens)]
    else:
        out = mask_predict(model, src, iterations=iterations)
        sents = [out.dump.sentence(b, heads=heads) for b in range(len(batch))] if capture else None
    return out.tokens, sents, out.model_calls


def decode_corpus(model: NATModel, sources: Sequence[Sequence[int]], mode: str = "nat", iterations: int = 10,
                  batch_size: int = 64, workers: int = 1, capture: bool = False, heads: bool = False) -> CorpusDecode:
    """
    Decode a corpus in fixed-order batches. Batches are independent, so with
    `workers` > 1 they run on a thread pool; results keep input order.
    """
    if mode not in ("nat", "at"):
        raise ConfigError(f"decode mode must be 'nat' or 'at', got {mode!r}")
    if len(sources) == 0:
        return CorpusDecode(hypotheses=[], attention=[] if capture else None)
    batches = [list(sources[i:i + batch_size]) for i in range(0, len(sources), batch_size)]
    started = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda b: _decode_batch(model, b, mode, iterations, capture, heads),
                                    batches))
    else:
        results = [_decode_batch(model, b, mode, iterations, capture, heads) for b in batches]
    seconds = time.perf_counter() - started

    hypotheses, attention, calls = [], [] if capture else None, 0
    for tokens, sents, batch_calls in results:
        hypotheses.extend(tokens)
        calls += batch_calls
        if capture:
            attention.extend(sents)
    logger.info(f"Decoded {len(hypotheses)} sentences ({mode}) in {seconds:.2f}s with {calls} decoder calls")
    return CorpusDecode(hypotheses=hypotheses, attention=attention, seconds=seconds, model_calls=calls)
