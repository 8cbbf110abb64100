# ccanlab/training.py
"""
Training loop, validation, evaluation and the ablation grid.

A run writes into its output directory:
    train_log.csv      step,loss,val (val empty except on validation steps)
    step<N>.ckpt       the best `keep_top` checkpoints by validation score
    last.ckpt          the latest validated parameters
    averaged.ckpt      mean of the kept checkpoints (when enabled)
    config.json        the effective run config
"""

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ccanlab.analysis import MetricsReport, corpus_bleu, corpus_le, layer_le
from ccanlab.checkpoint import Checkpoint, average_checkpoints, load_checkpoint, save_checkpoint, save_model
from ccanlab.common import BOS_ID, EOS_ID, MASK_ID, PAD_ID, DataError, NonFiniteError, format_layers
from ccanlab.config import WORKERS, RunConfig, save_run_config
from ccanlab.data import Vocab, batches, encode_records, read_jsonl
from ccanlab.decoding import decode_corpus
from ccanlab.model import NATModel, TokenBatch, pad_sequences, parameter_count
from ccanlab.tensor import Adam, clip_grad_norm, make_rng, no_grad

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "loss", "val"]
ABLATION_COLUMNS = ["setting", "win", "ccan_layers", "token_accuracy", "bleu", "le"]
FLOAT_FORMAT = "%.6f"
VALIDATION_SEED_OFFSET = 7919


# ==================== SCHEDULE & VALIDATION ====================

def learning_rate(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to `base_lr`, then inverse square-root decay."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


def masked_token_accuracy(model: NATModel, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
                          seed: int, batch_size: int = 64) -> float:
    """
    CMLM models: accuracy of argmax predictions at randomly masked target
    positions (masking drawn from a fixed-seed rng, so every call sees the
    same masks). AT models: teacher-forced next-token accuracy including EOS.
    """
    if len(sources) == 0:
        raise DataError("validation set is empty")
    rng = make_rng(seed)
    model.eval()
    correct = total = 0
    with no_grad():
        for idx in batches(len(sources), batch_size):
            batch = TokenBatch.from_sequences([sources[i] for i in idx], [targets[i] for i in idx])
            enc = model.encode(batch.src)
            if model.config.mode == "at":
                prefix = pad_sequences([[BOS_ID] + list(targets[i]) for i in idx])
                gold = pad_sequences([list(targets[i]) + [EOS_ID] for i in idx])
                logits, _ = model.decode_at(prefix, enc, batch.src_pad)
                keep = gold != PAD_ID
            else:
                keep = np.zeros(batch.tgt.shape, dtype=bool)
                for b, length in enumerate(batch.tgt_lengths):
                    k = rng.integers(1, length + 1)
                    keep[b, rng.permutation(length)[:k]] = True
                gold = batch.tgt
                logits, _ = model.decode_cmlm(np.where(keep, MASK_ID, batch.tgt), enc, batch.src_pad)
            scores = logits.data.copy()
            excluded = [PAD_ID, BOS_ID, MASK_ID] if model.config.mode == "at" else [PAD_ID, BOS_ID, EOS_ID, MASK_ID]
            scores[..., excluded] = -np.inf
            predicted = np.argmax(scores, axis=-1)
            correct += int(np.sum((predicted == gold) & keep))
            total += int(keep.sum())
    return correct / total


# ==================== TRAINING ====================

@dataclass
class TrainResult:
    out_dir: str
    steps: int
    log_path: str
    last_path: Optional[str]
    kept: List[Tuple[float, int, str]] = field(default_factory=list)
    averaged_path: Optional[str] = None
    best_score: Optional[float] = None

    @property
    def final_path(self) -> Optional[str]:
        """Checkpoint to evaluate: the average when present, else the best kept one."""
        if self.averaged_path:
            return self.averaged_path
        return self.kept[0][2] if self.kept else self.last_path


def _write_log(rows: List[Dict], path: str) -> None:
    pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def train_model(config: RunConfig, vocab: Vocab, train_pairs: Tuple[List[List[int]], List[List[int]]],
                valid_pairs: Tuple[List[List[int]], List[List[int]]]) -> TrainResult:
    """
    Run Adam with warmup and gradient clipping for `max_steps`, validating every
    `val_every` steps and at the end. A non-finite loss or gradient aborts the
    run with the log and the last good checkpoint left in place.
    """
    config.validate()
    tc = config.train
    if config.model.vocab_size != len(vocab):
        raise DataError(f"model vocab_size {config.model.vocab_size} does not match vocab of {len(vocab)} tokens")
    train_src, train_tgt = train_pairs
    if len(train_src) == 0:
        raise DataError("training set is empty")

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(config, str(out / "config.json"))
    log_path = str(out / "train_log.csv")

    model = NATModel(config.model)
    counts = parameter_count(model)
    logger.info(f"Training {config.model.mode} model on {len(train_src)} pairs, "
                f"CCAN layers {format_layers(config.model.ccan_layers) if config.model.mode == 'nat' else 'none'}, "
                f"{counts['total']} parameters ({counts['gate']} gate)")
    params = model.named_parameters()
    optimizer = Adam(params, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
    rng = make_rng(config.seed)
    val_seed = config.seed + VALIDATION_SEED_OFFSET

    rows: List[Dict] = []
    kept: List[Tuple[float, int, str]] = []
    last_path = None
    queue: List[np.ndarray] = []
    step = 0
    result = TrainResult(out_dir=str(out), steps=0, log_path=log_path, last_path=None)

    try:
        while step < tc.max_steps:
            if not queue:
                queue = batches(len(train_src), tc.batch_size, rng)
            idx = queue.pop(0)
            step += 1
            model.train()
            batch = TokenBatch.from_sequences([train_src[i] for i in idx], [train_tgt[i] for i in idx])
            breakdown = model.loss(batch, rng)
            loss = breakdown.total.item()
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss {loss} at step {step}")
            breakdown.total.backward()
            clip_grad_norm(params.values(), tc.clip_norm)
            optimizer.step(lr=learning_rate(step, tc.lr, tc.warmup_steps))
            row = {"step": step, "loss": loss, "val": None}

            if step % tc.val_every == 0 or step == tc.max_steps:
                score = masked_token_accuracy(model, *valid_pairs, seed=val_seed, batch_size=tc.batch_size)
                row["val"] = score
                last_path = str(out / "last.ckpt")
                checkpoint = save_model(model, config, vocab.tokens, last_path, step=step, val_score=score)
                kept = _keep_top(kept, checkpoint, score, step, out, tc.keep_top)
                logger.info(f"step {step}: loss {loss:.4f}, validation accuracy {score:.4f}")
            rows.append(row)
    except NonFiniteError:
        _write_log(rows, log_path)
        logger.error(f"Aborting at step {step}; last good checkpoint: {last_path or 'none'}")
        raise

    _write_log(rows, log_path)
    result.steps = step
    result.last_path = last_path
    result.kept = kept
    result.best_score = kept[0][0] if kept else None
    if tc.average_top and kept:
        result.averaged_path = str(out / "averaged.ckpt")
        save_checkpoint(average_checkpoints([path for _, _, path in kept]), result.averaged_path)
    return result


def _keep_top(kept: List[Tuple[float, int, str]], checkpoint: Checkpoint, score: float, step: int,
              out: Path, keep_top: int) -> List[Tuple[float, int, str]]:
    """Maintain the best `keep_top` checkpoints, best first; earlier steps win ties."""
    path = str(out / f"step{step}.ckpt")
    candidates = sorted(kept + [(score, step, path)], key=lambda item: (-item[0], item[1]))
    survivors, dropped = candidates[:keep_top], candidates[keep_top:]
    if any(p == path for _, _, p in survivors):
        save_checkpoint(checkpoint, path)
    for _, _, p in dropped:
        if p != path and os.path.exists(p):
            os.remove(p)
    return survivors


def load_split(path: str, vocab: Vocab, max_len: int) -> Tuple[List[List[int]], List[List[int]]]:
    return encode_records(read_jsonl(path), vocab, max_len)


def train_from_config(config: RunConfig) -> TrainResult:
    vocab = Vocab.load(config.vocab_path)
    config.model.vocab_size = len(vocab)
    train_pairs = load_split(config.train_path, vocab, config.model.max_len)
    valid_pairs = load_split(config.valid_path, vocab, config.model.max_len)
    return train_model(config, vocab, train_pairs, valid_pairs)


# ==================== EVALUATION ====================

def evaluate_model(model: NATModel, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
                   mode: Optional[str] = None, iterations: int = 10, seed: int = 1, batch_size: int = 64,
                   workers: int = WORKERS, timing: bool = False) -> Tuple[MetricsReport, List[List[int]]]:
    """
    Masked-token accuracy, corpus BLEU and corpus LE of one model on a test set.
    Returns the report and the hypotheses.
    """
    mode = mode or model.config.mode
    accuracy = masked_token_accuracy(model, sources, targets, seed=seed + VALIDATION_SEED_OFFSET,
                                     batch_size=batch_size)
    decoded = decode_corpus(model, sources, mode=mode, iterations=iterations, batch_size=batch_size,
                            workers=workers, capture=True)
    report = MetricsReport(kind="eval", meta={"mode": mode, "iterations": iterations, "sentences": len(sources)})
    report.scalars["token_accuracy"] = accuracy
    report.scalars["bleu"] = corpus_bleu(decoded.hypotheses, targets)
    report.scalars["le"] = corpus_le(decoded.attention)
    report.scalars["model_calls"] = float(decoded.model_calls)
    if mode == "nat":
        report.scalars["length_accuracy"] = float(np.mean([len(h) == len(t)
                                                           for h, t in zip(decoded.hypotheses, targets)]))
    report.series["layer_le"] = [{"layer": i + 1, "le": value} for i, value in enumerate(layer_le(decoded.attention))]
    counts = parameter_count(model)
    report.meta["parameters"] = counts["total"]
    report.meta["gate_parameters"] = counts["gate"]
    if timing:
        report.meta["seconds"] = decoded.seconds
        report.meta["ms_per_sentence"] = 1000.0 * decoded.seconds / max(len(sources), 1)
    return report, decoded.hypotheses


# ==================== ABLATION ====================

@dataclass(frozen=True)
class AblationPoint:
    setting: str
    win: int
    ccan_layers: Tuple[int, ...]


def ablation_grid(base_win: int, num_layers: int, wins: Sequence[int] = (3, 5, 7, 9, 11),
                  placements: Sequence[Tuple[int, ...]] = (), include_empty: bool = True) -> List[AblationPoint]:
    """
    The no-CCAN baseline, then every window with CCAN on all layers, then every
    layer placement with the base window.
    """
    every = tuple(range(1, num_layers + 1))
    grid = []
    if include_empty:
        grid.append(AblationPoint(setting="none", win=base_win, ccan_layers=()))
    for win in wins:
        grid.append(AblationPoint(setting=f"win={win}", win=win, ccan_layers=every))
    for layers in placements:
        grid.append(AblationPoint(setting=f"layers={format_layers(layers)}", win=base_win,
                                  ccan_layers=tuple(layers)))
    return grid


def run_ablation(base: RunConfig, grid: Sequence[AblationPoint], test_path: str, iterations: int = 10,
                 workers: int = WORKERS) -> pd.DataFrame:
    """Train and evaluate each grid point with the shared seed; identical settings are trained once."""
    if not grid:
        raise DataError("empty ablation grid")
    vocab = Vocab.load(base.vocab_path)
    base.model.vocab_size = len(vocab)
    train_pairs = load_split(base.train_path, vocab, base.model.max_len)
    valid_pairs = load_split(base.valid_path, vocab, base.model.max_len)
    test_src, test_tgt = load_split(test_path, vocab, base.model.max_len)

    cache: Dict[Tuple[int, Tuple[int, ...]], Dict] = {}
    rows = []
    for point in grid:
        # the window is irrelevant without CCAN layers
        key = (point.win if point.ccan_layers else 0, point.ccan_layers)
        if key not in cache:
            slug = point.setting.replace("=", "-").replace(",", "_")
            config = replace(base, model=replace(base.model, win=point.win, ccan_layers=point.ccan_layers),
                             out_dir=str(Path(base.out_dir) / slug))
            logger.info(f"Ablation point {point.setting}")
            result = train_model(config, vocab, train_pairs, valid_pairs)
            model = _load_final(result)
            report, _ = evaluate_model(model, test_src, test_tgt, iterations=iterations, seed=base.seed,
                                       batch_size=base.train.batch_size, workers=workers)
            cache[key] = report.scalars
        scalars = cache[key]
        rows.append({"setting": point.setting, "win": point.win if point.ccan_layers else None,
                     "ccan_layers": format_layers(point.ccan_layers),
                     "token_accuracy": scalars["token_accuracy"], "bleu": scalars["bleu"], "le": scalars["le"]})
    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    table["win"] = table["win"].astype("Int64")
    return table


def _load_final(result: TrainResult) -> NATModel:
    path = result.final_path
    if path is None:
        raise DataError(f"run in {result.out_dir} produced no checkpoint")
    return load_checkpoint(path).build_model()


def write_table(table: pd.DataFrame, path: str) -> None:
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT)
