# ccanlab/commands.py
"""
Command-line verbs. Each command is a plain click command; `lab.py` registers
them on the top-level group. Errors are raised as LabError subclasses and
turned into exit codes by `lab.main`.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
from click.core import ParameterSource

from ccanlab.analysis import (
    HEAD_AVERAGE, HEAD_ENTROPY, MetricsReport, corpus_bleu, corpus_le, gate_importance_stats, layer_le,
    ngram_precision_rows, paired_bootstrap, read_attention_dump, top_attended, write_attention_dump,
)
from ccanlab.checkpoint import average_checkpoints, load_checkpoint, save_checkpoint
from ccanlab.common import ConfigError, DataError, format_layers, parse_layer_spec, validate_tokens
from ccanlab.config import DEFAULT_SEED, MODES, TASKS, WORKERS, ModelConfig, RunConfig, TrainConfig, read_config_data
from ccanlab.data import Vocab, encode_records, gen_splits, read_jsonl, read_token_lines, write_token_lines
from ccanlab.decoding import decode_corpus
from ccanlab.model import parameter_count
from ccanlab.reporting import write_report
from ccanlab.training import ablation_grid, evaluate_model, run_ablation, train_from_config, write_table

logger = logging.getLogger(__name__)

# click parameter -> (RunConfig section or None for top level, field)
RUN_FLAGS = {
    "task": (None, "task"),
    "train_path": (None, "train_path"),
    "valid_path": (None, "valid_path"),
    "vocab_path": (None, "vocab_path"),
    "out_dir": (None, "out_dir"),
    "mode": ("model", "mode"),
    "d_model": ("model", "d_model"),
    "n_heads": ("model", "n_heads"),
    "enc_layers": ("model", "enc_layers"),
    "dec_layers": ("model", "dec_layers"),
    "d_ff": ("model", "d_ff"),
    "win": ("model", "win"),
    "max_len": ("model", "max_len"),
    "length_offset_range": ("model", "length_offset_range"),
    "dropout": ("model", "dropout"),
    "length_loss_weight": ("model", "length_loss_weight"),
    "lr": ("train", "lr"),
    "warmup_steps": ("train", "warmup_steps"),
    "batch_size": ("train", "batch_size"),
    "max_steps": ("train", "max_steps"),
    "val_every": ("train", "val_every"),
    "keep_top": ("train", "keep_top"),
    "average_top": ("train", "average_top"),
    "clip_norm": ("train", "clip_norm"),
}

_model_defaults = ModelConfig(seed=DEFAULT_SEED)
_train_defaults = TrainConfig()
_run_defaults = RunConfig()


def run_options(func):
    """Flags mirroring RunConfig fields; explicitly passed flags override --config."""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config."),
        click.option("--task", type=click.Choice(TASKS), default=_run_defaults.task, show_default=True),
        click.option("--train", "train_path", default="", help="Training set (.jsonl)."),
        click.option("--valid", "valid_path", default="", help="Validation set (.jsonl)."),
        click.option("--vocab", "vocab_path", default="", help="Vocab file."),
        click.option("--out-dir", default=_run_defaults.out_dir, show_default=True),
        click.option("--mode", type=click.Choice(MODES), default=_model_defaults.mode, show_default=True),
        click.option("--d-model", type=int, default=_model_defaults.d_model, show_default=True),
        click.option("--n-heads", type=int, default=_model_defaults.n_heads, show_default=True),
        click.option("--enc-layers", type=int, default=_model_defaults.enc_layers, show_default=True),
        click.option("--dec-layers", type=int, default=_model_defaults.dec_layers, show_default=True),
        click.option("--d-ff", type=int, default=_model_defaults.d_ff, show_default=True),
        click.option("--win", type=int, default=_model_defaults.win, show_default=True),
        click.option("--ccan-layers", default="1..L", show_default=True,
                     help='Decoder layers with CCAN, e.g. "1", "1-3", "L", "L-2..L", "none".'),
        click.option("--max-len", type=int, default=_model_defaults.max_len, show_default=True),
        click.option("--length-offset-range", type=int, default=_model_defaults.length_offset_range,
                     show_default=True),
        click.option("--dropout", type=float, default=_model_defaults.dropout, show_default=True),
        click.option("--length-loss-weight", type=float, default=_model_defaults.length_loss_weight,
                     show_default=True),
        click.option("--lr", type=float, default=_train_defaults.lr, show_default=True),
        click.option("--warmup-steps", type=int, default=_train_defaults.warmup_steps, show_default=True),
        click.option("--batch-size", type=int, default=_train_defaults.batch_size, show_default=True),
        click.option("--max-steps", type=int, default=_train_defaults.max_steps, show_default=True),
        click.option("--val-every", type=int, default=_train_defaults.val_every, show_default=True),
        click.option("--keep-top", type=int, default=_train_defaults.keep_top, show_default=True),
        click.option("--average/--no-average", "average_top", default=_train_defaults.average_top,
                     show_default=True),
        click.option("--clip-norm", type=float, default=_train_defaults.clip_norm, show_default=True),
        click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _explicit(ctx: click.Context, name: str) -> bool:
    return ctx.get_parameter_source(name) not in (ParameterSource.DEFAULT, ParameterSource.DEFAULT_MAP, None)


def build_run_config(ctx: click.Context, values: Dict[str, Any]) -> RunConfig:
    """Dataclass defaults < --config file < flags passed on the command line."""
    data = read_config_data(values["config_path"]) if values.get("config_path") else {}
    data["model"] = dict(data.get("model") or {})
    data["train"] = dict(data.get("train") or {})
    for name, (section, key) in RUN_FLAGS.items():
        if _explicit(ctx, name):
            (data if section is None else data[section])[key] = values[name]
    if _explicit(ctx, "ccan_layers"):
        dec_layers = data["model"].get("dec_layers", _model_defaults.dec_layers)
        data["model"]["ccan_layers"] = list(parse_layer_spec(values["ccan_layers"], dec_layers))
    if _explicit(ctx, "seed") or "seed" not in data:
        data["seed"] = values["seed"]
    if _explicit(ctx, "seed") or "seed" not in data["model"]:
        data["model"]["seed"] = data["seed"]
    return RunConfig.from_dict(data)


def _require(path: str, what: str) -> str:
    if not path:
        raise ConfigError(f"missing {what} path")
    if not Path(path).exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _save_report(report: MetricsReport, out: Optional[str]) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        report.save(out)
        logger.info(f"Wrote {report.kind} metrics to {out}")
    click.echo(json.dumps(report.scalars, sort_keys=True))


# ==================== DATA ====================

@click.command("gen-data")
@click.option("--task", type=click.Choice(TASKS), required=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--train", "train_size", type=int, default=10000, show_default=True)
@click.option("--valid", "valid_size", type=int, default=1000, show_default=True)
@click.option("--test", "test_size", type=int, default=1000, show_default=True)
@click.option("--min-len", type=int, default=8, show_default=True)
@click.option("--max-len", type=int, default=16, show_default=True)
@click.option("--vocab-size", type=int, default=64, show_default=True, help="Number of content tokens.")
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
def gen_data(task, out_dir, train_size, valid_size, test_size, min_len, max_len, vocab_size, seed):
    """Generate train/valid/test splits of a synthetic task plus vocab.txt."""
    paths = gen_splits(task, {"train": train_size, "valid": valid_size, "test": test_size}, out_dir,
                       (min_len, max_len), vocab_size, seed)
    for name, path in paths.items():
        click.echo(f"{name}: {path}")


# ==================== TRAINING ====================

@click.command("train")
@run_options
@click.pass_context
def train(ctx, **values):
    """Train a CMLM (or AT) model, keeping the best checkpoints."""
    config = build_run_config(ctx, values)
    _require(config.train_path, "training set")
    _require(config.valid_path, "validation set")
    _require(config.vocab_path, "vocab")
    result = train_from_config(config)
    click.echo(f"steps: {result.steps}")
    click.echo(f"best validation accuracy: {result.best_score}")
    click.echo(f"checkpoint: {result.final_path}")


@click.command("average")
@click.argument("checkpoints", nargs=-1, required=True)
@click.option("--out", required=True, help="Averaged checkpoint path.")
def average(checkpoints, out):
    """Average the parameters of checkpoints from one run."""
    save_checkpoint(average_checkpoints(list(checkpoints)), out)
    click.echo(f"averaged {len(checkpoints)} checkpoints into {out}")


@click.command("ablate")
@run_options
@click.option("--test", "test_path", required=True, help="Test set (.jsonl).")
@click.option("--wins", default="3,5,7,9,11", show_default=True, help="Windows tried with CCAN on all layers.")
@click.option("--placements", default="1;1-3;L;L-2..L;1..L", show_default=True,
              help="Semicolon separated layer placements tried with the base window.")
@click.option("--empty/--no-empty", "include_empty", default=True, show_default=True,
              help="Include the no-CCAN baseline row.")
@click.option("--iterations", type=int, default=10, show_default=True)
@click.option("--workers", type=int, default=WORKERS, show_default=True)
@click.pass_context
def ablate(ctx, test_path, wins, placements, include_empty, iterations, workers, **values):
    """Train and evaluate a grid of window sizes and CCAN placements."""
    base = build_run_config(ctx, values)
    for path, what in ((base.train_path, "training set"), (base.valid_path, "validation set"),
                       (base.vocab_path, "vocab"), (test_path, "test set")):
        _require(path, what)
    try:
        win_list = [int(w) for w in wins.split(",") if w.strip()]
    except ValueError:
        raise ConfigError(f"--wins must be comma separated integers, got {wins!r}")
    layer_list = [parse_layer_spec(p, base.model.dec_layers) for p in placements.split(";") if p.strip()]
    grid = ablation_grid(base.model.win, base.model.dec_layers, win_list, layer_list, include_empty)
    table = run_ablation(base, grid, test_path, iterations=iterations, workers=workers)
    path = str(Path(base.out_dir) / "ablation.csv")
    write_table(table, path)
    click.echo(f"{len(table)} grid points written to {path}")


# ==================== DECODING ====================

def _load_for_decoding(checkpoint_path: str, mode: Optional[str], vocab_path: Optional[str]):
    checkpoint = load_checkpoint(checkpoint_path)
    vocab = Vocab(checkpoint.vocab)
    if vocab_path and Vocab.load(vocab_path) != vocab:
        raise DataError(f"vocab {vocab_path} does not match the vocab stored in {checkpoint_path}")
    trained = checkpoint.config.model.mode
    mode = mode or trained
    if mode != trained:
        raise ConfigError(f"checkpoint was trained in {trained} mode and cannot decode in {mode} mode")
    return checkpoint.build_model(), vocab, mode


def _encode_sources(sentences: List[List[str]], vocab: Vocab, max_len: int) -> List[List[int]]:
    ids = []
    for i, tokens in enumerate(sentences):
        try:
            encoded = vocab.encode(tokens)
            validate_tokens(encoded, len(vocab), max_len)
        except DataError as e:
            raise DataError(f"input line {i + 1}: {e}")
        ids.append(encoded)
    return ids


@click.command("translate")
@click.option("--checkpoint", required=True)
@click.option("--input", "input_path", required=True, help="Source sentences (.txt or .jsonl).")
@click.option("--output", required=True, help="Hypotheses, one per line.")
@click.option("--mode", type=click.Choice(MODES), default=None, help="Defaults to the checkpoint's mode.")
@click.option("--iterations", type=int, default=10, show_default=True)
@click.option("--dump-attn", default=None, help="Write per-sentence cross-attention and gates (.jsonl).")
@click.option("--dump-heads", is_flag=True, help="Also dump per-head distributions.")
@click.option("--vocab", "vocab_path", default=None, help="Check the input vocab against the checkpoint.")
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--workers", type=int, default=WORKERS, show_default=True)
@click.option("--timing", default=None, help="Write decode time and parameter counts to this JSON file.")
def translate(checkpoint, input_path, output, mode, iterations, dump_attn, dump_heads, vocab_path, batch_size,
              workers, timing):
    """Decode a source file with mask-predict (nat) or greedy search (at)."""
    model, vocab, mode = _load_for_decoding(checkpoint, mode, vocab_path)
    sources = _encode_sources(read_token_lines(input_path), vocab, model.config.max_len)
    decoded = decode_corpus(model, sources, mode=mode, iterations=iterations, batch_size=batch_size,
                            workers=workers, capture=bool(dump_attn), heads=dump_heads)
    write_token_lines((vocab.decode(h) for h in decoded.hypotheses), output)
    if dump_attn:
        write_attention_dump(decoded.attention, dump_attn)
    if timing:
        counts = parameter_count(model)
        summary = {"mode": mode, "iterations": iterations, "sentences": len(sources),
                   "model_calls": decoded.model_calls, "seconds": decoded.seconds,
                   "ms_per_sentence": 1000.0 * decoded.seconds / max(len(sources), 1),
                   "parameters": counts["total"], "gate_parameters": counts["gate"]}
        with open(timing, "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
    click.echo(f"translated {len(sources)} sentences into {output}")


@click.command("eval")
@click.option("--checkpoint", required=True)
@click.option("--data", "data_path", required=True, help="Test set (.jsonl).")
@click.option("--mode", type=click.Choice(MODES), default=None)
@click.option("--iterations", type=int, default=10, show_default=True)
@click.option("--out", default=None, help="Metrics JSON.")
@click.option("--hyps", default=None, help="Also write the hypotheses here.")
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--workers", type=int, default=WORKERS, show_default=True)
@click.option("--timing", is_flag=True, help="Record decode time in the metrics.")
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
def evaluate(checkpoint, data_path, mode, iterations, out, hyps, batch_size, workers, timing, seed):
    """Masked-token accuracy, BLEU and locality entropy on a test set."""
    model, vocab, mode = _load_for_decoding(checkpoint, mode, None)
    sources, targets = encode_records(read_jsonl(data_path), vocab, model.config.max_len)
    if not sources:
        raise DataError(f"test set {data_path} is empty")
    report, hypotheses = evaluate_model(model, sources, targets, mode=mode, iterations=iterations, seed=seed,
                                        batch_size=batch_size, workers=workers, timing=timing)
    report.meta["checkpoint"] = Path(checkpoint).name
    if hyps:
        write_token_lines((vocab.decode(h) for h in hypotheses), hyps)
    _save_report(report, out)


# ==================== ANALYSIS ====================

@click.command("analyze-le")
@click.option("--dump", "dump_path", required=True, help="Attention dump from translate --dump-attn.")
@click.option("--head-reduction", type=click.Choice([HEAD_AVERAGE, HEAD_ENTROPY]), default=HEAD_AVERAGE,
              show_default=True)
@click.option("--distribution", type=click.Choice(["effective", "global"]), default="effective",
              show_default=True)
@click.option("--topk", type=int, default=0, help="List the k most attended sources per target position.")
@click.option("--out", default=None, help="Metrics JSON.")
def analyze_le(dump_path, head_reduction, distribution, topk, out):
    """Corpus and per-layer locality entropy of an attention dump."""
    sents = read_attention_dump(dump_path, kind=distribution)
    if not sents:
        raise DataError(f"attention dump {dump_path} has no sentences")
    if head_reduction == HEAD_ENTROPY and distribution == "global":
        raise ConfigError("per-head dumps hold effective distributions only")
    report = MetricsReport(kind="le", meta={"head_reduction": head_reduction, "distribution": distribution,
                                            "sentences": len(sents)})
    report.scalars["le"] = corpus_le(sents, head_reduction)
    report.series["layer_le"] = [{"layer": i + 1, "le": v} for i, v in enumerate(layer_le(sents))]
    if topk > 0:
        rows = []
        for s, sent in enumerate(sents):
            for pos, row in enumerate(sent.layers[-1]):
                for rank, (j, weight) in enumerate(top_attended(row, topk), start=1):
                    rows.append({"sentence": s, "position": pos, "rank": rank, "source": j, "weight": weight})
        report.series["top_attended"] = rows
    _save_report(report, out)


@click.command("analyze-gates")
@click.option("--dump", "dump_path", required=True, help="Attention dump from translate --dump-attn.")
@click.option("--out", default=None, help="Metrics JSON.")
def analyze_gates(dump_path, out):
    """Importance of the local branch (mean 1 - g) per decoder layer."""
    sents = read_attention_dump(dump_path)
    if not sents:
        raise DataError(f"attention dump {dump_path} has no sentences")
    stats = gate_importance_stats([sent.gates for sent in sents])
    report = MetricsReport(kind="gates", meta={"sentences": len(sents)})
    report.series["gate_importance"] = [
        {"layer": layer, "importance": None if s is None else s["mean"], "std": None if s is None else s["std"],
         "count": 0 if s is None else s["count"]}
        for layer, s in stats.items()
    ]
    present = [s["mean"] for s in stats.values() if s is not None]
    report.scalars["mean_importance"] = sum(present) / len(present) if present else None
    report.meta["ccan_layers"] = format_layers([layer for layer, s in stats.items() if s is not None])
    _save_report(report, out)


@click.command("analyze-ngrams")
@click.option("--hyp-a", required=True, help="Hypotheses of system A.")
@click.option("--hyp-b", required=True, help="Hypotheses of system B.")
@click.option("--ref", required=True, help="References (.txt, or .jsonl using 'tgt').")
@click.option("--max-n", type=int, default=9, show_default=True)
@click.option("--resamples", type=int, default=1000, show_default=True, help="Bootstrap resamples; 0 skips.")
@click.option("--two-sided", is_flag=True)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--out", default=None, help="Metrics JSON.")
def analyze_ngrams(hyp_a, hyp_b, ref, max_n, resamples, two_sided, seed, out):
    """n-gram precision of A minus B for n = 1..max-n, BLEU of both and bootstrap significance."""
    hyps_a = read_token_lines(hyp_a)
    hyps_b = read_token_lines(hyp_b)
    refs = read_token_lines(ref, field="tgt")
    if not refs:
        raise DataError(f"reference file {ref} is empty")
    if max_n < 1:
        raise ConfigError(f"--max-n must be >= 1, got {max_n}")
    report = MetricsReport(kind="ngrams", meta={"max_n": max_n, "sentences": len(refs)})
    report.series["precision_delta"] = ngram_precision_rows(hyps_a, hyps_b, refs, max_n)
    report.scalars["bleu_a"] = corpus_bleu(hyps_a, refs)
    report.scalars["bleu_b"] = corpus_bleu(hyps_b, refs)
    if resamples:
        report.scalars["p_value"] = paired_bootstrap(hyps_a, hyps_b, refs, resamples=resamples, seed=seed,
                                                     two_sided=two_sided)
        report.meta["bootstrap"] = {"resamples": resamples, "seed": seed, "two_sided": two_sided}
    _save_report(report, out)


@click.command("report")
@click.argument("inputs", nargs=-1, required=True)
@click.option("--out-dir", required=True, help="Directory for report.json and the series CSVs.")
def report(inputs, out_dir):
    """Merge metric files into report.json plus plot-ready CSV series."""
    written = write_report(list(inputs), out_dir)
    for name, path in written.items():
        click.echo(f"{name}: {path}")


COMMANDS = [gen_data, train, average, ablate, translate, evaluate, analyze_le, analyze_gates, analyze_ngrams, report]
