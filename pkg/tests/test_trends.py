# tests/test_trends.py
"""
Trained-model trends on the synthetic tasks. Every test here trains real models
and is marked slow; the local-fusion runs are shared across the module.
"""
from dataclasses import replace

import numpy as np
import pytest

from ccanlab.checkpoint import load_checkpoint
from ccanlab.config import ModelConfig, RunConfig, TrainConfig
from ccanlab.data import Vocab, gen_splits
from ccanlab.decoding import decode_corpus
from ccanlab.training import evaluate_model, load_split, train_from_config

SEEDS = (1, 2, 3)
SYSTEMS = ("ccan", "vanilla", "at")


def system_config(name: str, base: RunConfig, out_dir: str) -> RunConfig:
    if name == "vanilla":
        model = replace(base.model, ccan_layers=())
    elif name == "at":
        model = replace(base.model, mode="at", ccan_layers=())
    else:
        model = base.model
    return replace(base, model=model, out_dir=out_dir)


@pytest.fixture(scope="module")
def local_fusion_reports(tmp_path_factory):
    """Eval reports of CCAN, vanilla CMLM and AT models on local-fusion, per seed."""
    root = tmp_path_factory.mktemp("local-fusion")
    reports = {name: [] for name in SYSTEMS}
    for seed in SEEDS:
        paths = gen_splits("local-fusion", {"train": 10000, "valid": 200, "test": 1000}, str(root / f"data{seed}"),
                           len_range=(8, 16), vocab_size=64, seed=seed)
        base = RunConfig(
            model=ModelConfig(vocab_size=68, d_model=64, n_heads=4, enc_layers=2, dec_layers=2, d_ff=128, win=3,
                              max_len=16, length_offset_range=2, dropout=0.0, seed=seed),
            train=TrainConfig(lr=1e-3, warmup_steps=200, batch_size=64, max_steps=3000, val_every=500,
                              keep_top=3),
            task="local-fusion", train_path=paths["train"], valid_path=paths["valid"], vocab_path=paths["vocab"],
            seed=seed,
        )
        vocab = Vocab.load(paths["vocab"])
        sources, targets = load_split(paths["test"], vocab, 16)
        for name in SYSTEMS:
            config = system_config(name, base, str(root / f"{name}{seed}"))
            model = load_checkpoint(train_from_config(config).final_path).build_model()
            report, _ = evaluate_model(model, sources, targets, iterations=10, seed=seed)
            reports[name].append(report.scalars)
    return reports


def seed_mean(reports, name: str, key: str) -> float:
    return float(np.mean([scalars[key] for scalars in reports[name]]))


@pytest.mark.slow
def test_ccan_matches_or_beats_vanilla_on_local_fusion(local_fusion_reports):
    for key in ("token_accuracy", "bleu"):
        assert seed_mean(local_fusion_reports, "ccan", key) >= seed_mean(local_fusion_reports, "vanilla", key), key
    deltas = [c["bleu"] - v["bleu"] for c, v in zip(local_fusion_reports["ccan"], local_fusion_reports["vanilla"])]
    assert np.mean(deltas) > 0.0


@pytest.mark.slow
def test_locality_entropy_orders_at_then_ccan_then_vanilla(local_fusion_reports):
    at, ccan, vanilla = (seed_mean(local_fusion_reports, name, "le") for name in ("at", "ccan", "vanilla"))
    assert at < ccan < vanilla


@pytest.mark.slow
def test_length_predictor_learns_length_preservation(local_fusion_reports):
    for name in ("ccan", "vanilla"):
        assert all(scalars["length_accuracy"] >= 0.95 for scalars in local_fusion_reports[name]), name


@pytest.mark.slow
def test_greedy_decoding_reproduces_copy_sources(tmp_path):
    paths = gen_splits("copy", {"train": 4000, "valid": 100, "test": 200}, str(tmp_path / "data"),
                       len_range=(4, 10), vocab_size=16, seed=4)
    config = RunConfig(
        model=ModelConfig(vocab_size=20, d_model=32, n_heads=4, enc_layers=2, dec_layers=2, d_ff=64, max_len=12,
                          length_offset_range=2, dropout=0.0, mode="at", ccan_layers=(), seed=4),
        train=TrainConfig(lr=2e-3, warmup_steps=100, batch_size=32, max_steps=2000, val_every=500, keep_top=2),
        task="copy", train_path=paths["train"], valid_path=paths["valid"], vocab_path=paths["vocab"],
        out_dir=str(tmp_path / "at"), seed=4,
    )
    model = load_checkpoint(train_from_config(config).final_path).build_model()
    sources, _ = load_split(paths["test"], Vocab.load(paths["vocab"]), 12)
    hypotheses = decode_corpus(model, sources, mode="at").hypotheses
    exact = np.mean([list(h) == list(s) for h, s in zip(hypotheses, sources)])
    assert exact >= 0.95
