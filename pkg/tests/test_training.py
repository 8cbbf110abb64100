# tests/test_training.py
import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from ccanlab.checkpoint import load_checkpoint
from ccanlab.common import NonFiniteError
from ccanlab.data import Vocab
from ccanlab.model import NATModel
from ccanlab.tensor import mul
from ccanlab.training import (
    ablation_grid, evaluate_model, learning_rate, load_split, masked_token_accuracy, run_ablation, train_from_config,
)


def test_learning_rate_warmup_then_decay():
    assert learning_rate(1, 1e-3, 4) == pytest.approx(2.5e-4)
    assert learning_rate(4, 1e-3, 4) == pytest.approx(1e-3)
    assert learning_rate(16, 1e-3, 4) == pytest.approx(5e-4)
    assert learning_rate(7, 1e-3, 0) == 1e-3


def test_training_writes_log_and_checkpoints(tiny_run_config):
    result = train_from_config(tiny_run_config)
    log = pd.read_csv(result.log_path)
    assert list(log.columns) == ["step", "loss", "val"]
    assert log["step"].tolist() == [1, 2, 3, 4]
    assert log["val"].notna().tolist() == [False, True, False, True]
    assert len(result.kept) == 2
    assert result.averaged_path is not None
    assert load_checkpoint(result.last_path).step == 4


def test_first_loss_matches_uniform_expectation(tiny_run_config):
    result = train_from_config(tiny_run_config)
    first = pd.read_csv(result.log_path)["loss"].iloc[0]
    model = tiny_run_config.model
    expected = math.log(model.vocab_size) + model.length_loss_weight * math.log(2 * model.length_offset_range + 1)
    assert first == pytest.approx(expected, rel=0.1)


def test_same_seed_gives_identical_logs(tiny_run_config, tmp_path):
    first = train_from_config(tiny_run_config)
    second = train_from_config(replace(tiny_run_config, out_dir=str(tmp_path / "again")))
    with open(first.log_path, "rb") as a, open(second.log_path, "rb") as b:
        assert a.read() == b.read()


def test_non_finite_loss_aborts_and_keeps_last_checkpoint(tiny_run_config, monkeypatch):
    original = NATModel.loss
    calls = {"n": 0}

    def flaky(self, batch, rng):
        calls["n"] += 1
        out = original(self, batch, rng)
        if calls["n"] == 3:
            out.total = mul(out.total, float("nan"))
        return out

    monkeypatch.setattr(NATModel, "loss", flaky)
    with pytest.raises(NonFiniteError, match="step 3"):
        train_from_config(tiny_run_config)
    out_dir = tiny_run_config.out_dir
    assert load_checkpoint(f"{out_dir}/last.ckpt").step == 2
    assert pd.read_csv(f"{out_dir}/train_log.csv")["step"].tolist() == [1, 2]


def test_masked_token_accuracy_is_reproducible(tiny_run_config):
    vocab = Vocab.load(tiny_run_config.vocab_path)
    sources, targets = load_split(tiny_run_config.valid_path, vocab, 12)
    model = NATModel(tiny_run_config.model)
    first = masked_token_accuracy(model, sources, targets, seed=4)
    assert 0.0 <= first <= 1.0
    assert masked_token_accuracy(model, sources, targets, seed=4) == first


def test_evaluation_report(tiny_run_config):
    vocab = Vocab.load(tiny_run_config.vocab_path)
    sources, targets = load_split(tiny_run_config.valid_path, vocab, 12)
    report, hyps = evaluate_model(NATModel(tiny_run_config.model), sources, targets, iterations=2, timing=True)
    assert report.kind == "eval"
    assert set(report.scalars) >= {"token_accuracy", "bleu", "le", "length_accuracy"}
    assert 0.0 <= report.scalars["bleu"] <= 100.0
    assert [row["layer"] for row in report.series["layer_le"]] == [1, 2]
    assert len(hyps) == len(sources)
    assert "seconds" in report.meta


def test_ablation_grid_layout():
    grid = ablation_grid(9, 4, wins=(3, 5), placements=[(1,), (4,), (1, 2, 3, 4)])
    assert [p.setting for p in grid] == ["none", "win=3", "win=5", "layers=1", "layers=4", "layers=1-4"]
    assert grid[0].ccan_layers == ()
    assert grid[1].ccan_layers == (1, 2, 3, 4)
    assert all(p.win == 9 for p in grid[3:])


def test_ablation_table_and_baseline_row(tiny_run_config, dataset_dir):
    grid = ablation_grid(3, 2, wins=(3,), placements=[(2,)])
    table = run_ablation(tiny_run_config, grid, dataset_dir["test"], iterations=2)
    assert list(table.columns) == ["setting", "win", "ccan_layers", "token_accuracy", "bleu", "le"]
    assert table["setting"].tolist() == ["none", "win=3", "layers=2"]

    # the no-CCAN row is a plain vanilla run with the same seed
    vanilla = replace(tiny_run_config, model=replace(tiny_run_config.model, ccan_layers=()),
                      out_dir=tiny_run_config.out_dir + "-vanilla")
    result = train_from_config(vanilla)
    vocab = Vocab.load(tiny_run_config.vocab_path)
    sources, targets = load_split(dataset_dir["test"], vocab, 12)
    report, _ = evaluate_model(load_checkpoint(result.final_path).build_model(), sources, targets,
                               iterations=2, seed=tiny_run_config.seed, batch_size=8)
    row = table.iloc[0]
    assert row["token_accuracy"] == report.scalars["token_accuracy"]
    assert row["bleu"] == report.scalars["bleu"]
    assert np.isclose(row["le"], report.scalars["le"], rtol=0, atol=0)
