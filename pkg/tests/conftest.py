# tests/conftest.py
import numpy as np
import pytest

from ccanlab.config import ModelConfig, RunConfig, TrainConfig
from ccanlab.data import gen_splits
from ccanlab.tensor import default_dtype


@pytest.fixture
def float64():
    """Run the test body in the 64-bit build."""
    with default_dtype(np.float64):
        yield


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(vocab_size=14, d_model=16, n_heads=2, enc_layers=2, dec_layers=2, d_ff=32, win=3,
                  max_len=12, length_offset_range=2, dropout=0.0, seed=3)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def make_config():
    return tiny_model_config


@pytest.fixture
def dataset_dir(tmp_path):
    """A small local-fusion dataset over 10 content tokens."""
    paths = gen_splits("local-fusion", {"train": 24, "valid": 8, "test": 8}, str(tmp_path / "data"),
                       len_range=(3, 6), vocab_size=10, seed=5)
    return paths


@pytest.fixture
def tiny_run_config(dataset_dir, tmp_path):
    return RunConfig(
        model=tiny_model_config(vocab_size=14),
        train=TrainConfig(lr=1e-3, warmup_steps=2, batch_size=8, max_steps=4, val_every=2, keep_top=2),
        task="local-fusion",
        train_path=dataset_dir["train"],
        valid_path=dataset_dir["valid"],
        vocab_path=dataset_dir["vocab"],
        out_dir=str(tmp_path / "run"),
        seed=3,
    )
