# tests/test_checkpoint.py
import numpy as np
import pytest

from ccanlab.checkpoint import (
    MAGIC, average_checkpoints, load_checkpoint, save_checkpoint, save_model, state_of,
)
from ccanlab.common import DataError
from ccanlab.config import RunConfig
from ccanlab.data import Vocab
from ccanlab.model import NATModel


def saved(tmp_path, config, name="a.ckpt", step=3, score=0.5, seed=None):
    if seed is not None:
        config.seed = seed
    run = RunConfig(model=config)
    vocab = Vocab.synthetic(config.vocab_size - 4)
    model = NATModel(config)
    path = str(tmp_path / name)
    save_model(model, run, vocab.tokens, path, step=step, val_score=score)
    return path, model


def test_save_load_save_is_byte_identical(tmp_path, tiny_config):
    path, _ = saved(tmp_path, tiny_config)
    again = str(tmp_path / "b.ckpt")
    save_checkpoint(load_checkpoint(path), again)
    with open(path, "rb") as fa, open(again, "rb") as fb:
        assert fa.read() == fb.read()


def test_file_layout(tmp_path, tiny_config):
    path, model = saved(tmp_path, tiny_config)
    with open(path, "rb") as f:
        blob = f.read()
    magic, length, rest = blob.split(b"\n", 2)
    assert magic == MAGIC
    payload = rest[int(length) + 1:]
    assert len(payload) == 4 * sum(p.size for p in model.parameters())


def test_loaded_model_has_identical_parameters(tmp_path, tiny_config):
    path, model = saved(tmp_path, tiny_config)
    checkpoint = load_checkpoint(path)
    assert checkpoint.step == 3 and checkpoint.val_score == 0.5
    assert checkpoint.config.model.ccan_layers == tiny_config.ccan_layers
    rebuilt = checkpoint.build_model()
    for name, value in state_of(model).items():
        np.testing.assert_array_equal(rebuilt.named_parameters()[name].data, value)


def test_truncated_payload_is_a_data_error(tmp_path, tiny_config):
    path, _ = saved(tmp_path, tiny_config)
    with open(path, "rb") as f:
        blob = f.read()
    with open(path, "wb") as f:
        f.write(blob[:-4])
    with pytest.raises(DataError, match="payload"):
        load_checkpoint(path)


def test_foreign_file_is_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(DataError):
        load_checkpoint(str(path))
    with pytest.raises(DataError):
        load_checkpoint(str(tmp_path / "missing.ckpt"))


def test_average_is_the_arithmetic_mean(tmp_path, make_config):
    paths = [saved(tmp_path, make_config(seed=s), name=f"{s}.ckpt", score=s / 10)[0] for s in (1, 2, 3)]
    averaged = average_checkpoints(paths)
    loaded = [load_checkpoint(p) for p in paths]
    name = "decoder.0.cross_attn.q_proj.weight"
    expected = np.mean([c.params[name].astype(np.float64) for c in loaded], axis=0)
    np.testing.assert_allclose(averaged.params[name], expected, rtol=1e-6)
    assert averaged.step == 3


def test_average_rejects_mismatched_models(tmp_path, make_config):
    a, _ = saved(tmp_path, make_config(), name="a.ckpt")
    b, _ = saved(tmp_path, make_config(ccan_layers=()), name="b.ckpt")
    with pytest.raises(DataError):
        average_checkpoints([a, b])
