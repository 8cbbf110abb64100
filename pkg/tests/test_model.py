# tests/test_model.py
import numpy as np
import pytest

from ccanlab.common import BOS_ID, MASK_ID, PAD_ID, ConfigError, DataError
from ccanlab.config import ModelConfig
from ccanlab.model import NATModel, TokenBatch, pad_sequences, parameter_count
from ccanlab.tensor import make_rng, no_grad


def encode(model, src):
    with no_grad():
        return model.encode(np.asarray(src))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(win=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dec_layers=2, ccan_layers=(3,)).validate()
    assert ModelConfig(dec_layers=3).ccan_layers == (1, 2, 3)


def test_encode_shape_and_identical_rows(tiny_config):
    model = NATModel(tiny_config).eval()
    enc = encode(model, [[4, 5, 6], [4, 5, 6]])
    assert enc.shape == (2, 3, tiny_config.d_model)
    np.testing.assert_array_equal(enc.data[0], enc.data[1])


def test_pad_embeddings_do_not_leak(tiny_config):
    model = NATModel(tiny_config).eval()
    src = [[4, 5, 6, PAD_ID, PAD_ID]]
    before = encode(model, src).data[0, :3].copy()
    model.embed.weight.data[PAD_ID] += 3.0
    after = encode(model, src).data[0, :3]
    np.testing.assert_allclose(before, after, atol=1e-6)


def test_source_longer_than_max_len_is_rejected(tiny_config):
    model = NATModel(tiny_config)
    with pytest.raises(DataError, match="max_len"):
        encode(model, [[4] * (tiny_config.max_len + 1)])


def test_untrained_length_head_is_uniform(tiny_config):
    model = NATModel(tiny_config).eval()
    src = np.array([[4, 5, 6, 7]])
    dist = model.predict_length(encode(model, src), src == PAD_ID)
    offsets = 2 * tiny_config.length_offset_range + 1
    np.testing.assert_allclose(dist, np.full((1, offsets), 1.0 / offsets), atol=1e-6)
    # a tie over offsets resolves to the lowest, -R
    lengths = model.predicted_lengths(encode(model, src), src == PAD_ID)
    assert lengths.tolist() == [4 - tiny_config.length_offset_range]


def test_cmlm_decoder_is_bidirectional(tiny_config):
    model = NATModel(tiny_config).eval()
    src = np.array([[4, 5, 6, 7]])
    enc = encode(model, src)
    with no_grad():
        a, _ = model.decode_cmlm(np.array([[MASK_ID, 5, 6]]), enc, src == PAD_ID)
        b, _ = model.decode_cmlm(np.array([[MASK_ID, 5, 9]]), enc, src == PAD_ID)
    assert np.max(np.abs(a.data[0, 0] - b.data[0, 0])) > 1e-6
    assert a.shape == (1, 3, tiny_config.vocab_size)


def test_at_decoder_is_causal(make_config):
    model = NATModel(make_config(mode="at")).eval()
    src = np.array([[4, 5, 6]])
    enc = encode(model, src)
    with no_grad():
        a, _ = model.decode_at(np.array([[BOS_ID, 4, 5, 6]]), enc, src == PAD_ID)
        b, _ = model.decode_at(np.array([[BOS_ID, 4, 9, 9]]), enc, src == PAD_ID)
    np.testing.assert_allclose(a.data[0, :2], b.data[0, :2], atol=1e-6)
    assert np.max(np.abs(a.data[0, 2] - b.data[0, 2])) > 1e-6


def test_at_prefix_must_start_with_bos(tiny_config):
    model = NATModel(tiny_config)
    src = np.array([[4, 5]])
    with pytest.raises(DataError, match="BOS"):
        model.decode_at(np.array([[4, 5]]), encode(model, src), src == PAD_ID)


def test_at_decoder_never_uses_ccan(tiny_config):
    model = NATModel(tiny_config).eval()
    src = np.array([[4, 5, 6]])
    with no_grad():
        _, dump = model.decode_at(np.array([[BOS_ID, 4]]), encode(model, src), src == PAD_ID)
    assert all(layer.gates is None for layer in dump.layers)


def test_without_ccan_layers_matches_vanilla_model(make_config):
    ccan_free = NATModel(make_config(ccan_layers=())).eval()
    vanilla = NATModel(make_config(mode="at")).eval()
    src = np.array([[4, 5, 6, 7], [8, 9, PAD_ID, PAD_ID]])
    tgt = np.array([[MASK_ID, 5, MASK_ID], [MASK_ID, MASK_ID, PAD_ID]])
    with no_grad():
        a, _ = ccan_free.decode_cmlm(tgt, ccan_free.encode(src), src == PAD_ID)
        b, _ = vanilla.decode_cmlm(tgt, vanilla.encode(src), src == PAD_ID)
    assert np.max(np.abs(a.data - b.data)) < 1e-6


def test_full_width_window_model_matches_vanilla(make_config, float64):
    wide = NATModel(make_config(win=2 * 12 - 1)).eval()
    vanilla = NATModel(make_config(ccan_layers=())).eval()
    src = np.array([[4, 5, 6, 7, 8]])
    tgt = np.array([[MASK_ID, 5, MASK_ID, 7]])
    with no_grad():
        a, _ = wide.decode_cmlm(tgt, wide.encode(src), src == PAD_ID)
        b, _ = vanilla.decode_cmlm(tgt, vanilla.encode(src), src == PAD_ID)
    assert np.max(np.abs(a.data - b.data)) < 1e-6


def test_dump_rows_and_gates(tiny_config):
    model = NATModel(tiny_config).eval()
    src = np.array([[4, 5, 6, PAD_ID], [7, 8, 9, 10]])
    tgt = np.array([[MASK_ID, MASK_ID, PAD_ID], [MASK_ID, 5, MASK_ID]])
    with no_grad():
        _, dump = model.decode_cmlm(tgt, model.encode(src), src == PAD_ID)
    assert len(dump.layers) == tiny_config.dec_layers
    for layer in dump.layers:
        np.testing.assert_allclose(layer.effective_weights().sum(axis=-1), 1.0, atol=1e-6)
        assert np.all((layer.gates > 0) & (layer.gates < 1))
    sent = dump.sentence(0)
    assert sent.layers[0].shape == (2, 3)
    assert sent.gates[0].shape == (2,)


def test_cmlm_loss_at_init_matches_uniform_expectation(tiny_config):
    model = NATModel(tiny_config)
    rng = make_rng(0)
    src = [list(rng.integers(4, 14, size=6)) for _ in range(8)]
    batch = TokenBatch.from_sequences(src, src)
    loss = model.cmlm_loss(batch, make_rng(1))
    expected = np.log(tiny_config.vocab_size) + 0.1 * np.log(2 * tiny_config.length_offset_range + 1)
    assert loss.total.item() == pytest.approx(expected, rel=0.1)
    assert batch.masked.sum() == loss.predicted >= 8


def test_cmlm_loss_is_deterministic(tiny_config):
    batch = TokenBatch.from_sequences([[4, 5, 6], [7, 8]], [[4, 5, 6], [7, 8]])
    first = NATModel(tiny_config).cmlm_loss(batch, make_rng(5)).total.item()
    second = NATModel(tiny_config).cmlm_loss(batch, make_rng(5)).total.item()
    assert first == second


def test_cmlm_loss_rejects_empty_target(tiny_config):
    batch = TokenBatch(src=pad_sequences([[4, 5]]), tgt=pad_sequences([[]]))
    with pytest.raises(DataError):
        NATModel(tiny_config).cmlm_loss(batch, make_rng(0))


def test_parameter_count_reports_gate_vectors(make_config):
    counts = parameter_count(NATModel(make_config()))
    baseline = parameter_count(NATModel(make_config(ccan_layers=())))
    assert counts["gate"] == 2 * 16
    assert counts["total"] - baseline["total"] == counts["gate"]
    assert baseline["gate"] == 0
