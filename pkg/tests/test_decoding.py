# tests/test_decoding.py
import numpy as np
import pytest

from ccanlab.common import EOS_ID, MASK_ID, PAD_ID, ConfigError, DataError
from ccanlab.decoding import decode_corpus, greedy_at, mask_predict, mask_schedule
from ccanlab.model import NATModel, pad_sequences
from ccanlab.tensor import no_grad

SOURCES = [[4, 5, 6, 7], [8, 9, 10], [11, 12, 13, 4, 5]]


def test_mask_schedule_examples():
    assert mask_schedule(10, 10) == [10, 9, 8, 7, 6, 5, 4, 3, 2, 1]
    assert mask_schedule(7, 1) == [7]
    assert mask_schedule(5, 3) == [5, 4, 2]


def test_mask_schedule_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        mask_schedule(5, 0)
    with pytest.raises(DataError):
        mask_schedule(0, 3)


def test_single_iteration_is_one_shot_prediction(tiny_config):
    model = NATModel(tiny_config)
    src = pad_sequences(SOURCES)
    out = mask_predict(model, src, iterations=1, lengths=4)
    with no_grad():
        logits, _ = model.decode_cmlm(np.full((3, 4), MASK_ID), model.encode(src), src == PAD_ID)
    scores = logits.data.copy()
    scores[..., :4] = -np.inf
    assert out.tokens == np.argmax(scores, axis=-1).tolist()
    assert out.model_calls == 1


def test_mask_predict_makes_exactly_n_calls_and_leaves_no_mask(tiny_config):
    model = NATModel(tiny_config)
    out = mask_predict(model, pad_sequences(SOURCES), iterations=4, lengths=[3, 5, 2])
    assert out.model_calls == 4
    assert [len(t) for t in out.tokens] == [3, 5, 2]
    for tokens, state in zip(out.tokens, out.states):
        assert MASK_ID not in tokens and PAD_ID not in tokens
        assert np.all((state.confidences > 0) & (state.confidences <= 1))


def test_history_follows_the_schedule(tiny_config):
    model = NATModel(tiny_config)
    out = mask_predict(model, pad_sequences(SOURCES[:1]), iterations=5, lengths=6, return_history=True)
    history = out.history[0]
    assert [s.iteration for s in history] == [1, 2, 3, 4, 5]
    assert [int(s.masked.sum()) for s in history] == mask_schedule(6, 5)
    # positions outside the re-masked set keep their token
    for before, after in zip(history, history[1:]):
        frozen = ~after.masked
        np.testing.assert_array_equal(before.tokens[frozen], after.tokens[frozen])


def test_predicted_lengths_are_used_without_override(tiny_config):
    model = NATModel(tiny_config)
    out = mask_predict(model, pad_sequences([[4, 5, 6, 7, 8]]), iterations=2)
    # untrained length head is uniform, so the lowest offset wins
    assert len(out.tokens[0]) == 5 - tiny_config.length_offset_range


def test_mask_predict_rejects_bad_lengths(tiny_config):
    model = NATModel(tiny_config)
    with pytest.raises(DataError):
        mask_predict(model, pad_sequences(SOURCES[:1]), lengths=0)
    with pytest.raises(ConfigError):
        mask_predict(model, pad_sequences(SOURCES[:1]), iterations=0)


def test_greedy_at_with_eos_only_model_is_empty(make_config):
    model = NATModel(make_config(mode="at"))
    model.output.bias.data[EOS_ID] = 100.0
    out = greedy_at(model, pad_sequences(SOURCES))
    assert out.tokens == [[], [], []]
    assert out.model_calls == 1


def test_greedy_at_is_deterministic_and_bounded(make_config):
    model = NATModel(make_config(mode="at"))
    model.output.bias.data[EOS_ID] = -100.0
    first = greedy_at(model, pad_sequences(SOURCES), max_len=5)
    second = greedy_at(model, pad_sequences(SOURCES), max_len=5)
    assert first.tokens == second.tokens
    assert first.model_calls == 5
    assert all(len(t) == 5 for t in first.tokens)


def test_corpus_decoding_keeps_order_across_workers(tiny_config):
    model = NATModel(tiny_config)
    serial = decode_corpus(model, SOURCES, iterations=3, batch_size=1, workers=1, capture=True)
    threaded = decode_corpus(model, SOURCES, iterations=3, batch_size=1, workers=3, capture=True)
    assert serial.hypotheses == threaded.hypotheses
    assert serial.model_calls == 9
    assert len(threaded.attention) == 3
    for hyp, src, sent in zip(threaded.hypotheses, SOURCES, threaded.attention):
        assert sent.layers[0].shape == (len(hyp), len(src))


def test_at_capture_covers_each_output_token(make_config):
    model = NATModel(make_config(mode="at"))
    model.output.bias.data[EOS_ID] = -100.0
    decoded = decode_corpus(model, SOURCES[:2], mode="at", capture=True, heads=True)
    for hyp, src, sent in zip(decoded.hypotheses, SOURCES, decoded.attention):
        assert sent.layers[0].shape == (len(hyp), len(src))
        assert sent.heads[0].shape == (2, len(hyp), len(src))
        assert all(g is None for g in sent.gates)


def test_unknown_decode_mode(tiny_config):
    with pytest.raises(ConfigError):
        decode_corpus(NATModel(tiny_config), SOURCES, mode="beam")
