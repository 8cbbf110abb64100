# tests/test_config.py
import pytest

from ccanlab.common import ConfigError, format_layers, parse_layer_spec, validate_window
from ccanlab.config import ModelConfig, RunConfig, load_run_config, save_run_config


@pytest.mark.parametrize("spec, expected", [
    ("1", (1,)),
    ("1-3", (1, 2, 3)),
    ("L", (4,)),
    ("L-2..L", (2, 3, 4)),
    ("1..L", (1, 2, 3, 4)),
    ("1,3", (1, 3)),
    ("none", ()),
])
def test_layer_specs(spec, expected):
    assert parse_layer_spec(spec, 4) == expected


def test_bad_layer_specs():
    for spec in ("0", "5", "3-1", "x", "L+1"):
        with pytest.raises(ConfigError):
            parse_layer_spec(spec, 4)


def test_format_layers():
    assert format_layers((1, 2, 3)) == "1-3"
    assert format_layers((1, 3, 4)) == "1,3-4"
    assert format_layers(()) == "none"


def test_window_must_be_odd_and_positive():
    assert validate_window(1) == 0
    assert validate_window(9) == 4
    for win in (0, 2, -3, True):
        with pytest.raises(ConfigError):
            validate_window(win)


def test_ccan_layers_default_to_every_decoder_layer():
    assert ModelConfig(dec_layers=3).ccan_layers == (1, 2, 3)
    assert ModelConfig(dec_layers=3, ccan_layers=[]).ccan_layers == ()


def test_run_config_file_round_trip(tmp_path):
    config = RunConfig(model=ModelConfig(win=5, ccan_layers=(2, 4)), task="copy", seed=9)
    path = str(tmp_path / "run.json")
    save_run_config(config, path)
    assert load_run_config(path) == config


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="window"):
        RunConfig.from_dict({"model": {"window": 3}})
    with pytest.raises(ConfigError, match="unknown task"):
        RunConfig(task="reverse").validate()
