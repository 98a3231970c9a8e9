import pytest

from app_config import (PRESETS, ModelConfig, coerce, load_config, preset, read_config_file,
                        resolve_config, save_config)
from utils import ConfigError


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_is_valid(name):
    cfg = preset(name)
    assert cfg.M_p < cfg.M_h
    assert cfg.n < cfg.M_h
    assert cfg.span == cfg.M_h + cfg.M_p


def test_defaults():
    cfg = ModelConfig()
    assert cfg.alphas == (0.25, 0.21, 0.25)
    assert cfg.gamma == 3.0
    assert cfg.lam == 0.3
    assert cfg.uses_prophet


def test_present_block_must_be_shorter_than_history():
    with pytest.raises(ConfigError) as info:
        ModelConfig(M_p=32, M_h=32)
    assert info.value.key == "M_p"


def test_compressed_length_must_be_shorter_than_history():
    with pytest.raises(ConfigError) as info:
        ModelConfig(n=32, M_h=32)
    assert info.value.key == "n"


def test_lambda_range():
    with pytest.raises(ConfigError):
        ModelConfig(lam=1.5)


def test_both_branches_disabled_is_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(disable_lfc_language=True, disable_lfc_vision=True)


def test_unknown_key():
    with pytest.raises(ConfigError) as info:
        coerce({"depth": 3})
    assert info.value.key == "depth"


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("imagenet")


def test_coerce_types():
    out = coerce({"d": "32", "lam": "0.5", "positional": "off", "gate_activation": " sigmoid "})
    assert out == {"d": 32, "lam": 0.5, "positional": False, "gate_activation": "sigmoid"}


def test_file_round_trip(tmp_path):
    cfg = preset("tiny", lam=0.7, disable_prophet_history=True)
    path = tmp_path / "config.txt"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_comments_and_blank_lines(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# training\n\nepochs = 3   # short run\nlr=0.01\n")
    assert read_config_file(path) == {"epochs": 3, "lr": 0.01}


def test_malformed_line(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("epochs 3\n")
    with pytest.raises(ConfigError, match="line 1"):
        read_config_file(path)


def test_precedence_preset_file_flags(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("M_h=16\nepochs=4\n")
    cfg = resolve_config("tiny", path, {"epochs": "9"})
    assert cfg.d == 8            # preset
    assert cfg.M_h == 16         # file over preset
    assert cfg.epochs == 9       # flag over file


def test_with_overrides_validates():
    with pytest.raises(ConfigError):
        ModelConfig().with_overrides({"heads": 3})
