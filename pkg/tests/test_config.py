import pytest

from mgpolicy.config import (ExperimentConfig, default_config, load_config,
                             parse_config_text, parse_value, scope_keys)
from mgpolicy.errors import ConfigError


def test_defaults_per_task():
    reach = default_config("reach")
    button = default_config("button")
    assert reach["task"] == "reach" and reach["data.episodes"] == 256
    assert button["data.episodes"] == 48 and button["mgt.steps"] == 4500
    assert button["out"] == "runs/button"
    with pytest.raises(ConfigError):
        default_config("hanoi")


def test_unknown_keys_rejected_everywhere():
    with pytest.raises(ConfigError):
        parse_value("mgt.dropout", "0.1")
    with pytest.raises(ConfigError):
        default_config("reach", **{"mgt.width": 7})
    with pytest.raises(ConfigError):
        default_config("reach").with_overrides(["sampler.beam=3"])
    with pytest.raises(ConfigError):
        parse_config_text("tokenizer.codebooksize = 8\n")


def test_typed_value_parsing():
    assert parse_value("mgt.steps", " 200 ") == 200
    assert parse_value("sampler.temperature", "0.5") == 0.5
    assert parse_value("mgt.loss_masked_only", "Yes") is True
    assert parse_value("sampler.score_every_pass", "off") is False
    assert parse_value("task", "button") == "button"
    for key, bad in (("mgt.steps", "3.5"), ("sampler.temperature", "warm"),
                     ("eval.periodic", "maybe")):
        with pytest.raises(ConfigError):
            parse_value(key, bad)


def test_override_syntax():
    cfg = default_config("reach").with_overrides(
        ["mgt.steps=42", "sampler.variant=short"])
    assert cfg["mgt.steps"] == 42 and cfg["sampler.variant"] == "short"
    with pytest.raises(ConfigError):
        default_config("reach").with_overrides(["mgt.steps"])


def test_render_parse_roundtrip():
    cfg = default_config("dynamic", seed=7, **{"sampler.remask_ratio": 0.85})
    back = parse_config_text(cfg.render())
    assert back == cfg.values
    assert ExperimentConfig(back).hash() == cfg.hash()


def test_config_file_loading(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# dynamic-target experiment\n\n"
                    "task = button\n"
                    "mgt.steps = 77\n"
                    "sampler.remask_ratio = 0.85\n")
    cfg = load_config(path)
    # the file's task selects per-task defaults; explicit keys still win
    assert cfg["data.episodes"] == 48
    assert cfg["mgt.steps"] == 77 and cfg["sampler.remask_ratio"] == 0.85
    cfg = load_config(path, overrides=["mgt.steps=99"])
    assert cfg["mgt.steps"] == 99
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    bad = tmp_path / "bad.cfg"
    bad.write_text("mgt.steps 12\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_validation_bounds():
    with pytest.raises(ConfigError):
        default_config("reach", **{"dropout.p": 1.5})
    with pytest.raises(ConfigError):
        default_config("reach", **{"eval.episodes": 0})
    with pytest.raises(ConfigError):
        default_config("reach", **{"dropout.protect_first": "sometimes"})


def test_protect_first_tristate():
    assert default_config("reach").protect_first() is None
    on = default_config("reach", **{"dropout.protect_first": "on"})
    off = default_config("reach", **{"dropout.protect_first": "off"})
    assert on.protect_first() is True and off.protect_first() is False


def test_sampler_view():
    cfg = default_config("reach", **{"sampler.r": 3, "sampler.variant": "wosm"})
    scfg = cfg.sampler()
    assert scfg.r == 3 and scfg.variant == "wosm"
    swapped = cfg.sampler(variant="short", temperature=0.5)
    assert swapped.variant == "short" and swapped.temperature == 0.5
    assert cfg.sampler().variant == "wosm"  # replace does not leak back


def test_scoped_hashes_ignore_eval_time_keys():
    base = default_config("reach")
    swept = base.with_overrides(["sampler.remask_ratio=0.85", "dropout.p=0.5",
                                 "eval.episodes=50"])
    assert swept.hash() != base.hash()
    assert swept.hash("stage1") == base.hash("stage1")
    assert swept.hash("stage2") == base.hash("stage2")
    retrained = base.with_overrides(["mgt.steps=99"])
    assert retrained.hash("stage2") != base.hash("stage2")
    assert retrained.hash("stage1") == base.hash("stage1")
    rek = base.with_overrides(["tokenizer.codebook_size=8"])
    assert rek.hash("stage1") != base.hash("stage1")
    assert "mgt.steps" in scope_keys("stage2")
    assert "sampler.r" not in scope_keys("stage2")
    with pytest.raises(ConfigError):
        base.hash("stage3")


def test_render_is_canonical_and_complete():
    cfg = default_config("reach")
    lines = cfg.render().strip().split("\n")
    assert len(lines) == len(cfg.values)
    assert lines[0].startswith("task = ")
    # floats render with full precision
    assert "mgt.learning_rate = 0.0003" in cfg.render()
