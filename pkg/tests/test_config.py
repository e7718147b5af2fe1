import pytest

from shufflecam.config import (
    ConfigError, RunConfig, config_hash, format_config, load_config, parse_config, with_overrides,
)


def test_empty_text_gives_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.training.lr == 1e-4 and cfg.training.batch_size == 4
    assert cfg.schedule.patch_sizes == (32, 16, 8)


def test_echo_round_trip():
    cfg = with_overrides(RunConfig(), {"training.lr": 3e-4, "schedule.mode": "back", "model.widths": (4, 8, 8)})
    assert parse_config(format_config(cfg)) == cfg


def test_comments_and_blank_lines(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# header\n\ntraining.epochs = 2   # short run\nschedule.enabled = false\n")
    cfg = load_config(p)
    assert cfg.training.epochs == 2 and cfg.schedule.enabled is False


def test_overrides_beat_file_values():
    cfg = parse_config("training.seed = 1\n", {"training.seed": 7})
    assert cfg.training.seed == 7


@pytest.mark.parametrize("text, field", [
    ("training.lr = fast", "training.lr"),
    ("training.bogus = 1", "training.bogus"),
    ("training = 3", "training"),
    ("training.lr.x = 3", "training.lr"),
    ("training.batch_size = 1", "training.batch_size"),
    ("eval.threshold = 1.5", "eval.threshold"),
    ("schedule.patch_sizes = 24", "schedule.patch_sizes"),
    ("schedule.alpha = 0.5", "schedule"),
    ("schedule.enabled = maybe", "schedule.enabled"),
    ("no equals sign", "line 1"),
])
def test_errors_name_the_field(text, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        parse_config(text)


def test_hash_ignores_eval_and_output():
    base = RunConfig()
    same = with_overrides(base, {"eval.threshold": 0.3, "out": "elsewhere", "ablate.workers": 4})
    assert config_hash(same) == config_hash(base)
    assert config_hash(with_overrides(base, {"training.seed": 1})) != config_hash(base)
    assert config_hash(with_overrides(base, {"schedule.mode": "back"})) != config_hash(base)
    assert len(config_hash(base)) == 16
