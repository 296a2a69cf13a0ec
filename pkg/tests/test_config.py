import pytest

from mmdiff import config
from mmdiff.diffusion import ConfigError


def test_defaults_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\n\ndiffusion.T = 50\nguidance.scale=3  # trailing\n")
    cfg = config.resolve(p, ["run.seed=5", "diffusion.T=20"])
    assert cfg["diffusion.T"] == 20 and cfg["guidance.scale"] == 3.0 and cfg["run.seed"] == 5
    assert isinstance(cfg["guidance.scale"], float)
    assert cfg["train.batch_size"] == config.defaults()["train.batch_size"]


def test_dump_parse_roundtrip():
    cfg = config.defaults()
    assert config.parse(config.dump(cfg)) == cfg


def test_errors():
    with pytest.raises(ConfigError):
        config.parse("no.such.key = 1")
    with pytest.raises(ConfigError):
        config.parse("diffusion.T = many")
    with pytest.raises(ConfigError):
        config.parse("just words")


def test_defaults_table_lists_every_key():
    table = config.defaults_table()
    assert all(f"`{k}`" in table for k in config.DEFAULTS)
