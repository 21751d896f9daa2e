from pathlib import Path

import pytest

from siftsup.config import (
    DEFAULT_RESOLUTIONS,
    SiftSupConfig,
    discover_config_path,
    load_config,
    parse_size,
)
from siftsup.errors import ConfigError


def test_defaults():
    cfg = load_config(None)
    assert cfg.filter.angle_max_deg == 45.0
    assert (cfg.filter.scale_ratio_min, cfg.filter.scale_ratio_max) == (0.44, 2.25)
    assert cfg.loss.lambda_sift == 0.0005
    assert cfg.loss.eta == 500
    assert cfg.loss.omega(123) == 1.0
    assert cfg.pipeline.resolutions == DEFAULT_RESOLUTIONS
    assert cfg.source_path is None


def test_config_loader_reads_toml(tmp_path: Path):
    cfg_file = tmp_path / "siftsup.toml"
    cfg_file.write_text(
        """
[filter]
angle_max_deg = 30
ransac_seed = 7

[loss]
lambda_sift = 0.001
eta = 400

[toy]
steps = 50

[toy.features]
dim = 16

[pipeline]
resolutions = [[32, 24], [16, 12]]
resize = "256x192"
""".strip(),
        encoding="utf-8",
    )

    cfg = load_config(cfg_file)
    assert cfg.filter.angle_max_deg == 30.0
    assert cfg.filter.ransac_seed == 7
    assert cfg.loss.lambda_sift == 0.001
    assert cfg.loss.eta == 400
    assert cfg.toy.steps == 50
    assert cfg.toy.features.dim == 16
    assert cfg.pipeline.resolutions == ((32, 24), (16, 12))
    assert cfg.pipeline.resize == (256, 192)
    assert cfg.source_path == cfg_file


def test_flat_keys_reach_every_section(tmp_path: Path):
    cfg_file = tmp_path / "flat.toml"
    cfg_file.write_text("eta = 300\nratio = 0.8\nworkers = 3\n", encoding="utf-8")
    cfg = load_config(cfg_file)
    assert cfg.loss.eta == 300
    assert cfg.toy.eta == 300
    assert cfg.sift.ratio == 0.8
    assert cfg.pipeline.workers == 3


@pytest.mark.parametrize(
    "text",
    [
        "bogus = 1\n",
        "[filter]\nbogus = 1\n",
        "[extra]\nx = 1\n",
        "[loss]\neta = 'soon'\n",
        "[loss]\neta = 2000\n",
        "[filter]\nscale_ratio_min = 3.0\n",
        "[toy]\nheads = 3\n",
        "[sift]\nupsample = 1\n",
        "not toml at all [\n",
    ],
)
def test_invalid_config(tmp_path: Path, text: str):
    cfg_file = tmp_path / "bad.toml"
    cfg_file.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(cfg_file)


def test_missing_file(tmp_path: Path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.toml")


def test_discover_config_path_prefers_cwd(tmp_path: Path, monkeypatch: pytest.MonkeyPatch):
    monkeypatch.delenv("SIFTSUP_CONFIG", raising=False)
    cfg = tmp_path / "siftsup.toml"
    cfg.write_text("", encoding="utf-8")
    monkeypatch.chdir(tmp_path)
    assert discover_config_path(None) == cfg


def test_discover_config_path_env_and_explicit(tmp_path: Path, monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setenv("SIFTSUP_CONFIG", str(tmp_path / "env.toml"))
    assert discover_config_path(None) == tmp_path / "env.toml"
    assert discover_config_path(str(tmp_path / "cli.toml")) == tmp_path / "cli.toml"


def test_parse_size():
    assert parse_size("512x384") == (512, 384)
    assert parse_size("16,12") == (16, 12)
    with pytest.raises(ConfigError):
        parse_size("512")
    with pytest.raises(ConfigError):
        parse_size("axb")


def test_validate_rejects_bad_workers():
    cfg = SiftSupConfig()
    cfg.pipeline.workers = 0
    with pytest.raises(ConfigError):
        cfg.validate()


def test_flat_seed_reaches_ransac_and_toy(tmp_path: Path):
    cfg_file = tmp_path / "seed.toml"
    cfg_file.write_text("seed = 9\n", encoding="utf-8")
    cfg = load_config(cfg_file)
    assert (cfg.pipeline.seed, cfg.toy.seed, cfg.filter.ransac_seed) == (9, 9, 9)


def test_section_seeds_override_pipeline_seed(tmp_path: Path):
    cfg_file = tmp_path / "seed.toml"
    cfg_file.write_text("[pipeline]\nseed = 4\n\n[filter]\nransac_seed = 2\n", encoding="utf-8")
    cfg = load_config(cfg_file)
    assert cfg.filter.ransac_seed == 2
    assert cfg.toy.seed == 4
