import pytest
from pydantic import ValidationError

from config import RunConfig, Settings

BASE = {
    "field": {"input_dim": 2, "hidden_widths": [8]},
    "path": {"input_dim": 2, "hidden_widths": [8]},
    "dataset": {"source": "synthetic", "kind": "gaussian_shift", "dim": 2},
    "train": {"iterations": 100},
}


def test_environment_overrides_file(monkeypatch):
    monkeypatch.setenv("WLF_TRAIN__ITERATIONS", "7")
    config = RunConfig(**BASE)
    assert config.train.iterations == 7
    assert config.field.hidden_widths == [8]


def test_file_value_without_override(monkeypatch):
    monkeypatch.delenv("WLF_TRAIN__ITERATIONS", raising=False)
    assert RunConfig(**BASE).train.iterations == 100


def test_dimension_mismatch(monkeypatch):
    with pytest.raises(ValidationError):
        RunConfig(**dict(BASE, path={"input_dim": 3, "hidden_widths": [8]}))


def test_unknown_section_rejected():
    with pytest.raises(ValidationError):
        RunConfig(**dict(BASE, optimiser={}))


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("WLF_W1_SUBSAMPLE", "64")
    monkeypatch.setenv("WLF_LOG_LEVEL", "DEBUG")
    settings = Settings(_env_file=None)
    assert settings.w1_subsample == 64
    assert settings.log_level == "DEBUG"


def test_settings_output_dir_leaves_run_dir_alone(monkeypatch):
    monkeypatch.setenv("WLF_OUTPUT_DIR", "/elsewhere")
    config = RunConfig(**dict(BASE, run_dir="runs/mine"))
    assert config.run_dir == "runs/mine"
    assert Settings(_env_file=None).output_dir == "/elsewhere"
