"""Configuration loading, validation and dotted-path overrides."""

from __future__ import annotations

import json

import pytest

from vesselmend.config import (
    ConfigError,
    PipelineConfig,
    from_dict,
    load_config,
    save_config,
)
from vesselmend.reconnect import NeighborLevel


def test_defaults_round_trip_through_dict():
    cfg = PipelineConfig()
    assert from_dict(cfg.to_dict()) == cfg


def test_to_dict_is_json_ready():
    d = PipelineConfig().to_dict()
    assert json.loads(json.dumps(d)) == d
    assert d["walk"]["neighbor_level"] == "auto"
    assert d["enabled_types"] == [1, 2, 3]


def test_file_round_trip(tmp_path):
    cfg = PipelineConfig().with_overrides({"walk.omega": 2.0, "seed": 7})
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert back.walk.omega == 2.0
    assert back.seed == 7


def test_partial_dict_fills_defaults():
    cfg = from_dict({"walk": {"omega": 1.25}, "threads": 4})
    assert cfg.walk.omega == 1.25
    assert cfg.walk.side == 5
    assert cfg.threads == 4
    assert cfg.oracle == PipelineConfig().oracle


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        from_dict({"not_a_field": 1})
    with pytest.raises(ConfigError):
        from_dict({"walk": {"omega": 1.0, "bogus": 2}})
    with pytest.raises(ConfigError):
        from_dict({"oracle": {"kind": "linear_patch", "nested": 1}})
    with pytest.raises(ConfigError):
        from_dict({"candidates": {"dist_near": 3.0}})
    with pytest.raises(ConfigError):
        from_dict({"lumen": {"rays": 20}})
    with pytest.raises(ConfigError):
        from_dict({"reconstruct": {"iso_level": 0.0}})


def test_from_dict_parses_enums():
    cfg = from_dict({"walk": {"neighbor_level": "second"}})
    assert cfg.walk.neighbor_level is NeighborLevel.SECOND
    with pytest.raises(ConfigError):
        from_dict({"walk": {"neighbor_level": "third"}})


def test_overrides_win_and_leave_original():
    base = PipelineConfig()
    cfg = base.with_overrides(
        {
            "walk.omega": 0.0,
            "walk.neighbor_level": "second",
            "enabled_types": (1, 2),
            "oracle.kind": "intensity_percentile",
            "lumen.ray_policy": "adaptive16",
        }
    )
    assert cfg.walk.omega == 0.0
    assert cfg.walk.neighbor_level is NeighborLevel.SECOND
    assert cfg.enabled_types == (1, 2)
    assert cfg.oracle.kind == "intensity_percentile"
    assert cfg.lumen.ray_policy == "adaptive16"
    assert base.walk.omega == 5.0
    assert base.enabled_types == (1, 2, 3)


def test_override_none_is_skipped():
    cfg = PipelineConfig().with_overrides({"walk.omega": None, "seed": None})
    assert cfg == PipelineConfig()


def test_override_unknown_path_raises():
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides({"walk.gamma": 1.0})
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides({"nothing.omega": 1.0})
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides({"figment": 1.0})


def test_override_bad_values_raise():
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides({"oracle.kind": "mystery"})
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides({"enabled_types": (1, 7)})
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides({"threads": 0})


def test_load_config_bad_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{\"walk\": {\"omega\": ")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text(json.dumps({"walk": {"omega": 1.0}, "spurious": True}))
    with pytest.raises(ConfigError):
        load_config(path)
