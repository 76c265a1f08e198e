import json
import math

import pytest

from baryfed.config import ConfigError, load_config, parse_config
from baryfed.geometry import AggregationMethod, Divergence

MINIMAL = {"dataset": {"kind": "synth"}}


def with_section(name, body):
    obj = {"dataset": {"kind": "synth"}}
    obj[name] = body
    return obj


class TestDefaults:
    def test_minimal_config_resolves(self):
        cfg = parse_config(MINIMAL)
        assert cfg.federation.aggregation is AggregationMethod.W2B
        assert cfg.personalization.divergence is Divergence.W2SQ
        assert cfg.personalization.lambdas[0] == 0.0
        assert math.isinf(cfg.personalization.lambdas[-1])
        assert cfg.seeds == (0,)
        assert cfg.incremental.w_grid == tuple(round(0.1 * i, 1) for i in range(11))

    def test_dataset_required(self):
        with pytest.raises(ConfigError, match="dataset"):
            parse_config({})


class TestUnknownKeys:
    def test_root_unknown_key_named(self):
        with pytest.raises(ConfigError, match="outdir"):
            parse_config({"dataset": {"kind": "synth"}, "outdir": "x"})

    def test_section_unknown_key_named(self):
        with pytest.raises(ConfigError, match="dataset.sprad"):
            parse_config({"dataset": {"kind": "synth", "sprad": 0.1}})


class TestDataset:
    def test_kind_validated(self):
        with pytest.raises(ConfigError, match="kind"):
            parse_config({"dataset": {"kind": "csv"}})

    def test_idx_requires_paths(self):
        with pytest.raises(ConfigError, match="train_images"):
            parse_config({"dataset": {"kind": "idx"}})

    def test_synth_bounds(self):
        with pytest.raises(ConfigError, match="spread"):
            parse_config({"dataset": {"kind": "synth", "spread": 0.0}})
        with pytest.raises(ConfigError, match="test_fraction"):
            parse_config({"dataset": {"kind": "synth", "test_fraction": 1.0}})


class TestLambdas:
    def test_inf_keyword(self):
        cfg = parse_config(
            with_section("personalization", {"lambdas": [0, 1, "inf"]})
        )
        assert cfg.personalization.lambdas == (0.0, 1.0, math.inf)

    def test_negative_rejected(self):
        with pytest.raises(ConfigError, match="lambdas\\[0\\]"):
            parse_config(with_section("personalization", {"lambdas": [-1, 0]}))

    def test_ascending_required(self):
        with pytest.raises(ConfigError, match="ascending"):
            parse_config(with_section("personalization", {"lambdas": [1, 1]}))

    def test_bad_string(self):
        with pytest.raises(ConfigError, match="'inf'"):
            parse_config(with_section("personalization", {"lambdas": ["infinite"]}))

    def test_forward_kl_rejected(self):
        with pytest.raises(ConfigError, match="rkl or w2sq"):
            parse_config(with_section("personalization", {"divergence": "kl"}))

    def test_divergence_case_insensitive(self):
        cfg = parse_config(with_section("personalization", {"divergence": "RKL"}))
        assert cfg.personalization.divergence is Divergence.RKL


class TestFederation:
    def test_aggregation_case_insensitive(self):
        for name in ("eaa", "EAA", "Eaa"):
            cfg = parse_config(with_section("federation", {"aggregation": name}))
            assert cfg.federation.aggregation is AggregationMethod.EAA

    def test_bad_aggregation_lists_options(self):
        with pytest.raises(ConfigError, match="eaa"):
            parse_config(with_section("federation", {"aggregation": "mean"}))

    def test_algorithm_validated(self):
        with pytest.raises(ConfigError, match="algorithm"):
            parse_config(with_section("federation", {"algorithm": "sgd"}))


class TestOptimizer:
    def test_beta_range(self):
        with pytest.raises(ConfigError, match="beta2"):
            parse_config(with_section("optimizer", {"beta2": 1.0}))

    def test_clip_radius_null_ok(self):
        cfg = parse_config(with_section("optimizer", {"clip_radius": None}))
        assert cfg.optimizer.clip_radius is None
        with pytest.raises(ConfigError, match="clip_radius"):
            parse_config(with_section("optimizer", {"clip_radius": 0}))


class TestMisc:
    def test_model_hidden_validated(self):
        with pytest.raises(ConfigError, match="hidden"):
            parse_config(with_section("model", {"hidden": [32, 0]}))

    def test_w_grid_bounds(self):
        with pytest.raises(ConfigError, match="w_grid\\[1\\]"):
            parse_config(with_section("incremental", {"w_grid": [0.5, 1.5]}))

    def test_compare_methods_validated(self):
        with pytest.raises(ConfigError, match="methods\\[1\\]"):
            parse_config(with_section("compare", {"methods": ["eaa", "avg"]}))
        cfg = parse_config(with_section("compare", {"methods": ["EAA", "W2B"]}))
        assert cfg.compare.methods == ("eaa", "w2b")

    def test_seeds_validated(self):
        with pytest.raises(ConfigError, match="seeds"):
            parse_config({"dataset": {"kind": "synth"}, "seeds": []})
        with pytest.raises(ConfigError, match="seeds"):
            parse_config({"dataset": {"kind": "synth"}, "seeds": [0, -1]})


class TestSerialization:
    def test_inf_survives_round_trip(self):
        cfg = parse_config(MINIMAL)
        doc = cfg.to_json_dict()
        assert doc["personalization"]["lambdas"][-1] == "inf"
        json.dumps(doc)  # must be JSON-safe

    def test_execution_fields_dropped(self):
        cfg = parse_config(MINIMAL)
        doc = cfg.to_json_dict(include_execution=False)
        assert "out_dir" not in doc
        assert "threads" not in doc["federation"]
        full = cfg.to_json_dict(include_execution=True)
        assert "out_dir" in full and "threads" in full["federation"]


class TestLoadConfig:
    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(str(path))

    def test_round_trip(self, tmp_path):
        path = tmp_path / "ok.json"
        path.write_text(json.dumps(MINIMAL))
        cfg = load_config(str(path))
        assert cfg.dataset.kind == "synth"
