import json

import pytest

from mitodet.config import RunConfig, load_run_config, parse_run_config, save_run_config
from mitodet.errors import ConfigError


class TestRunConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = RunConfig()
        path = tmp_path / "config.json"
        save_run_config(path, cfg)
        assert load_run_config(path) == cfg

    def test_dict_round_trip_through_json(self):
        cfg = RunConfig(max_steps=7, anchor_scales=(1.0, 2.0), include_unlabeled=True)
        doc = json.loads(json.dumps(cfg.to_dict()))
        assert parse_run_config(doc) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key 'velocity'"):
            parse_run_config({"velocity": 1})

    def test_nested_value_rejected(self):
        with pytest.raises(ConfigError, match="flat"):
            parse_run_config({"batch_size": {"value": 12}})

    def test_type_errors(self):
        with pytest.raises(ConfigError):
            parse_run_config({"batch_size": 1.5})
        with pytest.raises(ConfigError):
            parse_run_config({"include_unlabeled": "yes"})
        with pytest.raises(ConfigError):
            parse_run_config({"anchor_scales": "big"})

    def test_int_accepted_for_float_field(self):
        cfg = parse_run_config({"learning_rate": 1})
        assert cfg.learning_rate == 1.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "absent.json")

    def test_to_model_config_wires_fields(self):
        cfg = RunConfig(unet_depth=3, grl_strength=2.0,
                        domain_head_placement="latent")
        mc = cfg.to_model_config(num_domains=4)
        assert mc.unet_depth == 3
        assert mc.num_domains == 4
        assert mc.grl_strength == 2.0
        assert mc.domain_head_placement == "latent"
