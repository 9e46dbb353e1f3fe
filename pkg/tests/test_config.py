import json

import pytest

from hebbfw.config import ConfigSchemaError, ExperimentConfig, apply_overrides, desk_config, load_config, parse_config


class TestSchema:
    def test_defaults_follow_full_protocol(self):
        cfg = ExperimentConfig()
        assert (cfg.optim.lr, cfg.optim.weight_decay, cfg.optim.clip) == (5e-4, 5e-4, 1.0)
        assert (cfg.schedule.warmup_epochs, cfg.schedule.total_epochs, cfg.schedule.patience) == (10, 60, 15)
        assert (cfg.episodes.train_episodes, cfg.episodes.val_episodes, cfg.episodes.test_episodes) == (600, 200, 400)
        assert cfg.seed == 42 and cfg.data.split_ratios == (0.8, 0.1, 0.1)

    def test_unknown_key_names_path(self):
        with pytest.raises(ConfigSchemaError, match=r"optim\.learning_rate"):
            parse_config({"optim": {"learning_rate": 1e-3}})

    def test_bad_value_names_path(self):
        with pytest.raises(ConfigSchemaError, match=r"episodes\.k_shot"):
            parse_config({"episodes": {"k_shot": 0}})

    def test_zero_epochs(self):
        with pytest.raises(ConfigSchemaError, match="schedule"):
            parse_config({"schedule": {"total_epochs": 0, "warmup_epochs": 0}})

    def test_warmup_not_below_total(self):
        with pytest.raises(ConfigSchemaError):
            parse_config({"schedule": {"total_epochs": 5, "warmup_epochs": 5}})

    def test_bad_ratios(self):
        with pytest.raises(ConfigSchemaError, match="split_ratios"):
            parse_config({"data": {"split_ratios": [0.5, 0.5, 0.5]}})

    def test_unknown_preset(self):
        with pytest.raises(ConfigSchemaError, match="model"):
            parse_config({"model": {"preset": "resnet"}})

    def test_unknown_model_override(self):
        with pytest.raises(ConfigSchemaError, match="model"):
            parse_config({"model": {"preset": "desk_vit", "overrides": {"width": 3}}})

    def test_schema_version(self):
        with pytest.raises(ConfigSchemaError, match="schema_version"):
            parse_config({"schema_version": 2})


class TestRoundTrip:
    def test_json_round_trip(self, tmp_path):
        cfg = desk_config()
        path = tmp_path / "c.json"
        path.write_text(cfg.to_json())
        assert load_config(path) == cfg

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigSchemaError):
            load_config(path)

    def test_overrides(self):
        cfg = apply_overrides(desk_config(), **{"episodes.k_shot": 3, "seed": None})
        assert cfg.episodes.k_shot == 3 and cfg.seed == 42

    def test_override_revalidates(self):
        with pytest.raises(ConfigSchemaError):
            apply_overrides(desk_config(), **{"optim.lr": -1.0})

    def test_desk_backbone(self):
        bb = desk_config().backbone()
        assert (bb.depth, bb.d, bb.heads, bb.patch, bb.image_size) == (2, 64, 4, 8, 28)
        assert bb.hfw is None and bb.embed_mode == "cls"
        assert desk_config(**{"model.preset": "desk_vit_hebbian"}).backbone().hfw is not None

    def test_hfw_section_reaches_backbone(self):
        cfg = parse_config({"model": {"preset": "desk_vit_hebbian"}, "hfw": {"memory_scope": "per_episode"}})
        assert cfg.backbone().hfw.memory_scope == "per_episode"

    def test_dump_is_plain_json(self):
        json.dumps(desk_config().model_dump(mode="json"))


class TestShippedConfigs:
    @pytest.mark.parametrize("name", ["desk.json", "desk_hebbian.json", "omniglot_vit_hebbian.json",
                                      "omniglot_swin_hebbian.json"])
    def test_parse(self, name):
        from pathlib import Path
        load_config(Path(__file__).resolve().parents[1] / "configs" / name)

    def test_desk_matches_helper(self):
        from pathlib import Path
        assert load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.json") == desk_config()
