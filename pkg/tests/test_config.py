import pytest

from vinvl.config import ConfigError, PipelineConfig, load_config, parse_config_text, render_config


class TestParsing:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.seed == 7 and cfg.model.hidden == 64 and cfg.model.layers == 2
        assert cfg.world.n_images == 500 and cfg.pretrain.steps == 2000

    def test_values_and_comments(self):
        cfg = parse_config_text("# comment\nseed = 3\nmodel.heads = 2  # inline\npretrain.mtl_on_polluted = yes\n"
                                "regions.iou_threshold = 0.4\n")
        assert (cfg.seed, cfg.model.heads, cfg.pretrain.mtl_on_polluted, cfg.regions.iou_threshold) == \
            (3, 2, True, 0.4)

    @pytest.mark.parametrize("text", ["model.hiddn = 3", "nosuch.key = 1", "model = 3", "seed = seven",
                                      "pretrain.mtl_on_polluted = maybe", "model.hidden = 30",
                                      "sampling.plan = vg:full", "just a line"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_overrides_apply_after_file(self, tmp_path):
        (tmp_path / "c.txt").write_text("seed = 3\nmodel.layers = 1\n")
        cfg = load_config(tmp_path / "c.txt", {"seed": 9, "pretrain.steps": "10"})
        assert (cfg.seed, cfg.model.layers, cfg.pretrain.steps) == (9, 1, 10)

    def test_render_roundtrip(self):
        cfg = parse_config_text("seed = 11\nmodel.norm = post\nregions.normalize_positions = false\n")
        assert parse_config_text(render_config(cfg)) == cfg

    def test_sampling_plan(self):
        assert PipelineConfig().sampling.parsed()["vg"] == ("class_aware", 1)


class TestHash:
    def test_formatting_does_not_matter(self):
        a = parse_config_text("seed = 3\nmodel.heads = 2\n")
        b = parse_config_text("# different layout\nmodel.heads=2\n\nseed   =   3\n")
        assert a.hash() == b.hash()

    def test_default_value_written_out_is_same_config(self):
        assert parse_config_text("seed = 7").hash() == PipelineConfig().hash()

    @pytest.mark.parametrize("key,value", [("seed", "8"), ("model.init_std", "0.2"), ("caption.beam_size", "4"),
                                           ("world.noise", "0.11")])
    def test_any_change_changes_hash(self, key, value):
        assert parse_config_text(f"{key} = {value}").hash() != PipelineConfig().hash()
