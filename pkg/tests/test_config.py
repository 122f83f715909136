import pytest

from bypasstrack.config import Config, ConfigError, desk_header, dump, flatten, load, loads, save

# one out-of-range value per field
BAD_VALUES = {
    "model.d": 0,
    "model.depth": 0,
    "model.n_heads": 0,
    "model.mlp_layers": 0,
    "model.patch": 0,
    "model.channels": 0,
    "model.template_size": 0,
    "model.search_size": -16,
    "model.head_width": 0,
    "model.head_stages": 0,
    "bypass.rho": 1.5,
    "bypass.tau0": -0.1,
    "bypass.zeta": 0.0,
    "bypass.n_enf": -1,
    "prune.mu": 0.0,
    "prune.alpha": 0.0,
    "train.lr": 0.0,
    "train.weight_decay": -1e-4,
    "train.epochs": 0,
    "train.batch": 0,
    "train.lr_drop_epoch": -1,
    "train.seed": -1,
    "train.samples_per_epoch": 0,
    "loss.lambda_iou": -1.0,
    "loss.lambda_l1": -1.0,
    "loss.gamma": -1.0,
    "data.easy_fraction": 1.5,
    "data.sequence_length": 1,
    "data.num_sequences": 0,
    "data.frame_size": 8,
    "data.eval_sequences": 0,
    "data.template_factor": 0.5,
    "data.search_factor": 0.9,
}


class TestDefaults:
    def test_reference_hyperparameters(self):
        cfg = Config()
        assert (cfg.bypass.rho, cfg.bypass.tau0, cfg.bypass.zeta) == (0.5, 0.4, 0.1)
        assert (cfg.prune.mu, cfg.prune.alpha) == (0.3, 1e-4)
        assert cfg.train.weight_decay == 1e-4
        assert (cfg.loss.lambda_iou, cfg.loss.lambda_l1, cfg.loss.gamma) == (2.0, 5.0, 5.0)

    def test_desk_geometry(self):
        m = Config().model
        assert (m.d, m.depth, m.n_heads, m.patch, m.template_size, m.search_size) == (64, 6, 4, 16, 64, 128)
        assert Config().bypass.n_enf == 2

    def test_desk_schedule_keeps_drop_ratio(self):
        t = Config().train
        assert t.lr_drop_epoch / t.epochs == pytest.approx(240 / 300)

    def test_header_records_deviations(self):
        line = desk_header(Config())[0]
        assert line.startswith("#") and "4e-5" in line and "300" in line and "240" in line


class TestValidation:
    def test_every_field_covered(self):
        # dr_init is an unbounded real
        assert set(BAD_VALUES) | {"prune.dr_init"} == set(flatten(Config()))

    @pytest.mark.parametrize("key,value", sorted(BAD_VALUES.items()))
    def test_out_of_range_rejected_by_name(self, key, value):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            Config().with_updates(**{key: value})

    def test_n_enf_equal_depth(self):
        with pytest.raises(ConfigError, match="bypass.n_enf"):
            Config().with_updates(**{"bypass.n_enf": 6})

    def test_heads_must_divide_d(self):
        with pytest.raises(ConfigError, match="model.n_heads"):
            Config().with_updates(**{"model.n_heads": 5})

    def test_patch_must_divide_crops(self):
        with pytest.raises(ConfigError, match="model.template_size"):
            Config().with_updates(**{"model.patch": 12})

    def test_mu_keeping_nothing(self):
        with pytest.raises(ConfigError, match="prune.mu"):
            Config().with_updates(**{"prune.mu": 0.05})

    def test_drop_after_end(self):
        with pytest.raises(ConfigError, match="train.lr_drop_epoch"):
            Config().with_updates(**{"train.lr_drop_epoch": 31})

    @pytest.mark.parametrize("key,value", [("model.d", 64.5), ("model.depth", "6"), ("bypass.rho", True),
                                           ("train.epochs", 3.0)])
    def test_wrong_type(self, key, value):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            Config().with_updates(**{key: value})

    def test_int_accepted_for_float(self):
        assert Config().with_updates(**{"bypass.rho": 1}).bypass.rho == 1.0

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            Config().with_updates(**{"model.width": 3})


class TestText:
    def test_round_trip(self, tmp_path):
        cfg = Config().with_updates(**{"train.lr": 1.5e-3, "model.depth": 4, "bypass.n_enf": 1})
        save(cfg, tmp_path / "c.toml")
        again = load(tmp_path / "c.toml")
        assert again == cfg and again.hash() == cfg.hash()
        assert dump(again) == dump(cfg)

    def test_flat_dotted_format(self):
        text = dump(Config())
        assert "model.d = 64\n" in text and "bypass.rho = 0.5\n" in text

    def test_partial_file_uses_defaults(self):
        cfg = loads("train.epochs = 10\ntrain.lr_drop_epoch = 8\n")
        assert cfg.train.epochs == 10 and cfg.model == Config().model

    @pytest.mark.parametrize("text", ["model.width = 3\n", "extra.x = 1\n", "model.d.x = 1\n", "rho = 0.5\n"])
    def test_unknown_keys_in_text(self, text):
        with pytest.raises(ConfigError, match="unknown"):
            loads(text)

    def test_malformed(self):
        with pytest.raises(ConfigError, match="malformed"):
            loads("model.d = = 3")

    def test_out_of_range_in_text(self):
        with pytest.raises(ConfigError, match="bypass.rho"):
            loads("bypass.rho = 1.5\n")

    def test_hash_tracks_content(self):
        a = Config()
        assert a.hash() == Config().hash()
        assert a.hash() != a.with_updates(**{"train.seed": 1}).hash()
