"""Layered configuration: defaults, file, environment, explicit flags."""

import pytest

from txfuse.config import ENV_SEED, load_config


class TestDefaults:
    def test_loads_without_file(self):
        cfg = load_config(env={})
        assert cfg.seed == 7
        assert cfg.ablate == "none"
        assert cfg.split_ratios() == (0.7, 0.1, 0.2)
        assert cfg.synthetic  # no data paths set

    def test_typed_accessors(self):
        cfg = load_config(env={})
        assert isinstance(cfg.getint("txclm", "epochs"), int)
        assert isinstance(cfg.getfloat("txclm", "lr"), float)

    def test_feature_windows_in_seconds(self):
        cfg = load_config(overrides={("features", "long_window_days"): "2",
                                     ("features", "short_window_hours"): "6"},
                          env={})
        assert cfg.feature_windows() == (2 * 86400.0, 6 * 3600.0)

    def test_module_config_construction(self):
        cfg = load_config(env={})
        lm = cfg.txclm_config(vocab_size=64)
        assert lm.vocab_size == 64
        assert lm.seed == cfg.seed
        gae = cfg.magae_config()
        assert gae.d_node == 22
        cf = cfg.cafn_config(d_s=32, d_h=16, ablate="add")
        assert (cf.d_s, cf.d_h, cf.ablate) == (32, 16, "add")

    def test_contrastive_weight_override(self):
        cfg = load_config(env={})
        lm = cfg.txclm_config(vocab_size=10, contrastive_weight=0.0)
        assert lm.contrastive_weight == 0.0


class TestPrecedence:
    def test_file_overrides_defaults(self, tmp_path):
        p = tmp_path / "exp.ini"
        p.write_text("[experiment]\nseed = 42\n")
        assert load_config(str(p), env={}).seed == 42

    def test_env_overrides_file(self, tmp_path):
        p = tmp_path / "exp.ini"
        p.write_text("[experiment]\nseed = 42\n")
        cfg = load_config(str(p), env={ENV_SEED: "99"})
        assert cfg.seed == 99

    def test_cli_overrides_env(self, tmp_path):
        p = tmp_path / "exp.ini"
        p.write_text("[experiment]\nseed = 42\n")
        cfg = load_config(str(p), overrides={("experiment", "seed"): "5"},
                          env={ENV_SEED: "99"})
        assert cfg.seed == 5

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            load_config("/nonexistent/exp.ini", env={})

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "exp.ini"
        p.write_text("[nothere]\nx = 1\n")
        with pytest.raises(ValueError, match="unknown config section"):
            load_config(str(p), env={})

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "exp.ini"
        p.write_text("[txclm]\nbogus = 1\n")
        with pytest.raises(ValueError, match="unknown key"):
            load_config(str(p), env={})

    def test_unknown_override_rejected(self):
        with pytest.raises(ValueError, match="unknown override"):
            load_config(overrides={("txclm", "bogus"): "1"}, env={})

    def test_bad_ablation_rejected(self):
        cfg = load_config(overrides={("experiment", "ablate"): "nope"},
                          env={})
        with pytest.raises(ValueError):
            cfg.ablate


class TestDigest:
    def test_stable(self):
        assert load_config(env={}).digest() == load_config(env={}).digest()

    def test_sensitive_to_values(self):
        a = load_config(env={})
        b = load_config(overrides={("txclm", "epochs"): "9"}, env={})
        assert a.digest() != b.digest()

    def test_output_dir_excluded(self):
        a = load_config(overrides={("experiment", "output_dir"): "x"},
                        env={})
        b = load_config(overrides={("experiment", "output_dir"): "y"},
                        env={})
        assert a.digest() == b.digest()

    def test_roundtrip_through_file(self, tmp_path):
        cfg = load_config(overrides={("magae", "fanout"): "4",
                                     ("experiment", "seed"): "23"}, env={})
        p = str(tmp_path / "saved.ini")
        cfg.write(p)
        assert load_config(p, env={}).digest() == cfg.digest()


class TestDataSource:
    def test_paths_switch_off_synthetic(self):
        cfg = load_config(overrides={
            ("experiment", "transactions"): "tx.jsonl",
            ("experiment", "labels"): "y.csv"}, env={})
        assert not cfg.synthetic

    def test_partial_paths_rejected(self):
        cfg = load_config(overrides={
            ("experiment", "transactions"): "tx.jsonl"}, env={})
        with pytest.raises(ValueError):
            cfg.synthetic
