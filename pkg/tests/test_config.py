import pytest

from kovae.config import (ConfigError, ExperimentConfig, builtin_configs, dump_config, load_config,
                          parse_config_text, parse_overrides)


def test_defaults_match_benchmark_setting():
    cfg = ExperimentConfig()
    assert (cfg.alpha, cfg.beta) == (0.009, 0.0009)
    assert (cfg.n_samples, cfg.seq_len, cfg.n_features) == (10000, 24, 5)
    assert cfg.gamma_eig == 1.0 and cfg.lr == 1e-3 and cfg.batch_size == 64


def test_parse_sections_and_comments():
    text = "[data]\ndataset = pendulum  # inline\nseq_len = 170\n[loss]\neig_targets = 1, 1\n"
    values = parse_config_text(text)
    assert values == {"dataset": "pendulum", "seq_len": 170, "eig_targets": (1.0, 1.0)}
    assert parse_config_text("steps = 5\n") == {"steps": 5}


@pytest.mark.parametrize("text", ["bogus = 1", "steps = many", "[a]\nsteps = 1\n[b]\nsteps = 2", "[broken"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


@pytest.mark.parametrize("over", [["alpha=-1"], ["drop_rate=0.3"], ["dataset=weather"], ["eig_targets=1,1"],
                                  ["nokey"], ["optimizer=sgd"], ["dataset=csv"], ["sines_dt=0"],
                                  ["dataset=pendulum"]])
def test_invalid_configs(over):
    extra = ["latent_dim=1"] if over == ["eig_targets=1,1"] else []
    with pytest.raises(ConfigError):
        load_config(None, over + extra)


def test_overrides_and_extras_win(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("[optim]\nsteps = 10\nlr = 0.01\n")
    cfg = load_config(str(f), ["steps=20"], seed=4, out_dir=None)
    assert (cfg.steps, cfg.lr, cfg.seed, cfg.out_dir) == (20, 0.01, 4, "runs/default")
    assert parse_overrides(["data_seed=none", "sines_dt=1"]) == {"data_seed": None, "sines_dt": 1.0}


def test_dump_roundtrip():
    cfg = ExperimentConfig(dataset="pendulum", eig_targets=(1.0, 1.0), data_seed=3, latent_dim=4, seq_len=170,
                           n_features=2)
    assert ExperimentConfig(**parse_config_text(dump_config(cfg))) == cfg
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == ExperimentConfig.from_dict(cfg.to_dict()).digest()


def test_builtin_configs_load():
    names = builtin_configs()
    assert {"sines_regular", "sines_irregular50", "pendulum", "pendulum_constrained"} <= set(names)
    for name in names:
        cfg = load_config(name)
        assert cfg.benchmark_parity
    con = load_config("pendulum_constrained")
    assert con.eig_targets == (1.0, 1.0) and con.latent_dim == 4 and con.seq_len == 170
    irr = load_config("sines_irregular50")
    assert irr.mode == "irregular" and irr.drop_rate == 0.5
    with pytest.raises(ConfigError, match="built-in"):
        load_config("no_such_config")
