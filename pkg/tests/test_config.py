import pytest

from glmatch.config import Config, ConfigError, load_config


def test_defaults():
    cfg = Config()
    assert (cfg.descriptor.n, cfg.descriptor.w, cfg.descriptor.d_s) == (7, 5, 0.5)
    assert (cfg.loss.s3, cfg.loss.s5, cfg.loss.eta3, cfg.loss.eta5, cfg.loss.lam) == (30, 5, 0.5, 0.2, 0.5)
    assert (cfg.graph.layers, cfg.transport.delta, cfg.train.lr, cfg.train.batch_size) == (3, 0.5, 1e-3, 4)


def test_yaml_round_trip_and_hash(tmp_path):
    cfg = Config().override({"loss.lam": 0.0, "train.aug_scale": [0.8, 1.2]})
    cfg.dump(tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.hash() == cfg.hash() != Config().hash()
    assert back.train.aug_scale == (0.8, 1.2)


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "c.yaml").write_text("graph:\n  widht: 3\n")
    with pytest.raises(ConfigError, match="graph.widht"):
        load_config(tmp_path / "c.yaml")
    with pytest.raises(ConfigError):
        Config().override({"nope.x": 1})
    with pytest.raises(ConfigError):
        Config.from_dict({"graph": 3})


def test_partial_file_keeps_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("train:\n  epochs: 2\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.train.epochs == 2 and cfg.train.lr == 1e-3


def test_values_are_coerced_to_field_types(tmp_path):
    (tmp_path / "c.yaml").write_text("train:\n  lr: 1e-4\n  epochs: 3\ntransport:\n  delta: 1\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.train.lr == 1e-4 and isinstance(cfg.transport.delta, float)
    for bad in ({"train.epochs": 2.5}, {"graph.learn_graph": "yes"}, {"train.lr": "fast"}, {"descriptor.pooling": 3}):
        with pytest.raises(ConfigError):
            Config().override(bad)
    assert Config().override({"descriptor.sigma": 2}).descriptor.sigma == 2.0
