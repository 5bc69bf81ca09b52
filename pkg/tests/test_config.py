import json

import pytest

from fcakit.config import CONFIG_VERSION, ConfigError, RunConfig


def _doc(**sections):
    return {"version": CONFIG_VERSION, **sections}


def test_defaults_round_trip():
    cfg = RunConfig.from_dict(_doc())
    again = RunConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_sections_parsed():
    cfg = RunConfig.from_dict(_doc(train={"lam": 0.01, "epochs": [2, 1, 3]},
                                   fca={"mode": "weighted", "k_prime": 2},
                                   task={"max_len": 32}, model={"num_layers": 2}))
    assert cfg.train.lam == 0.01 and cfg.train.epochs == [2, 1, 3]
    assert cfg.fca.mode == "weighted" and cfg.fca.k_prime == 2
    enc = cfg.encoder_config(vocab_size=50, num_classes=3)
    assert (enc.num_layers, enc.max_len, enc.vocab_size, enc.num_classes) == (2, 32, 50, 3)


@pytest.mark.parametrize("doc", [
    {"version": CONFIG_VERSION, "extra": {}},
    _doc(train={"learning_rate": 0.1}),
    _doc(model={"hidden": 8}),
    _doc(fca={"kprime": 1}),
    _doc(task={"format": "x"}),
])
def test_unknown_keys_rejected(doc):
    with pytest.raises(ConfigError, match="unknown keys"):
        RunConfig.from_dict(doc)


def test_version_required():
    with pytest.raises(ConfigError, match="version"):
        RunConfig.from_dict({})
    with pytest.raises(ConfigError, match="version"):
        RunConfig.from_dict({"version": 99})


def test_invalid_values():
    with pytest.raises(ConfigError):
        RunConfig.from_dict(_doc(train={"lam": -1.0}))
    with pytest.raises(ConfigError):
        RunConfig.from_dict(_doc(fca={"mode": "max"}))
    with pytest.raises(ConfigError):
        RunConfig.from_dict(_doc(model={"num_heads": 3, "d_hidden": 8})).encoder_config(10, 2)
    with pytest.raises(ConfigError, match="max_len"):
        RunConfig.from_dict(_doc(model={"max_len": 16}, task={"max_len": 32})).encoder_config(10, 2)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps(_doc(train={"seed": 4})))
    assert RunConfig.load(good).train.seed == 4
