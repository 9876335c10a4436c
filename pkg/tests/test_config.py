import json

import pytest

from rnce import config as C


def test_defaults_resolve_architectures():
    cfg = C.ExperimentConfig(task="spiral", method="irnce")
    assert cfg.energy_arch["ctx_dim"] == 1 and cfg.energy_arch["time_embed_dim"] == 10
    assert cfg.flow_arch["kind"] == "concatsquash_vf"
    g = C.ExperimentConfig(task="gaussian1d", method="rnce")
    assert g.energy_arch["kind"] == "gaussian_mean"


def test_json_roundtrip_and_digest():
    cfg = C.ExperimentConfig(task="pinwheel", method="nf", seed=4)
    back = C.ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg and back.digest() == cfg.digest()
    assert C.ExperimentConfig(seed=5).digest() != C.ExperimentConfig(seed=4).digest()


@pytest.mark.parametrize("bad", [
    {"task": "moons"},
    {"method": "vae"},
    {"bogus": 1},
    {"train": {"K": 0}},
    {"train": {"nope": 1}},
    {"train": 3},
])
def test_invalid_configs_raise_config_error(bad):
    with pytest.raises(C.ConfigError):
        C.ExperimentConfig.from_dict(bad)


def test_overrides_reach_sections_and_parse_json_values():
    d = C.apply_overrides({"task": "pinwheel"}, ["train.K=19", "seed=3", "sampler.mcmc=hmc",
                                                 "energy_arch.widths=[4,4]"])
    assert d["train"]["K"] == 19 and d["seed"] == 3 and d["sampler"]["mcmc"] == "hmc"
    assert d["energy_arch"]["widths"] == [4, 4]
    for bad in (["nokey"], ["zzz=1"], ["train.zzz=1"], ["seed.x=1"]):
        with pytest.raises(C.ConfigError):
            C.apply_overrides({}, bad)


def test_load_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"task": "gaussian1d", "method": "rnce"}))
    cfg = C.load_config(str(p), ["train.T_outer=7"])
    assert cfg.train.T_outer == 7
    with pytest.raises(C.ConfigError):
        C.load_config(str(tmp_path / "missing.json"))
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(C.ConfigError):
        C.load_config(str(tmp_path / "bad.json"))
