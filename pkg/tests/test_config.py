import json

import pytest

from fedhelp.config import MODES, PRESETS, ConfigError, parse_config, parse_dict, serialize


def test_empty_document_gives_defaults():
    cfg = parse_config("")
    assert cfg.mode == "fedhelp" and cfg.task == "classification"
    assert (cfg.loss.lambda_R, cfg.loss.lambda_J, cfg.loss.lambda_F, cfg.loss.lambda_B) == (0.1, 0.2, 1.0, 0.2)
    assert cfg.omega_size == 3
    assert parse_config("{}") == cfg


def test_omega_defaults_by_task():
    assert parse_dict({"data": {"num_classes": 2}}).omega_size == 1
    assert parse_dict({"preset": "lungseg-toy"}).omega_size == 1
    assert parse_dict({"preset": "isic19-synthetic"}).omega_size == 3
    assert parse_dict({"loss": {"omega_size": 2}}).omega_size == 2


def test_mode_constraint_violation_names_the_field():
    with pytest.raises(ConfigError) as err:
        parse_dict({"mode": "fedhelp_f", "loss": {"lambda_B": 0.5}})
    assert err.value.field == "loss.lambda_B"
    with pytest.raises(ConfigError) as err:
        parse_dict({"mode": "fedhelp_minus", "oracles": {"count": 2}})
    assert err.value.field == "oracles.count"


def test_mode_pins_are_applied():
    assert parse_dict({"mode": "fedhelp_f"}).loss.lambda_B == 0.0
    assert parse_dict({"mode": "fedhelp_b"}).loss.lambda_F == 0.0
    assert parse_dict({"mode": "fedhelp_minus"}).oracles.count == 0
    assert parse_dict({"mode": "fedhelp_one_api"}).oracles.count == 1
    assert parse_dict({"mode": "fedhelp_f", "loss": {"lambda_B": 0}}).loss.lambda_B == 0.0
    fedavg = parse_dict({"mode": "fedavg"})
    assert fedavg.homogeneous and fedavg.aggregates
    assert not parse_dict({"mode": "local"}).aggregates


@pytest.mark.parametrize("doc,where", [
    ({"modes": "fedhelp"}, "modes"),
    ({"loss": {"lamda_R": 0.1}}, "loss.lamda_R"),
    ({"mode": "fedprox"}, "mode"),
    ({"preset": "cifar"}, "preset"),
    ({"seed": "1"}, "seed"),
    ({"loss": {"lambda_R": -0.1}}, "loss.lambda_R"),
    ({"weight_map": {"sigma": 0}}, "weight_map.sigma"),
    ({"clients": [{"kind": "small", "train": 0, "test": 5}]}, "clients[0].train"),
    ({"clients": [{"kind": "medium", "train": 5, "test": 5}]}, "clients[0].kind"),
    ({"loss": {"omega_size": 9}}, "loss.omega_size"),
])
def test_invalid_documents(doc, where):
    with pytest.raises(ConfigError) as err:
        parse_dict(doc)
    assert err.value.field == where


def test_invalid_json():
    with pytest.raises(ConfigError):
        parse_config("{not json")


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_round_trip_is_canonical(mode, preset):
    cfg = parse_dict({"preset": preset, "mode": mode, "seed": 3})
    text = serialize(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize(again) == text


def test_preset_client_plans():
    isic = parse_dict({"preset": "isic19-synthetic"})
    assert [c.kind for c in isic.clients] == ["large"] * 3 + ["small"] * 3
    assert sum(c.train for c in isic.clients) == 3400
    seg = parse_dict({"preset": "lungseg-toy"})
    assert [c.kind for c in seg.clients] == ["large", "large", "small"]
    assert seg.clients[0].train == seg.clients[1].train > seg.clients[2].train


def test_replace_revalidates():
    cfg = parse_dict({})
    assert cfg.replace(seed=9).seed == 9
    with pytest.raises(ConfigError):
        cfg.replace(mode="nope")


def test_explicit_clients_override_preset():
    doc = {"clients": [{"kind": "large", "train": 50, "test": 10}, {"kind": "small", "train": 20, "test": 10}]}
    cfg = parse_dict(doc)
    assert cfg.large_clients == [0] and cfg.small_clients == [1]
    assert json.loads(serialize(cfg))["clients"][1] == {"kind": "small", "train": 20, "test": 10}


def test_source_size_must_cover_clients():
    with pytest.raises(ConfigError) as err:
        parse_dict({"data": {"source_size": 100}})
    assert err.value.field == "data.source_size"
