import pytest

from xwin.config import (ActionConfig, TrainConfig, config_from_text, config_to_text,
                         load_config, parse_overrides)


def test_round_trip_default_config():
    cfg = TrainConfig()
    text = config_to_text(cfg)
    back = config_from_text(text)
    assert back == cfg


def test_override_types():
    cfg = parse_overrides(TrainConfig(), {
        "model.embed_dim": "96",
        "loss.lambda_domain": "0.25",
        "loss.normalize_sim": "false",
        "action.mode": "euler3",
    })
    assert cfg.model.embed_dim == 96
    assert cfg.loss.lambda_domain == 0.25
    assert cfg.loss.normalize_sim is False
    assert cfg.action.mode == "euler3"
    assert cfg.model_config().action_inputs == 3


def test_unknown_keys_rejected():
    with pytest.raises(KeyError):
        parse_overrides(TrainConfig(), {"nosuch.key": "1"})
    with pytest.raises(KeyError):
        parse_overrides(TrainConfig(), {"model.nosuch": "1"})
    with pytest.raises(KeyError):
        parse_overrides(TrainConfig(), {"embed_dim": "1"})


def test_derived_keys_redirect():
    with pytest.raises(KeyError, match="loss.tau_init"):
        parse_overrides(TrainConfig(), {"model.tau_init": "0.1"})


def test_tau_flows_from_loss_section():
    cfg = parse_overrides(TrainConfig(), {"loss.tau_init": "0.2"})
    assert cfg.model_config().tau_init == 0.2


def test_config_file_with_comments(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\n\nmodel.embed_dim = 32\ntrain.seed = 9\n")
    cfg = load_config(path, {"train.epochs": "3"})
    assert cfg.model.embed_dim == 32
    assert cfg.train.seed == 9
    assert cfg.train.epochs == 3


def test_malformed_line_rejected():
    with pytest.raises(ValueError):
        config_from_text("model.embed_dim 32\n")


def test_action_config_invariants():
    with pytest.raises(ValueError):
        ActionConfig(n_projections=1)
    with pytest.raises(ValueError):
        ActionConfig(delta_phi_deg=7.0, bound_deg=90.0)  # not a divisor
    with pytest.raises(ValueError):
        ActionConfig(n_projections=80, delta_phi_deg=3.0, bound_deg=90.0)
    assert ActionConfig().max_k == 30


def test_bad_bool_rejected():
    with pytest.raises(ValueError):
        parse_overrides(TrainConfig(), {"loss.normalize_sim": "maybe"})
