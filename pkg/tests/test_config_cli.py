import numpy as np
import pytest
import yaml

from siba.cli import build_parser, main
from siba.config import (SWEEP_AXES, ConfigError, content_hash, dump_config, load_config, shipped_configs,
                         validate_config)


def test_shipped_configs_validate():
    names = shipped_configs()
    for required in ("cifar10_siba_default", "cifar10_siba_reduced", "cifar10_all_to_all",
                     "cifar10_limited_data", "cifar10_transfer", "synthetic_smoke"):
        assert required in names
    for name in names:
        load_config(name)


def test_default_config_hyperparameters():
    cfg = load_config("cifar10_siba_default")
    a = cfg.attack
    assert (a.k, a.step_size, a.iterations, a.mask_update_period, a.poisoning_rate) == (100, 0.2, 200, 5, 0.01)
    assert a.eps == pytest.approx(8 / 255) and a.label_rule.target == 0
    s = cfg.victim
    assert (s.epochs, s.lr, s.milestones, s.momentum, s.weight_decay) == (100, 0.1, [60, 90], 0.9, 5e-4)
    assert load_config("cifar10_siba_reduced").victim.epochs == 30
    assert load_config("cifar10_ablate_poisoning_rate").sweep == {"poisoning_rate": [0.005, 0.01, 0.015, 0.02, 0.025]}


def test_unknown_keys_are_reported_with_paths():
    with pytest.raises(ConfigError) as exc:
        validate_config({"attack": {"kk": 3, "eps": 2.0}, "victim": {"epochs": 5, "milestones": [6]}})
    paths = {p for p, _ in exc.value.problems}
    assert "attack.kk" in paths and "attack.eps" in paths and "victim" in paths


def test_multi_axis_sweep_rejected():
    with pytest.raises(ConfigError, match="exactly one axis"):
        validate_config({"sweep": {"k": [50, 100], "eps": [0.01, 0.02]}})
    with pytest.raises(ConfigError, match="unknown sweep axis"):
        validate_config({"sweep": {"lr": [0.1]}})


def test_sweep_axes_map_to_real_fields():
    cfg = validate_config({})
    for axis, path in SWEEP_AXES.items():
        node = cfg.to_dict()
        for key in path:
            node = node[key]
        assert not isinstance(node, dict), axis


def test_resolved_seeds_and_override():
    cfg = validate_config({"seed": 3, "seeds": {"victim": 99}}).resolved()
    assert (cfg.seeds.surrogate, cfg.seeds.synthesis, cfg.seeds.victim) == (30, 31, 99)
    assert cfg.with_override(("attack", "k"), 7).attack.k == 7


def test_dump_round_trip(tmp_path):
    cfg = load_config("synthetic_smoke").resolved()
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_bad_yaml_and_missing_file(tmp_path):
    (tmp_path / "bad.yaml").write_text("a: [1, 2")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError, match="no config file"):
        load_config("does_not_exist")


def test_content_hash_stable():
    assert content_hash("a", {"x": 1, "y": 2}) == content_hash("a", {"y": 2, "x": 1}) != content_hash("a", {"x": 2})


def test_cli_parser_verbs_and_flags():
    p = build_parser()
    for verb in ("synthesize", "poison", "train", "evaluate", "defend", "run", "ablate", "transfer"):
        args = p.parse_args([verb, "--config", "x", "--out-dir", "o", "--seed", "2", "--device", "cpu", "--resume"])
        assert args.verb == verb and args.seed == 2 and args.resume


def test_cli_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"attack": {"nope": 1}}))
    assert main(["run", "--config", str(tmp_path / "c.yaml"), "--out-dir", str(tmp_path / "o")]) == 2
    assert "attack.nope" in capsys.readouterr().err


def test_cli_missing_data_exit_code(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SIBA_DATA_DIR", str(tmp_path / "empty"))
    assert main(["synthesize", "--config", "cifar10_siba_reduced", "--out-dir", str(tmp_path / "o")]) == 1
    assert "SIBA_DATA_DIR" in capsys.readouterr().err
