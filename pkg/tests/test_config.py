import pytest
import yaml

from polyvis.harness.config import ConfigError, default_config, load_config, parse_config


def paths(exc):
    return [p for p, _ in exc.value.problems]


def test_minimal_config_fills_defaults():
    cfg = load_config({"seed": 3})
    assert cfg.seed == 3 and cfg.pe_scheme == "share_by_row"
    assert [e.name for e in cfg.experts] == ["clip", "dinov2"]
    assert yaml.safe_load(cfg.dump())["fusion"]["m_per_expert"] == {"clip": 8, "dinov2": 16}


def test_dump_round_trips(tmp_path):
    cfg = default_config(1)
    p = tmp_path / "c.yaml"
    p.write_text(cfg.dump())
    assert parse_config(p).to_dict() == cfg.to_dict()
    assert parse_config(p, seed=9).seed == 9


def test_bad_m_names_field():
    with pytest.raises(ConfigError) as exc:
        load_config({"seed": 0, "fusion": {"m_per_expert": {"clip": 5, "dinov2": 16}}})
    assert "fusion.m_per_expert.clip" in paths(exc)
    assert "fusion.m_per_expert.clip" in str(exc.value)


def test_misspelling_suggests():
    with pytest.raises(ConfigError) as exc:
        load_config({"seed": 0, "pe_schem": "share_all"})
    assert "did you mean 'pe_scheme'" in str(exc.value)


def test_all_problems_reported():
    with pytest.raises(ConfigError) as exc:
        load_config({"seed": 0, "pe_scheme": "rope", "decoder": {"n_heads": 5}, "phases": {"pretrain": {"lr": -1}}})
    assert {"pe_scheme", "decoder.n_heads", "phases.pretrain.lr"} <= set(paths(exc))


def test_seed_required():
    with pytest.raises(ConfigError) as exc:
        load_config({})
    assert "seed" in paths(exc)
    with pytest.raises(ConfigError):
        load_config({"seed": True})


def test_overflow_detected():
    with pytest.raises(ConfigError) as exc:
        load_config({"seed": 0, "decoder": {"max_len": 32}})
    assert "decoder.max_len" in paths(exc)


def test_replace():
    cfg = default_config(0)
    new = cfg.replace(pe_scheme="share_all", fusion__expert_order=["dinov2", "clip"])
    assert new.pe_scheme == "share_all" and new.fusion.expert_order == ("dinov2", "clip")
    assert cfg.pe_scheme == "share_by_row"
    with pytest.raises(ConfigError):
        cfg.replace(fusion__expert_order=["clip"])


def test_custom_expert_requires_geometry():
    with pytest.raises(ConfigError) as exc:
        load_config({"seed": 0, "experts": [{"name": "mine", "grid_rows": 4}]})
    assert "experts[0].grid_cols" in paths(exc)


def test_unreadable_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        parse_config(p)
