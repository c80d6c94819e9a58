"""Config registry tests: parsing, line-numbered errors, canonical
formatting, fingerprints, grid expansion."""

import pytest

from smpt.config import (
    REGISTRY,
    canonical_text,
    config_fingerprint,
    default_config,
    describe_registry,
    load_config,
    model_config,
    parse_config,
    parse_grid,
    save_config,
    train_config,
)
from smpt.errors import ConfigError


def test_defaults_cover_registry():
    cfg = default_config()
    assert set(cfg) == set(REGISTRY)
    assert cfg["model.hidden"] == 192
    assert cfg["train.lr"] == 4e-4
    assert cfg["eval.episodes"] == 16


def test_parse_overrides_and_comments():
    cfg = parse_config("""
# a comment
model.hidden = 64

train.strategy = causal
train.masked_context = true
""")
    assert cfg["model.hidden"] == 64
    assert cfg["train.strategy"] == "causal"
    assert cfg["train.masked_context"] is True
    assert cfg["model.blocks"] == 4  # untouched default


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match="line 3.*no.such.key"):
        parse_config("\n\nno.such.key = 1\n")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("just some words\n")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="line 2.*duplicate.*line 1"):
        parse_config("model.hidden = 64\nmodel.hidden = 32\n")


def test_bad_values_name_line_and_type():
    with pytest.raises(ConfigError, match="line 1: bad int"):
        parse_config("model.hidden = tiny\n")
    with pytest.raises(ConfigError, match="bad float"):
        parse_config("train.lr = fast\n")
    with pytest.raises(ConfigError, match="bad bool"):
        parse_config("train.masked_context = yes\n")


def test_semantic_validation():
    with pytest.raises(ConfigError, match="strategy"):
        parse_config("train.strategy = shuffle\n")
    with pytest.raises(ConfigError, match="task"):
        parse_config("eval.task = juggling\n")
    with pytest.raises(ConfigError, match="transfer.mode"):
        parse_config("transfer.mode = partial:two\n")
    with pytest.raises(ConfigError, match="ratio"):
        parse_config("train.ratio_lo = 0.9\ntrain.ratio_hi = 0.7\n")
    assert parse_config("transfer.mode = partial:2\n")["transfer.mode"] == "partial:2"


def test_canonical_round_trip():
    cfg = parse_config("model.hidden = 64\ntrain.lr = 0.001\n")
    text = canonical_text(cfg)
    again = parse_config(text)
    assert again == cfg
    keys = [line.split("=")[0] for line in text.strip().splitlines()]
    assert keys == sorted(REGISTRY)


def test_fingerprint_ignores_formatting_but_not_values():
    a = parse_config("model.hidden = 64\n# note\ntrain.lr = 0.001\n")
    b = parse_config("train.lr=1e-3\nmodel.hidden=64\n")
    c = parse_config("model.hidden = 128\ntrain.lr = 0.001\n")
    assert config_fingerprint(a) == config_fingerprint(b)
    assert config_fingerprint(a) != config_fingerprint(c)
    assert len(config_fingerprint(a)) == 64


def test_save_and_load_round_trip(tmp_path):
    cfg = parse_config("model.context = 8\ntrain.seed = 5\n")
    save_config(cfg, tmp_path / "cfg")
    assert load_config(tmp_path / "cfg") == cfg


def test_load_config_error_names_file(tmp_path):
    (tmp_path / "cfg").write_text("wat.key = 1\n")
    with pytest.raises(ConfigError, match="cfg.*line 1"):
        load_config(tmp_path / "cfg")


def test_adapters_map_fields():
    cfg = parse_config("model.hidden = 32\nmodel.heads = 2\nmodel.blocks = 1\n"
                       "train.epochs = 7\ntrain.warmup_epochs = 2\n"
                       "train.ratio_lo = 0.5\ntrain.ratio_hi = 0.6\n")
    mc = model_config(cfg)
    assert mc.hidden == 32 and mc.heads == 2 and mc.blocks == 1
    tc = train_config(cfg)
    assert tc.epochs == 7 and tc.ratio_range == (0.5, 0.6)


def test_registry_described():
    text = describe_registry()
    for key in REGISTRY:
        assert key in text


def test_parse_grid_product():
    combos = parse_grid("train.strategy = token, causal\nmodel.context = 4, 8\n")
    assert len(combos) == 4
    assert {(c["train.strategy"], c["model.context"]) for c in combos} == {
        ("token", 4), ("token", 8), ("causal", 4), ("causal", 8)}


def test_parse_grid_empty_and_errors():
    assert parse_grid("# nothing here\n\n") == []
    with pytest.raises(ConfigError, match="line 1.*unknown"):
        parse_grid("nope = 1,2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_grid("model.context = 4\nmodel.context = 8\n")
    with pytest.raises(ConfigError, match="no values"):
        parse_grid("model.context = ,\n")
    with pytest.raises(ConfigError, match="bad int"):
        parse_grid("model.context = 4, eight\n")
