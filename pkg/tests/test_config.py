import dataclasses

import pytest

from flexcode.config import VARIANTS, Config, load_config, loads


def test_round_trip_default_and_modified():
    for cfg in (Config(), Config(codebook_size=16, tau_m=0.25, router_warm_start=False, variant="cid_only",
                                 eval_ks="1,20", interactions_path="/tmp/x y.tsv")):
        again = loads(cfg.dumps())
        assert again == cfg
        assert again.fingerprint() == cfg.fingerprint()


def test_every_field_is_serialised():
    text = Config().dumps()
    keys = [line.split(" = ")[0] for line in text.splitlines()]
    assert keys == [f.name for f in dataclasses.fields(Config)]


def test_comments_and_types():
    cfg = loads("# header\nlevels = 5  # budget\n\nrouter_warm_start = no\nlambda_cca = 0.5\n")
    assert cfg.levels == 5 and cfg.router_warm_start is False and cfg.lambda_cca == 0.5
    with pytest.raises(ValueError, match="unknown key"):
        loads("not_a_key = 1")
    with pytest.raises(ValueError, match="line 1"):
        loads("levels 5")
    with pytest.raises(ValueError):
        loads("router_warm_start = maybe")


def test_fingerprint_tracks_selected_fields():
    a, b = Config(), Config(gen_lr=0.5)
    assert a.fingerprint() != b.fingerprint()
    assert a.fingerprint("cf_lr", "d_col") == b.fingerprint("cf_lr", "d_col")


def test_validation(tmp_path):
    with pytest.raises(ValueError):
        Config(tau_m=0.0).validate()
    with pytest.raises(ValueError):
        Config(lambda_lb=-1.0).validate()
    with pytest.raises(ValueError):
        Config(levels=1).validate()
    with pytest.raises(ValueError):
        Config(variant="nope").validate()
    with pytest.raises(ValueError):
        Config(beam_width=5, eval_ks="10").validate()
    assert Config(lambda_cca=0.0).validate().lambda_cca == 0.0
    assert set(VARIANTS) == {"full", "sid_only", "cid_only", "fixed_split", "no_alignment"}
    p = tmp_path / "c.conf"
    p.write_text("levels = 4\n")
    assert load_config(p, seed=9, variant=None).levels == 4
    assert load_config(p, seed=9).seed == 9
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.conf")
