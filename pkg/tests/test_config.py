"""INI configuration loading: defaults, strict key checking, hashing."""

import pytest

from portraitgen import config as cf


def test_empty_text_gives_defaults():
    cfg = cf.load_config(text="")
    assert cfg == cf.PipelineConfig()


def test_missing_sections_allowed():
    cfg = cf.load_config(text="[train]\nseed = 3\n")
    assert cfg.train.seed == 3
    assert cfg.data == cf.DataConfig()


def test_unknown_key_rejected():
    with pytest.raises(cf.ConfigError) as exc:
        cf.load_config(text="[train]\nseeed = 3\n")
    assert any("seeed" in e for e in exc.value.errors)


def test_unknown_section_rejected():
    with pytest.raises(cf.ConfigError) as exc:
        cf.load_config(text="[rendering]\nx = 1\n")
    assert any("rendering" in e for e in exc.value.errors)


def test_errors_collected_not_first_only():
    text = "[train]\nbogus = 1\nseed = notanint\n[nope]\ny = 2\n"
    with pytest.raises(cf.ConfigError) as exc:
        cf.load_config(text=text)
    joined = "\n".join(exc.value.errors)
    assert "bogus" in joined and "notanint" in joined and "nope" in joined
    assert len(exc.value.errors) >= 3


def test_odd_latent_size_rejected():
    with pytest.raises(cf.ConfigError) as exc:
        cf.load_config(text="[vae]\nlatent_size = 15\n")
    assert any("latent_size" in e for e in exc.value.errors)


def test_constraint_violation_reported():
    with pytest.raises(cf.ConfigError):
        cf.load_config(text="[data]\nnum_speakers = 0\n")
    with pytest.raises(cf.ConfigError):
        cf.load_config(text="[nerf]\nnear = 5.0\nfar = 4.0\n")


def test_tuple_parsing():
    cfg = cf.load_config(text="[nerf]\ncenter = 0.1, -0.2, 3.0\n")
    assert cfg.nerf.center == (0.1, -0.2, 3.0)
    with pytest.raises(cf.ConfigError):
        cf.load_config(text="[nerf]\ncenter = 0.1, -0.2\n")


def test_hash_stable_and_sensitive():
    a = cf.load_config(text="")
    b = cf.load_config(text="[train]\nseed = 0\n")  # default value, same config
    c = cf.load_config(text="[train]\nseed = 1\n")
    assert a.hash() == b.hash()
    assert a.hash() != c.hash()
    assert len(a.hash()) == 12 and all(ch in "0123456789abcdef" for ch in a.hash())


def test_write_example_roundtrip(tmp_path):
    path = tmp_path / "example.ini"
    cf.write_example(path)
    cfg = cf.load_config(path)
    assert cfg == cf.PipelineConfig()
    assert cfg.hash() == cf.PipelineConfig().hash()
