import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import least_squares_probe
from polyvis.experts import ATTRIBUTES, ExpertSpec, SyntheticImage, encode, make_expert, preset, preset_specs, toy_dim

FULL_COUNTS = {"clip": 576, "dinov2": 256, "layoutlmv3": 196, "convnext": 1024, "sam": 4096, "mae": 256}


def test_full_geometry_patch_counts():
    specs = {s.name: s for s in preset_specs("paper")}
    assert list(specs) == ["clip", "dinov2", "layoutlmv3", "convnext", "sam", "mae"]
    assert {n: s.n_patches for n, s in specs.items()} == FULL_COUNTS
    assert (specs["clip"].grid_rows, specs["clip"].grid_cols, specs["clip"].hidden_dim) == (24, 24, 1024)
    assert (specs["sam"].grid_rows, specs["sam"].grid_cols, specs["sam"].hidden_dim) == (64, 64, 1280)
    assert (specs["layoutlmv3"].grid_rows, specs["layoutlmv3"].hidden_dim) == (14, 1024)


def test_toy_scale_divides_dims():
    for full, toy in zip(preset_specs("paper"), preset_specs("toy")):
        assert (toy.grid_rows, toy.grid_cols) == (full.grid_rows, full.grid_cols)
        assert toy.hidden_dim == toy_dim(full.hidden_dim)
        assert toy.hidden_dim % 4 == 0 and toy.hidden_dim * 64 >= full.hidden_dim
    assert toy_dim(1024) == 16 and toy_dim(1280) == 20 and toy_dim(768) == 12


def test_unknown_scale_and_name():
    with pytest.raises(ValueError):
        preset_specs("huge")
    with pytest.raises(KeyError):
        preset("vit")


def test_encode_shapes():
    img = SyntheticImage(color=1, count=2, seed=5)
    assert encode(make_expert(preset("clip")), img).features.shape == (576, 16)
    assert encode(make_expert(preset("mae", "paper")), img).features.shape == (256, 1280)


def test_expert_is_deterministic_and_frozen():
    a, b = make_expert(preset("dinov2")), make_expert(preset("dinov2"))
    for p, q in zip(a.params, b.params):
        assert p.data.tobytes() == q.data.tobytes()
        assert p.frozen and p.group == "expert"
    img = SyntheticImage(count=3, seed=9)
    assert a.encode(img).features.tobytes() == a.encode(img).features.tobytes()


def test_zero_geometry_rejected():
    with pytest.raises(ValueError):
        make_expert(ExpertSpec("x", 0, 4, 8))
    with pytest.raises(ValueError):
        ExpertSpec("x", 2, 2, 2, channel_profile={"shape"})


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_pixels_keyed_on_attributes_and_seed(c, n, m, lay, seed):
    a = SyntheticImage(c, n, m, lay, seed)
    assert np.array_equal(a.pixels(), SyntheticImage(c, n, m, lay, seed).pixels())
    assert not np.array_equal(a.pixels(), SyntheticImage(c, n, m, lay, seed + 1).pixels())


def _probe_data(expert, n, rng):
    attrs = rng.integers(0, 4, (n, 4))
    imgs = [SyntheticImage(*map(int, a), seed=int(s)) for a, s in zip(attrs, rng.integers(0, 2**31, n))]
    feats = np.stack([expert.encode(i, np.float64).features.mean(axis=0) for i in imgs])
    return feats, attrs


@pytest.mark.parametrize("seed", range(5))
def test_channel_profile_separation(seed):
    rng = np.random.default_rng(seed)
    for spec in preset_specs("toy"):
        expert = make_expert(preset(spec.name, seed=seed))
        xtr, atr = _probe_data(expert, 1000, rng)
        xte, ate = _probe_data(expert, 1000, rng)
        for j, attr in enumerate(ATTRIBUTES):
            acc = least_squares_probe(xtr, atr[:, j], xte, ate[:, j], 4)
            if attr in spec.channel_profile:
                assert acc >= 0.99, (spec.name, attr, acc)
            else:
                assert abs(acc - 0.25) <= 0.05, (spec.name, attr, acc)
