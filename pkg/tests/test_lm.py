import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyvis import numerics as nx
from polyvis.fusion import FusedVisionTokens, Segment
from polyvis.lm import (
    ANSWER,
    EOS,
    PROMPT,
    DecoderConfig,
    DecoderParams,
    ImageSegment,
    TextSegment,
    append_tokens,
    assemble_sequence,
    decoder_forward,
    expert_source,
    generate_greedy,
)
from polyvis.positional import PETables

D = 8


def setup(scheme="share_by_row", grids=((2, 2), (1, 3)), max_len=32, seed=0):
    cfg = DecoderConfig(d_model=D, n_layers=2, n_heads=2, vocab_size=20, max_len=max_len)
    params = DecoderParams(cfg, seed=seed, dtype=np.float64)
    tables = PETables(scheme, D, list(grids), max_text=max_len, seed=seed, dtype=np.float64)
    return cfg, params, tables


def image(grids=((2, 2), (1, 3)), names=("a", "b"), seed=0, data=None):
    n = sum(r * c for r, c in grids)
    if data is None:
        data = np.random.default_rng(seed).standard_normal((n, D))
    segs, start = [], 0
    for name, (r, c) in zip(names, grids):
        segs.append(Segment(name, start, r * c, (r, c)))
        start += r * c
    return ImageSegment(FusedVisionTokens(nx.Tensor(data), segs))


def test_sources_follow_segment_order():
    _, params, tables = setup()
    inp = assemble_sequence([TextSegment([2, 3]), image(), TextSegment([5])], tables, params["tok_emb"])
    assert inp.sources == [PROMPT] * 2 + [expert_source("a")] * 4 + [expert_source("b")] * 3 + [PROMPT]
    assert inp.spans == [(PROMPT, 0, 2), ("expert:a", 2, 6), ("expert:b", 6, 9), (PROMPT, 9, 10)]
    assert inp.text_len == 3


def test_text_only_and_two_images():
    _, params, tables = setup()
    inp = assemble_sequence([TextSegment([2, 3, 4])], tables, params["tok_emb"])
    assert inp.length == 3 and set(inp.sources) == {PROMPT}
    two = assemble_sequence([image(seed=1), TextSegment([2]), image(seed=2)], tables, params["tok_emb"])
    assert two.length == 15 and len(two.spans) == 5


def test_empty_sequence_and_bad_ids():
    _, params, tables = setup()
    with pytest.raises(ValueError):
        assemble_sequence([], tables, params["tok_emb"])
    with pytest.raises(ValueError):
        assemble_sequence([TextSegment([99])], tables, params["tok_emb"])
    with pytest.raises(ValueError):
        TextSegment([1], role="image")


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(2, 19), min_size=1, max_size=6), st.integers(2, 19))
def test_causality_prefix_unchanged(ids, extra):
    _, params, tables = setup()
    base = assemble_sequence([image(), TextSegment(ids)], tables, params["tok_emb"])
    longer = append_tokens(base, [extra], tables, params["tok_emb"])
    a, maps = decoder_forward(base, params)
    b, _ = decoder_forward(longer, params)
    np.testing.assert_array_equal(a.data, b.data[: base.length])
    for w in maps:
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)
        assert np.all(np.triu(w.data, 1) == 0)


def test_last_only_matches_full():
    _, params, tables = setup()
    inp = assemble_sequence([image(), TextSegment([2, 3])], tables, params["tok_emb"])
    full, _ = decoder_forward(inp, params)
    last, _ = decoder_forward(inp, params, last_only=True)
    np.testing.assert_allclose(last.data[-1], full.data[-1], atol=1e-12)


def test_overflow_names_max_len():
    _, params, tables = setup(max_len=8, grids=((1, 4),))
    inp = assemble_sequence([image(((1, 4),), ("a",)), TextSegment([2, 3, 4, 5, 6])], tables, params["tok_emb"])
    with pytest.raises(OverflowError, match="max_len=8"):
        decoder_forward(inp, params)


def test_greedy_stops_on_eos_bias():
    _, params, tables = setup()
    params["head.b"].data[0, EOS] = 1e3
    inp = assemble_sequence([image(), TextSegment([2])], tables, params["tok_emb"])
    assert generate_greedy(inp, params, tables, max_new=5) == [EOS]


def test_greedy_deterministic_and_tie_low_id():
    _, params, tables = setup()
    inp = assemble_sequence([image(), TextSegment([2])], tables, params["tok_emb"])
    assert generate_greedy(inp, params, tables, 4) == generate_greedy(inp, params, tables, 4)
    params["head.w"].data[:] = 0
    params["head.b"].data[:] = 0
    params["head.b"].data[0, [5, 7]] = 1.0
    assert generate_greedy(inp, params, tables, 3) == [5, 5, 5]


def test_answer_role():
    _, params, tables = setup()
    inp = assemble_sequence([TextSegment([2])], tables, params["tok_emb"])
    out = append_tokens(inp, [4, 5], tables, params["tok_emb"])
    assert out.sources[-2:] == [ANSWER, ANSWER] and out.text_len == 3


def test_share_all_identical_features_embed_identically():
    row = np.random.default_rng(3).standard_normal(D)
    data = np.tile(row, (7, 1))
    emb = {}
    for scheme in ("share_all", "original"):
        _, params, tables = setup(scheme, grids=((1, 7),))
        emb[scheme] = assemble_sequence([image(((1, 7),), ("a",), data=data)], tables, params["tok_emb"]).embedded.data
    assert np.all(emb["share_all"] == emb["share_all"][0])
    assert not np.all(emb["original"] == emb["original"][0])


def test_exclusion_mask_hides_positions():
    _, params, tables = setup()
    inp = assemble_sequence([TextSegment([2]), image(), TextSegment([3])], tables, params["tok_emb"])
    hidden = inp.with_exclusion(inp.source_positions("expert:a"))
    _, maps = decoder_forward(hidden, params)
    w = maps[0].data
    assert np.all(w[:, -1, 1:5] == 0)
    # an excluded row still sees itself and the unmasked prompt
    assert np.all(w[:, 2, 1] == 0) and np.all(w[:, 2, 2] > 0)
    np.testing.assert_allclose(w[:, 2, 0] + w[:, 2, 2], 1.0)
