import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ltri.errors import ConfigError
from ltri.span_divider import (
    LabeledBlock,
    Span,
    complete_partition,
    divide_block,
    divide_tile,
    generate_candidates,
    iou,
    load_presets,
    nms,
    span_f1,
    tune_thresholds,
)
from ltri.tri_attention import AttentionTile, ta_field
from oracles import anti_diagonal_argmax, naive_nms, partition_violations, random_stochastic_tile


def planted_tile(n, spans, inside=1.0, outside=0.05, heads=1):
    v = np.full((heads, n, n), outside, dtype=np.float32)
    for a, b in spans:
        v[:, a:b + 1, a:b + 1] = inside
    v *= np.tril(np.ones((n, n), dtype=np.float32))
    v /= v.sum(axis=2, keepdims=True)
    return AttentionTile(v)


# -- iou ---------------------------------------------------------------------


def test_iou_examples():
    assert iou(Span(0, 9), Span(0, 9)) == 1.0
    assert iou(Span(0, 9), Span(10, 19)) == 0.0
    assert iou(Span(0, 9), Span(5, 14)) == pytest.approx(25 / 175, abs=1e-12)


@given(st.integers(0, 50), st.integers(0, 20), st.integers(0, 50), st.integers(0, 20))
def test_iou_symmetric_bounded(a, la, b, lb):
    s, t = Span(a, a + la), Span(b, b + lb)
    assert iou(s, t) == iou(t, s)
    assert 0.0 <= iou(s, t) <= 1.0


# -- candidates ----------------------------------------------------------------


def test_candidate_bound_and_planted_triangle():
    tile = planted_tile(128, [(20, 50)])
    f = ta_field(tile, 0.0)
    cands = generate_candidates(f, (0, 127))
    assert len(cands) <= 255
    f = ta_field(tile, 0.03)
    cands = generate_candidates(f, (0, 127))
    on70 = [c for c in cands if c.anti_diagonal == 70]
    assert on70 and (on70[0].start, on70[0].end) == (20, 50)
    ref = anti_diagonal_argmax(f.thresholded, 0, 127)
    assert on70[0].score == ref[70][2]


def test_no_positive_scores_no_candidates():
    # row 0 always holds a 1.0, so stay clear of the first rows
    tile = planted_tile(16, [])
    f = ta_field(tile, 0.5)
    assert generate_candidates(f, (8, 15)) == []


def test_empty_range_raises():
    f = ta_field(planted_tile(8, []), 0.0)
    with pytest.raises(IndexError):
        generate_candidates(f, (5, 4))
    with pytest.raises(IndexError):
        generate_candidates(f, (0, 8))


@given(st.integers(0, 10**6), st.integers(1, 48), st.floats(0.0, 0.2), st.data())
def test_candidates_match_argmax_oracle(seed, n, theta, data):
    v = random_stochastic_tile(np.random.default_rng(seed), 2, n, 2.0)
    f = ta_field(AttentionTile(v), theta)
    lo = data.draw(st.integers(0, n - 1))
    hi = data.draw(st.integers(lo, n - 1))
    got = {c.anti_diagonal: (c.start, c.end, c.score) for c in generate_candidates(f, (lo, hi))}
    assert got == anti_diagonal_argmax(f.thresholded, lo, hi)


# -- nms -------------------------------------------------------------------------


def test_nms_example():
    cands = [Span(0, 9, 5.0), Span(0, 8, 4.0), Span(20, 29, 3.0)]
    kept = nms(cands, 0.1)
    assert [(s.start, s.end) for s in kept] == [(0, 9), (20, 29)]
    assert nms([Span(3, 4, 1.0)], 0.5) == [Span(3, 4, 1.0)]
    assert nms([], 0.5) == []


def test_nms_phi_limit_keeps_nested():
    cands = [Span(0, 99, 3.0), Span(10, 19, 2.0), Span(40, 44, 1.0)]
    assert len(nms(cands, 0.99)) == 3


def test_nms_phi_range():
    with pytest.raises(ConfigError):
        nms([Span(0, 1, 1.0)], 0.0)
    with pytest.raises(ConfigError):
        nms([Span(0, 1, 1.0)], 1.0)


cand_sets = st.lists(
    st.tuples(st.integers(0, 200), st.integers(0, 60), st.integers(0, 20)).map(
        lambda t: (t[0], t[0] + t[1], float(t[2]))),
    max_size=80,
)


@given(cand_sets, st.floats(0.01, 0.99))
def test_nms_matches_naive(cands, phi):
    got = {(s.start, s.end, s.score) for s in nms([Span(*c) for c in cands], phi)}
    assert got == naive_nms(list(set(cands)) if len(set(cands)) == len(cands) else cands, phi)


@given(cand_sets, st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_nms_survivors_monotone_in_phi(cands, phi, delta):
    spans = [Span(*c) for c in cands]
    phi2 = min(0.99, phi + delta)
    assert len(nms(spans, phi)) <= len(nms(spans, phi2))


@given(cand_sets, st.floats(0.01, 0.99))
def test_nms_survivors_pairwise_below_phi(cands, phi):
    kept = nms([Span(*c) for c in cands], phi)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert iou(a, b) <= phi


# -- partition -----------------------------------------------------------------------


def test_partition_gap_filling():
    p = complete_partition([Span(20, 50, 1.0)], (0, 127), 4)
    assert [(s.start, s.end) for s in p.spans] == [(0, 19), (20, 50), (51, 127)]
    assert p.detected == (False, True, False)


def test_partition_empty_kept():
    p = complete_partition([], (0, 127), 4)
    assert [(s.start, s.end) for s in p.spans] == [(0, 127)]


def test_partition_merges_down_to_cap():
    kept = [Span(10 * i, 10 * i + 7, float(i + 1)) for i in range(7)]
    p = complete_partition(kept, (0, 127), 4)
    assert p.span_count == 4
    assert partition_violations(p.spans, 0, 127, 4) == []


def test_partition_truncates_overlap_by_score():
    p = complete_partition([Span(0, 9, 1.0), Span(5, 14, 2.0)], (0, 14), 4)
    assert [(s.start, s.end) for s in p.spans] == [(0, 4), (5, 14)]


def test_merge_rule_left_neighbour():
    kept = [Span(0, 9, 5.0), Span(10, 19, 1.0), Span(20, 29, 4.0)]
    p = complete_partition(kept, (0, 29), 2)
    assert [(s.start, s.end) for s in p.spans] == [(0, 19), (20, 29)]
    assert p.spans[0].score == 6.0
    kept = [Span(0, 9, 1.0), Span(10, 19, 5.0), Span(20, 29, 4.0)]
    p = complete_partition(kept, (0, 29), 2)
    assert [(s.start, s.end) for s in p.spans] == [(0, 19), (20, 29)]


@given(
    st.lists(st.tuples(st.integers(0, 140), st.integers(0, 50), st.floats(-5, 5)), max_size=30),
    st.integers(0, 60), st.integers(0, 90), st.integers(1, 8),
)
def test_partition_invariant(raw, lo, width, max_spans):
    hi = lo + width
    kept = [Span(a, a + l, s) for a, l, s in raw]
    p = complete_partition(kept, (lo, hi), max_spans)
    assert partition_violations(p.spans, lo, hi, max_spans) == []
    assert p.is_valid(lo, hi, max_spans)


def test_divide_block_on_planted_spans():
    tile = planted_tile(128, [(0, 31), (32, 63), (64, 95), (96, 127)], outside=0.01)
    part, _ = divide_tile(tile, 0.9, 0.1, 4)
    assert [(s.start, s.end) for s in part.spans] == [(0, 31), (32, 63), (64, 95), (96, 127)]


def test_divide_block_subrange_stays_inside():
    tile = planted_tile(64, [(0, 15), (16, 40), (41, 63)])
    f = ta_field(tile, 0.01)
    p = divide_block(f, (10, 50), 0.1, 4)
    assert partition_violations(p.spans, 10, 50, 4) == []


# -- tuning and presets -----------------------------------------------------------------


def _labeled(seed):
    rng = np.random.default_rng(seed)
    cuts = np.sort(rng.choice(np.arange(8, 120), size=3, replace=False))
    bounds = [0, *cuts.tolist(), 128]
    ev = tuple((bounds[i], bounds[i + 1] - 1) for i in range(4))
    return LabeledBlock(planted_tile(128, ev, outside=0.02), ev, 0)


def test_tune_beats_held_out_pairs():
    blocks = [_labeled(s) for s in range(6)]
    q, phi = tune_thresholds(blocks, 0, 200, seed=3)
    best = span_f1(blocks, q, phi)
    rng = np.random.default_rng(99)
    for _ in range(20):
        assert best >= span_f1(blocks, float(rng.uniform(0.0001, 0.95)), float(rng.uniform(0.01, 0.95)))


def test_tune_single_trial_and_determinism():
    blocks = [_labeled(1)]
    rng = np.random.default_rng(4)
    expect = (float(rng.uniform(0.0001, 0.95)), float(rng.uniform(0.01, 0.95)))
    assert tune_thresholds(blocks, 0, 1, seed=4) == expect
    assert tune_thresholds(blocks, 0, 30, seed=5) == tune_thresholds(blocks, 0, 30, seed=5)


def test_tune_errors():
    with pytest.raises(ConfigError):
        tune_thresholds([], 0, 5, 0)
    with pytest.raises(ConfigError):
        tune_thresholds([_labeled(0)], 0, 0, 0)


def test_presets_shipped():
    p = load_presets()
    assert len(p) == 32
    assert p[0].theta_quantile == 0.9311282274784112
    assert p[0].iou_threshold == 0.032575607787946555
    with pytest.raises(ConfigError):
        load_presets("nope")
