import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gerea.data_io import Sample
from gerea.region_selector import (ITEOutput, RegionSelector, RegionSet, RelevanceMap, SyntheticITE, check_attention_rows,
                                   compute_relevance, draw_region, relevance_from_attention, sample_regions)


def _shapes(draw_h=3, draw_l=3, draw_m=8):
    return st.tuples(st.integers(1, draw_h), st.integers(1, draw_l), st.integers(1, draw_m))


@st.composite
def attention_and_grad(draw):
    H, L, M = draw(_shapes())
    W = draw(arrays(np.float64, (H, L, M), elements=st.floats(0, 1)))
    G = draw(arrays(np.float64, (H, L, M), elements=st.floats(-5, 5)))
    return W, G


@given(attention_and_grad(), st.floats(0.01, 100))
def test_relevance_scales_linearly_in_gradient(wg, c):
    W, G = wg
    np.testing.assert_allclose(relevance_from_attention(W, c * G), c * relevance_from_attention(W, G), rtol=1e-9, atol=1e-12)


@given(attention_and_grad())
def test_positive_clamp_is_nonnegative_and_literal_min_nonpositive(wg):
    W, G = wg
    assert np.all(relevance_from_attention(W, G, "positive") >= 0)
    assert np.all(relevance_from_attention(W, G, "literal_min") <= 0)


@given(attention_and_grad())
def test_clamp_modes_decompose_full_product(wg):
    W, G = wg
    full = (G * W).sum(axis=(0, 1)) / W.shape[0]
    np.testing.assert_allclose(relevance_from_attention(W, G, "positive") + relevance_from_attention(W, G, "literal_min"), full, atol=1e-9)


@given(attention_and_grad(), st.data())
def test_relevance_monotone_in_positive_gradient(wg, data):
    W, G = wg
    idx = tuple(data.draw(st.integers(0, s - 1)) for s in W.shape)
    G2 = G.copy()
    G2[idx] = abs(G2[idx]) + 1.0
    j = idx[2]
    assert relevance_from_attention(W, G2)[j] >= relevance_from_attention(W, G)[j] - 1e-12


def test_relevance_shape_and_mode_errors():
    with pytest.raises(ValueError):
        relevance_from_attention(np.ones((1, 2, 3)), np.ones((1, 2, 4)))
    with pytest.raises(ValueError):
        relevance_from_attention(np.ones((1, 2, 3)), np.ones((1, 2, 3)), "abs")


def test_check_attention_rows():
    check_attention_rows(np.full((2, 3, 4), 0.25))
    with pytest.raises(ValueError, match="deviate"):
        check_attention_rows(np.full((1, 1, 4), 0.3))
    with pytest.raises(ValueError, match="negative"):
        check_attention_rows(np.array([[[1.5, -0.5]]]))


@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(0, 10)), st.data())
def test_draw_region_distinct_and_supported(w, data):
    K = data.draw(st.integers(1, w.shape[0]))
    seed = data.draw(st.integers(0, 2**32 - 1))
    picks = draw_region(w, K, np.random.default_rng(seed))
    assert len(picks) == K == len(set(picks))
    support = int(np.count_nonzero(w))
    # zero-weight patches only appear once the positive mass is used up
    assert all(w[p] > 0 for p in picks[: min(K, support)])


def test_sample_regions_deterministic_and_validated():
    rel = RelevanceMap(r=np.arange(16.0), layer=6)
    a = sample_regions(rel, K=4, m=5, seed=9)
    assert a == sample_regions(rel, K=4, m=5, seed=9)
    assert a != sample_regions(rel, K=4, m=5, seed=10)
    assert RegionSet.from_dict(a.to_dict()) == a
    with pytest.raises(ValueError):
        sample_regions(rel, K=17, m=1, seed=0)
    with pytest.raises(ValueError):
        sample_regions(rel, K=0, m=1, seed=0)


def test_zero_relevance_falls_back_to_uniform():
    rel = RelevanceMap(r=np.zeros(8), layer=6)
    counts = np.zeros(8)
    for s in range(4000):
        counts[sample_regions(rel, K=1, m=1, seed=s).regions[0][0]] += 1
    assert counts.min() > 400


def test_literal_min_sampling_uses_negated_scores():
    rel = RelevanceMap(r=np.array([0.0, -1.0, 0.0, 0.0]), layer=6, clamp_mode="literal_min")
    assert all(sample_regions(rel, K=1, m=1, seed=s).regions == [(1,)] for s in range(50))


def test_region_set_rejects_bad_regions():
    with pytest.raises(ValueError):
        RegionSet(regions=[(1, 1)], seed=0, K=2, m=1)
    with pytest.raises(ValueError):
        RegionSet(regions=[(1, 2)], seed=0, K=2, m=2)
    with pytest.raises(ValueError):
        RegionSet(regions=[(1, 9)], seed=0, K=2, m=1, n_patches=4)


def test_synthetic_gradient_matches_finite_differences():
    ite = SyntheticITE(n_patches=6, n_heads=2, seed=1)
    attn, g, a, _, _ = ite._state("synthetic:x", "what color is it", 3)
    grad = ite.grad_from_attention(attn, g, a)
    eps = 1e-6
    for idx in [(0, 0, 0), (1, 2, 5), (0, 3, 2)]:
        up, down = attn.copy(), attn.copy()
        up[idx] += eps
        down[idx] -= eps
        fd = (ite.sim_from_attention(up, g, a) - ite.sim_from_attention(down, g, a)) / (2 * eps)
        assert grad[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_synthetic_ite_is_pure():
    a = SyntheticITE(seed=2).cross_attention("synthetic:1", "a red bus", 6)
    b = SyntheticITE(seed=2).cross_attention("synthetic:1", "a red bus", 6)
    c = SyntheticITE(seed=2).cross_attention("synthetic:2", "a red bus", 6)
    np.testing.assert_array_equal(a.attention, b.attention)
    assert not np.array_equal(a.attention, c.attention)
    assert a.n_heads == 2 and a.n_tokens == 3 and a.n_patches == 64


def test_compute_relevance_checks_inputs():
    ite = SyntheticITE(n_patches=16)
    rel = compute_relevance(ite, "synthetic:1", "what sport", layer=2)
    assert rel.n_patches == 16 and rel.stats()["min"] >= 0
    with pytest.raises(ValueError):
        compute_relevance(ite, "synthetic:1", "  ")

    class Broken:
        def cross_attention(self, *a):
            return ITEOutput(attention=np.full((1, 1, 4), 0.5), gradient=np.zeros((1, 1, 4)), sim=0.0)

    with pytest.raises(ValueError, match="deviate"):
        compute_relevance(Broken(), "x", "q")


def test_region_selector_independent_of_batch_order():
    samples = [Sample(str(i), f"synthetic:{i}", f"question number {i}") for i in range(5)]
    sel = RegionSelector(SyntheticITE(n_patches=16), K=3, m=4, seed=1).fit()
    forward = sel.transform(samples)
    backward = sel.transform(samples[::-1])[::-1]
    assert forward == backward
    assert all(len(r.regions) == 4 for r in forward)
    with pytest.raises(ValueError):
        RegionSelector(SyntheticITE(n_patches=16), K=17).fit()
