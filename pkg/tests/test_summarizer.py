import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmmv import tensor as T
from lmmv.data import Column, ViewSpec
from lmmv.gradcheck import finite_difference_check
from lmmv.nn import name_parameters
from lmmv.summarizer import AttentionConfig, MaskError, Summarizer

D = 16
VIEWS = (ViewSpec("T", "tabular", schema=(Column("x", "continuous"),), feature_dim=10),
         ViewSpec("C", "image", image_shape=(1, 8, 8), feature_dim=D),
         ViewSpec("K", "image", image_shape=(1, 8, 8), feature_dim=D))


def make(layers=2, seed=0):
    s = Summarizer(VIEWS, AttentionConfig(D, 4, layers), np.random.default_rng(seed))
    name_parameters(s)
    return s


def feats(rng, mask):
    dims = [v.feature_dim for v in VIEWS]
    return [rng.normal(size=d) if mask[a + 1] else None for a, d in enumerate(dims)]


class TestAssemble:
    def test_full_availability(self, rng):
        s = make()
        tok = s.assemble_tokens(feats(rng, [1, 1, 1, 1]), np.array([1, 1, 1, 1]))
        assert tok.shape == (4, D)
        np.testing.assert_array_equal(tok.data[0], (s.sum_embedding.data + s.view_embeddings.data[0]))

    def test_empty_timepoint_uses_pad_everywhere(self):
        s = make()
        tok = s.assemble_tokens([None, None, None], np.array([1, 0, 0, 0]))
        for a in range(1, 4):
            np.testing.assert_array_equal(tok.data[a], s.pad_embedding.data + s.view_embeddings.data[a])

    def test_missing_view_two_slot(self, rng):
        s = make()
        mask = np.array([1, 1, 0, 1])
        tok = s.assemble_tokens(feats(rng, mask), mask)
        np.testing.assert_array_equal(tok.data[2], s.pad_embedding.data + s.view_embeddings.data[2])

    def test_tabular_is_projected_images_pass_through(self, rng):
        s = make()
        f = feats(rng, [1, 1, 1, 1])
        tok = s.assemble_tokens(f, np.array([1, 1, 1, 1]))
        proj = f[0] @ s.projections[0].weight.data + s.projections[0].bias.data
        np.testing.assert_allclose(tok.data[1], proj + s.view_embeddings.data[1], rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(tok.data[2], f[1] + s.view_embeddings.data[2], rtol=1e-5, atol=1e-6)

    def test_mask_feature_disagreement(self, rng):
        s = make()
        with pytest.raises(MaskError):
            s.assemble_tokens(feats(rng, [1, 1, 1, 1]), np.array([1, 1, 0, 1]))
        with pytest.raises(MaskError):
            s.assemble_tokens([None, None, None], np.array([1, 1, 0, 0]))
        with pytest.raises(MaskError):
            s.assemble_tokens([None, None, None], np.array([0, 0, 0, 0]))


class TestSummarize:
    def test_all_ones_mask_equals_unmasked(self, rng):
        s = make()
        m = np.array([1, 1, 1, 1])
        tok = s.assemble_tokens(feats(rng, m), m)
        assert np.array_equal(s.summarize(tok, m).data, s.summarize(tok, None).data)

    def test_zero_layers_returns_sum_token(self, rng):
        s = make(layers=0)
        m = np.array([1, 0, 1, 1])
        tok = s.assemble_tokens(feats(rng, m), m)
        np.testing.assert_array_equal(s.summarize(tok, m).data, tok.data[0])

    def test_swapping_views_changes_output(self, rng):
        s = make()
        m = np.array([1, 0, 1, 1])
        f = feats(rng, m)
        a = s.summarize(s.assemble_tokens(f, m), m).data
        b = s.summarize(s.assemble_tokens([None, f[2], f[1]], m), m).data
        assert np.abs(a - b).max() > 0

    def test_gradients(self, f64):
        s = make(seed=3).astype(np.float64)
        rng = np.random.default_rng(3)
        m = np.array([[1, 1, 0, 1], [1, 0, 1, 0]])
        f0 = T.Parameter(rng.normal(size=(1, 10)), "f0")
        f1 = T.Parameter(rng.normal(size=(1, D)), "f1")
        f2 = T.Parameter(rng.normal(size=(1, D)), "f2")
        w = rng.normal(size=(2, D))

        def loss():
            rows = [(f0, np.array([0])), (f1, np.array([1])), (f2, np.array([0]))]
            return T.sum(s.summarize(s.assemble_batch(rows, m), m) * T.Tensor(w))

        rep = finite_difference_check(loss, s.parameters() + [f0, f1, f2], sample_count=100)
        assert rep.max_rel <= 1e-4, rep.worst()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_masked_slot_invariance(seed):
    rng = np.random.default_rng(seed)
    s = make(seed=seed % 7)
    mask = np.r_[1, rng.integers(0, 2, size=3)]
    f = feats(rng, mask)
    tok = s.assemble_tokens(f, mask)
    base = s.summarize(tok, mask).data
    # overwrite masked token rows with arbitrary content
    junk = tok.data.copy()
    for a in np.flatnonzero(mask == 0):
        junk[a] = rng.normal(scale=100, size=D)
    out = s.summarize(T.Tensor(junk), mask).data
    assert np.abs(out - base).max() <= 1e-6
