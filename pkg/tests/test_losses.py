
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from facediv.losses import (FeatureMask, fad_loss, fad_mask, lmf, lmf_keep_count, occluded_id_loss,
                            response_cosine_loss, sad_filter_loss, sad_response_loss, total_loss)
from facediv.tensor import Graph, check_gradients, gaussian_kernel1d, global_avg_pool, softmax_xent

from oracles import (fad_mask_loops, filter_loss_loops, lmf_loops, random_bank,
                     response_loss_loops)

SEEDS = range(20)


class TestLMF:
    def test_keep_count_values(self):
        assert lmf_keep_count(95.83, 576) == 24
        assert lmf_keep_count(0.0, 64) == 64
        assert lmf_keep_count(75.0, 576) == 144
        assert lmf_keep_count(87.5, 576) == 72
        assert lmf_keep_count(95.83, 64) == 3
        assert lmf_keep_count(99.9, 10) == 1

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            lmf_keep_count(100.0, 10)
        with pytest.raises(ValueError):
            lmf_keep_count(-1.0, 10)

    def test_ties_keep_earlier_row_major(self):
        g = Graph()
        m = np.array([[[1.0, -1.0], [1.0, 0.5]]])
        out = lmf(g.constant(m), 50.0).values
        np.testing.assert_array_equal(out, [[[1.0, -1.0], [0.0, 0.0]]])

    def test_matches_loops(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 6, 6))
        g = Graph()
        out = lmf(g.constant(x), 87.5).values
        for c in range(3):
            np.testing.assert_array_equal(out[c], lmf_loops(x[c], 87.5))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 5, 5), elements=st.floats(-10, 10)), st.sampled_from([0.0, 50.0, 80.0, 95.83]))
    def test_idempotent_and_bounded(self, x, d):
        g = Graph()
        once = lmf(g.constant(x), d).values
        twice = lmf(g.constant(once), d).values
        np.testing.assert_array_equal(once, twice)
        keep = lmf_keep_count(d, 25)
        assert np.all((once != 0).sum(axis=(1, 2)) <= keep)
        assert np.all(np.abs(once) <= np.abs(x))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_is_mask(self, seed):
        rng = np.random.default_rng(seed)
        g = Graph()
        x = g.param("x", rng.standard_normal((2, 4, 4)))
        y = lmf(x, 75.0)
        w = rng.standard_normal((2, 4, 4))
        loss = response_cosine_loss(y) if seed % 2 else _dot(y, w)
        assert check_gradients(g, loss) < 1e-4


def _dot(t, w):
    def fwd(v):
        return np.asarray((v * w).sum())

    def bwd(grad, needs):
        return (w * float(grad),)

    return t.graph.record((t,), fwd, bwd, "dot")


class TestFilterLoss:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_loops(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 9))
        bank = rng.standard_normal((k, int(rng.integers(1, 6)), 3, 3))
        g = Graph()
        np.testing.assert_allclose(sad_filter_loss(g.constant(bank)).values, filter_loss_loops(bank),
                                   rtol=1e-9, atol=1e-9)

    def test_orthogonal_columns_give_zero(self):
        bank = np.zeros((3, 3, 1, 2))
        for i in range(3):
            bank[i, i] = 1.0
        g = Graph()
        assert float(sad_filter_loss(g.constant(bank)).values) == 0.0

    def test_identical_filters(self):
        # K identical filters with P positions: each ordered pair contributes P
        bank = np.ones((4, 2, 3, 3))
        g = Graph()
        np.testing.assert_allclose(sad_filter_loss(g.constant(bank)).values, 4 * 3 * 9)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        bank = rng.standard_normal((4, 3, 3, 3))
        g = Graph()
        a = sad_filter_loss(g.constant(bank)).values
        b = sad_filter_loss(g.constant(bank * rng.uniform(0.1, 10, size=(4, 1, 1, 1)))).values
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_zero_column_rejected(self):
        bank = np.ones((2, 2, 3, 3))
        bank[1, :, 0, 2] = 0.0
        g = Graph()
        with pytest.raises(ValueError, match="filter 1"):
            sad_filter_loss(g.constant(bank))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        g = Graph()
        f = g.param("f", random_bank(rng, int(rng.integers(2, 6)), 3))
        assert check_gradients(g, sad_filter_loss(f)) < 1e-4


class TestResponseLoss:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_loops(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 9))
        resp = rng.standard_normal((k, 6, 6))
        d = float(rng.choice([0.0, 50.0, 75.0, 95.83]))
        g = Graph()
        np.testing.assert_allclose(sad_response_loss(g.constant(resp), d, 1.5).values,
                                   response_loss_loops(resp, d, 1.5), rtol=1e-9, atol=1e-9)

    def test_batch_is_mean_of_samples(self):
        rng = np.random.default_rng(2)
        resp = rng.standard_normal((3, 4, 6, 6))
        g = Graph()
        batch = sad_response_loss(g.constant(resp), 75.0, 1.5).values
        each = [response_loss_loops(r, 75.0, 1.5) for r in resp]
        np.testing.assert_allclose(batch, np.mean(each), rtol=1e-9)

    def test_disjoint_maps_give_zero(self):
        m = np.zeros((2, 4, 4))
        m[0, 0, 0] = 1.0
        m[1, 3, 3] = -2.0
        g = Graph()
        assert float(response_cosine_loss(g.constant(m)).values) == 0.0

    def test_zero_channel_contributes_nothing(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((3, 4, 4))
        m[1] = 0.0
        g = Graph()
        val = response_cosine_loss(g.constant(m)).values
        a, b = m[0].ravel(), m[2].ravel()
        np.testing.assert_allclose(val, 2 * (a @ b / np.linalg.norm(a) / np.linalg.norm(b)) ** 2)

    def test_kernel_sigma(self):
        assert len(gaussian_kernel1d(1.5)) == 11

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        g = Graph()
        x = g.param("x", rng.standard_normal((2, 3, 6, 6)))
        assert check_gradients(g, sad_response_loss(x, 87.5, 1.5)) < 1e-4


class TestFAD:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_mask_matches_loops(self, seed):
        rng = np.random.default_rng(seed)
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 9))
        f, fh = rng.standard_normal((n, k)), rng.standard_normal((n, k))
        t = int(rng.integers(1, k + 1))
        np.testing.assert_array_equal(fad_mask(f, fh, "count", t).bits, fad_mask_loops(f, fh, "count", t))
        thr = float(rng.uniform(0.2, 1.5))
        np.testing.assert_array_equal(fad_mask(f, fh, "value", thr).bits, fad_mask_loops(f, fh, "value", thr))

    def test_mask_examples(self):
        f = np.array([[1.0, 2.0, 3.0, 4.0]])
        fh = np.array([[1.0, 2.5, 1.0, 4.1]])
        np.testing.assert_array_equal(fad_mask(f, fh, "count", 2).bits, [True, False, False, True])
        np.testing.assert_array_equal(fad_mask(f, fh, "value", 0.5).bits, [True, False, False, True])
        assert fad_mask(f, fh, "count", 4).bits.all()

    def test_count_ties_prefer_lower_index(self):
        f = np.zeros((1, 4))
        np.testing.assert_array_equal(fad_mask(f, f, "count", 2).bits, [True, True, False, False])

    def test_bad_threshold(self):
        f = np.zeros((2, 3))
        with pytest.raises(ValueError):
            fad_mask(f, f, "count", 4)
        with pytest.raises(ValueError):
            fad_mask(f, f, "median", 1)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_loss_matches_loops(self, seed):
        rng = np.random.default_rng(seed)
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 9))
        f, fh = rng.standard_normal((n, k)), rng.standard_normal((n, k))
        mask = fad_mask(f, fh, "count", int(rng.integers(1, k + 1)))
        ref = sum(abs(float(mask.bits[i]) * (f[r, i] - fh[r, i])) for r in range(n) for i in range(k)) / n
        g = Graph()
        np.testing.assert_allclose(fad_loss(g.constant(f), g.constant(fh), mask).values, ref,
                                   rtol=1e-9, atol=1e-12)

    def test_identical_pairs_zero(self):
        f = np.arange(6.0).reshape(2, 3)
        g = Graph()
        assert float(fad_loss(g.constant(f), g.constant(f.copy()), FeatureMask.full(3)).values) == 0.0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        g = Graph()
        f = g.param("f", rng.standard_normal((3, 5)))
        fh = g.param("fh", rng.standard_normal((3, 5)))
        mask = fad_mask(f, fh, "count", 3)
        assert check_gradients(g, fad_loss(f, fh, mask)) < 1e-4

    def test_masked_elements_get_no_gradient(self):
        rng = np.random.default_rng(5)
        g = Graph()
        f = g.param("f", rng.standard_normal((2, 4)))
        fh = g.param("fh", rng.standard_normal((2, 4)))
        mask = FeatureMask(np.array([True, False, True, False]), "count", 2)
        w = g.param("w", rng.standard_normal((3, 4)))
        loss = total_loss({"fad": fad_loss(f, fh, mask), "occ": occluded_id_loss(fh, mask, w, None, [0, 2])},
                          {"fad": 1.0, "occ": 1.0})
        g.backward(loss)
        np.testing.assert_array_equal(f.grad[:, ~mask.bits], 0.0)
        np.testing.assert_array_equal(fh.grad[:, ~mask.bits], 0.0)
        assert np.all(f.grad[:, mask.bits] != 0)


class TestOccludedIdentity:
    def test_equals_softmax_on_masked(self):
        rng = np.random.default_rng(0)
        fh = rng.standard_normal((2, 4))
        w, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
        mask = FeatureMask(np.array([True, True, False, True]), "count", 3)
        g = Graph()
        got = occluded_id_loss(g.constant(fh), mask, g.constant(w), g.constant(b), [1, 2]).values
        z = (fh * mask.weights) @ w.T + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(got, -np.log(p[[0, 1], [1, 2]]).mean(), rtol=1e-12)

    def test_full_mask_equals_plain_identity_loss(self):
        rng = np.random.default_rng(1)
        fh, w = rng.standard_normal(4), rng.standard_normal((3, 4))
        g = Graph()
        a = occluded_id_loss(g.constant(fh), FeatureMask.full(4), g.constant(w), None, 1).values
        b = softmax_xent(g.constant(w @ fh), 1).values
        np.testing.assert_allclose(a, b, rtol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients_reach_shared_classifier(self, seed):
        rng = np.random.default_rng(seed)
        g = Graph()
        fh = g.param("fh", rng.standard_normal((3, 6)))
        w = g.param("w", rng.standard_normal((4, 6)))
        b = g.param("b", rng.standard_normal(4))
        mask = FeatureMask(rng.random(6) < 0.6, "value", 0.5)
        loss = occluded_id_loss(fh, mask, w, b, rng.integers(0, 4, size=3))
        assert check_gradients(g, loss) < 1e-4


class TestTotalLoss:
    def _terms(self, g):
        rng = np.random.default_rng(0)
        return {"id": softmax_xent(g.param("z", rng.standard_normal(3)), 1),
                "sad_f": sad_filter_loss(g.param("f", rng.standard_normal((3, 2, 3, 3))))}

    def test_only_identity(self):
        g = Graph()
        t = self._terms(g)
        np.testing.assert_allclose(total_loss(t, {"id": 1.0, "sad_f": 0.0}).values, t["id"].values)

    def test_linear_in_weights(self):
        g = Graph()
        t = self._terms(g)
        a = total_loss(t, {"id": 0.7, "sad_f": 0.2}).values
        b = total_loss(t, {"id": 1.4, "sad_f": 0.4}).values
        np.testing.assert_allclose(b, 2 * a, rtol=1e-14)

    def test_negative_weight_rejected(self):
        g = Graph()
        with pytest.raises(ValueError):
            total_loss(self._terms(g), {"id": -1.0})

    def test_unknown_term_rejected(self):
        g = Graph()
        with pytest.raises(ValueError):
            total_loss({"bogus": softmax_xent(g.constant(np.zeros(2)), 0)}, {})


def test_lmf_pooling_stays_close():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 24, 24))
    g = Graph()
    kept = lmf(g.constant(x), 95.83).values
    dropped = np.abs(x - kept).sum(axis=(1, 2))
    gap = np.abs(global_avg_pool(g.constant(x)).values - global_avg_pool(g.constant(kept)).values)
    assert np.all(gap <= dropped / 576)
