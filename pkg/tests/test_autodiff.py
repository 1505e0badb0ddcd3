import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdqa import autodiff as ad
from qdqa.autodiff import Tensor


RNG = np.random.default_rng(0)


def rand_tensor(*shape, scale=1.0):
    return Tensor(RNG.normal(size=shape) * scale, requires_grad=True)


class TestGradCheckHarness:
    def test_linear_function_exact(self):
        x = rand_tensor(5)
        err = ad.grad_check(lambda ts: ts[0].sum(), [x])
        # both sides are 1 up to float cancellation in (f+ - f-)
        assert err < 1e-9

    def test_quadratic(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        err = ad.grad_check(lambda ts: (ts[0] * ts[0]).sum(), [x])
        assert err < 1e-9

    def test_non_finite_raises(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ad.NonFiniteError):
            ad.grad_check(lambda ts: ad.log(ts[0] - 2.0).sum(), [x])


@pytest.mark.parametrize("seed", [1, 2, 3])
class TestPrimitiveGradients:
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        err = ad.grad_check(lambda ts: (ts[0] @ ts[1]).sum(), [a, b])
        assert err < 1e-6

    def test_batched_matmul(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        err = ad.grad_check(
            lambda ts: ((ts[0] @ ts[1]) * (ts[0] @ ts[1])).sum(), [a, b]
        )
        assert err < 1e-6

    def test_softmax(self, seed):
        x = Tensor(np.random.default_rng(seed).normal(size=(3, 4)),
                   requires_grad=True)
        w = np.random.default_rng(seed + 100).normal(size=(3, 4))
        err = ad.grad_check(
            lambda ts: (ad.softmax(ts[0], axis=-1) * w).sum(), [x]
        )
        assert err < 1e-6

    def test_layer_norm(self, seed):
        x = Tensor(np.random.default_rng(seed).normal(size=(2, 6)),
                   requires_grad=True)
        w = np.random.default_rng(seed + 100).normal(size=(2, 6))
        err = ad.grad_check(lambda ts: (ad.layer_norm(ts[0]) * w).sum(), [x])
        assert err < 1e-5

    def test_activations(self, seed):
        x = Tensor(np.random.default_rng(seed).normal(size=7) + 0.05,
                   requires_grad=True)
        for fn in (ad.relu, ad.leaky_relu, ad.sigmoid):
            err = ad.grad_check(lambda ts: (fn(ts[0]) * 1.7).sum(), [x])
            assert err < 1e-6

    def test_concat_getitem_stack(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)

        def f(ts):
            c = ad.concat([ts[0], ts[1]], axis=-1)
            s = ad.stack([c[0], c[1]], axis=0)
            return (s * s).sum()

        assert ad.grad_check(f, [a, b]) < 1e-6

    def test_euclidean_distance(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=5), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        err = ad.grad_check(lambda ts: ad.euclidean_distance(ts[0], ts[1]),
                            [a, b])
        assert err < 1e-6

    def test_embedding_lookup(self, seed):
        rng = np.random.default_rng(seed)
        table = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        idx = np.array([0, 2, 2, 5])
        w = rng.normal(size=(4, 4))
        err = ad.grad_check(
            lambda ts: (ad.embedding_lookup(ts[0], idx) * w).sum(), [table]
        )
        assert err < 1e-6


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros(4)), 1)
        assert loss.item() == pytest.approx(np.log(4), abs=1e-12)

    def test_saturated(self):
        logits = np.zeros(5)
        logits[3] = 30.0
        assert ad.softmax_cross_entropy(Tensor(logits), 3).item() < 1e-9

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            ad.softmax_cross_entropy(Tensor(np.zeros(3)), 3)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=7), requires_grad=True)
        loss = ad.softmax_cross_entropy(x, 2)
        loss.backward()
        sm = np.exp(x.data) / np.exp(x.data).sum()
        expect = sm.copy()
        expect[2] -= 1.0
        np.testing.assert_allclose(x.grad, expect, atol=1e-12)
        assert ad.grad_check(lambda ts: ad.softmax_cross_entropy(ts[0], 2),
                             [x]) < 1e-6

    def test_batch_ce_matches_loop(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(4, 6))
        targets = [0, 3, 5, 2]
        batch = ad.softmax_cross_entropy_batch(Tensor(logits), targets).item()
        loop = np.mean(
            [ad.softmax_cross_entropy(Tensor(l), t).item()
             for l, t in zip(logits, targets)]
        )
        assert batch == pytest.approx(loop, abs=1e-12)


class TestGumbelSoftmax:
    def test_zero_noise_symmetry(self):
        out = ad.gumbel_softmax(Tensor(np.zeros((1, 2))), temperature=1.0,
                                noise=np.zeros((1, 2)))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_hard_rows_one_hot(self):
        rng = np.random.default_rng(1)
        out = ad.gumbel_softmax(Tensor(rng.normal(size=(20, 2))), hard=True,
                                rng=rng)
        assert set(np.unique(out.data)) <= {0.0, 1.0}
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0)

    def test_soft_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        out = ad.gumbel_softmax(Tensor(rng.normal(size=(50, 3))), rng=rng)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
        assert (out.data > 0).all()

    def test_monte_carlo_selection_rate(self):
        # At temperature 1, the hard argmax selects class i with probability
        # softmax(logits)_i; check empirically against the closed form.
        rng = np.random.default_rng(3)
        n = 100_000
        logits = Tensor(np.tile([1.0, 0.0], (n, 1)))
        out = ad.gumbel_softmax(logits, temperature=1.0, hard=True, rng=rng)
        rate = out.data[:, 0].mean()
        expect = 1.0 / (1.0 + np.exp(-1.0))
        assert rate == pytest.approx(expect, abs=0.01)

    def test_straight_through_gradient_flows(self):
        x = Tensor(np.array([[0.3, -0.2], [0.1, 0.4]]), requires_grad=True)
        frozen = np.zeros((2, 2))
        out = ad.gumbel_softmax(x, hard=True, noise=frozen)
        (out * np.array([[1.0, 0.0], [0.0, 1.0]])).sum().backward()
        assert x.grad is not None and np.abs(x.grad).sum() > 0

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            ad.gumbel_softmax(Tensor(np.zeros((1, 2))), temperature=0.0)


class TestTransformerLayer:
    def make_store(self, h=8, heads=2, seed=0):
        store = ad.ParamStore(seed)
        ad.init_transformer_params(store, "tf", h, heads)
        return store

    def test_output_shape(self):
        store = self.make_store()
        q = rand_tensor(3, 8)
        kv = rand_tensor(5, 8)
        out = ad.transformer_encoder_layer(q, kv, kv, store, "tf", heads=2)
        assert out.shape == (3, 8)

    def test_batched_output_shape(self):
        store = self.make_store()
        q = rand_tensor(4, 2, 3, 8)
        kv = rand_tensor(4, 2, 5, 8)
        out = ad.transformer_encoder_layer(q, kv, kv, store, "tf", heads=2)
        assert out.shape == (4, 2, 3, 8)

    def test_single_token_attention_weight_is_one(self):
        # With one key, softmax over a singleton is exactly 1 regardless of
        # projections; output must equal the residual path through that key.
        store = self.make_store()
        q = rand_tensor(1, 8)
        out_a = ad.transformer_encoder_layer(q, q, q, store, "tf", heads=2)
        doubled = Tensor(np.concatenate([q.data, q.data]))
        out_b = ad.transformer_encoder_layer(q, doubled, doubled, store,
                                             "tf", heads=2)
        np.testing.assert_allclose(out_a.data, out_b.data, atol=1e-12)

    def test_key_value_permutation_invariance(self):
        store = self.make_store()
        q = rand_tensor(3, 8)
        kv = rand_tensor(5, 8)
        perm = np.random.default_rng(4).permutation(5)
        out_a = ad.transformer_encoder_layer(q, kv, kv, store, "tf", heads=2)
        kv_p = Tensor(kv.data[perm])
        out_b = ad.transformer_encoder_layer(q, kv_p, kv_p, store, "tf",
                                             heads=2)
        np.testing.assert_allclose(out_a.data, out_b.data, atol=1e-12)

    def test_width_mismatch_raises(self):
        store = self.make_store()
        with pytest.raises(ad.ShapeError):
            ad.transformer_encoder_layer(
                rand_tensor(3, 8), rand_tensor(5, 6), rand_tensor(5, 6),
                store, "tf", heads=2,
            )

    @pytest.mark.parametrize("seed", [10, 11, 12])
    def test_gradients(self, seed):
        store = self.make_store(seed=seed)
        rng = np.random.default_rng(seed)
        q = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        kv = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        w = rng.normal(size=(3, 8))

        def f(ts):
            out = ad.transformer_encoder_layer(ts[0], ts[1], ts[1], store,
                                               "tf", heads=2)
            return (out * w).sum()

        assert ad.grad_check(f, [q, kv]) < 1e-4

    def test_parameter_gradients(self):
        store = self.make_store(seed=21)
        rng = np.random.default_rng(21)
        q = Tensor(rng.normal(size=(2, 8)))
        kv = Tensor(rng.normal(size=(3, 8)))
        w = rng.normal(size=(2, 8))

        def f(ts):
            out = ad.transformer_encoder_layer(q, kv, kv, store, "tf",
                                               heads=2)
            return (out * w).sum()

        for name in ("tf.wq.w", "tf.ff1.w", "tf.wo.w", "tf.wv.b"):
            assert ad.grad_check(f, [store[name]]) < 1e-4


class TestOptimizer:
    def test_zero_gradient_leaves_params(self):
        store = ad.ParamStore(0)
        w = store.add("w", (3,))
        before = w.data.copy()
        w.grad = np.zeros(3)
        ad.Adam(store, lr=0.1).step()
        np.testing.assert_array_equal(w.data, before)

    def test_descent_direction(self):
        store = ad.ParamStore(0)
        w = store.add("w", (1,))
        w.data = np.array([1.0])
        opt = ad.Adam(store, lr=0.1)
        (w * w).sum().backward()
        opt.step()
        assert w.data[0] < 1.0

    def test_quadratic_convergence(self):
        store = ad.ParamStore(0)
        w = store.add("w", (2,))
        w.data = np.array([3.0, -2.0])
        target = np.array([0.5, 1.5])
        opt = ad.Adam(store, lr=0.05)
        for _ in range(200):
            store.zero_grad()
            loss = ((w - target) * (w - target)).sum()
            loss.backward()
            opt.step()
        final = ((w.data - target) ** 2).sum()
        assert final < 1e-3

    def test_shape_mismatch_raises(self):
        store = ad.ParamStore(0)
        w = store.add("w", (3,))
        w.grad = np.zeros((2,))
        with pytest.raises(ad.ShapeError):
            ad.Adam(store).step()


class TestParamStore:
    def test_deterministic_init(self):
        a = ad.ParamStore(42).add("w", (4, 4))
        b = ad.ParamStore(42).add("w", (4, 4))
        np.testing.assert_array_equal(a.data, b.data)

    def test_duplicate_name_rejected(self):
        store = ad.ParamStore(0)
        store.add("w", (2,))
        with pytest.raises(ValueError):
            store.add("w", (2,))

    def test_checkpoint_round_trip(self, tmp_path):
        store = ad.ParamStore(7)
        store.add("alpha", (3, 2))
        store.add("beta", (4,))
        store.save(tmp_path / "ckpt")
        loaded = ad.ParamStore.load(tmp_path / "ckpt")
        assert sorted(loaded.names()) == ["alpha", "beta"]
        for name in store.names():
            np.testing.assert_array_equal(loaded[name].data,
                                          store[name].data)


@given(
    rows=st.integers(1, 6), cols=st.integers(2, 6),
    seed=st.integers(0, 10_000),
)
@settings(max_examples=60, deadline=None)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * 10
    out = ad.softmax(Tensor(x), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    assert (out.data > 0).all()
