import math

import numpy as np
import pytest

from tests.conftest import tokens_of
from vadd_lab.diffgraph import (
    Graph,
    ParamStore,
    adam_step,
    backward,
    cosine_lr,
    grad_check,
    relative_error,
)
from vadd_lab.errors import ConfigurationError, UsageError
from vadd_lab.masking import forward_mask
from vadd_lab.objective import delbo_terms, elbo_terms_mdlm
from vadd_lab.rng import make_generator


def _tiny_store(rng):
    store = ParamStore()
    store.add("W", rng.normal(size=(3, 4)))
    store.add("b", rng.normal(size=4))
    store.add("unused", rng.normal(size=(2, 2)))
    return store


def _tiny_loss(x):
    def forward(store):
        g = Graph(store)
        h = g.elu(g.linear(g.constant(x), g.param("W"), g.param("b")))
        logp = g.log_softmax_rows(h, excluded=3)
        picked = g.pick(logp, cols=[0, 1], weights=[1.0, 1.0], groups=[0, 1], n_groups=2)
        return g, g.sum_all(g.add(picked, g.square(picked)))
    return forward


class TestGraphOps:
    def test_linear_value(self):
        g = Graph()
        x = g.constant([[1.0, 2.0]])
        W = g.constant([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]])
        b = g.constant([0.5, 0.5, 0.5])
        np.testing.assert_allclose(g.value(g.linear(x, W, b)), [[1.5, 2.5, 4.5]])

    def test_linear_matches_naive_matmul(self):
        rng = make_generator(9)
        x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        expected = np.array([[sum(x[i, k] * W[k, j] for k in range(4)) + b[j] for j in range(2)]
                             for i in range(3)])
        g = Graph()
        out = g.linear(g.constant(x), g.constant(W), g.constant(b))
        np.testing.assert_allclose(g.value(out), expected, atol=1e-12)

    def test_elu(self):
        g = Graph()
        out = g.value(g.elu(g.constant([1.0, 0.0, -1.0])))
        np.testing.assert_allclose(out, [1.0, 0.0, math.exp(-1.0) - 1.0], rtol=1e-15)

    def test_excluded_class_has_zero_probability(self):
        g = Graph()
        out = g.log_softmax_rows(g.constant([[1.0, 2.0, 3.0]]), excluded=2)
        probs = np.exp(g.value(out))
        assert probs[0, 2] == 0.0
        np.testing.assert_allclose(probs.sum(), 1.0, rtol=1e-15)

    def test_pick_groups_weighted_entries(self):
        g = Graph()
        x = g.constant([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out = g.pick(x, cols=[1, 0, 1], weights=[1.0, 0.0, 2.0], groups=[0, 0, 1], n_groups=2)
        np.testing.assert_allclose(g.value(out), [2.0, 12.0])

    def test_embed_sum_adds_rows(self):
        g = Graph()
        table = g.constant(np.arange(12.0).reshape(4, 3))
        out = g.embed_sum(table, [[0, 3], [1, 1]])
        np.testing.assert_allclose(g.value(out), [[9.0, 11.0, 13.0], [6.0, 8.0, 10.0]])

    def test_shape_mismatch_raises(self):
        g = Graph()
        with pytest.raises(ConfigurationError):
            g.add(g.constant(np.zeros(3)), g.constant(np.zeros(4)))

    def test_duplicate_parameter_rejected(self):
        store = ParamStore()
        store.add("w", np.zeros(2))
        with pytest.raises(ConfigurationError):
            store.add("w", np.zeros(2))


class TestBackward:
    def test_non_scalar_loss_rejected(self):
        g = Graph()
        with pytest.raises(UsageError):
            backward(g, g.constant(np.zeros(3)))

    def test_unused_parameter_gets_zero_gradient(self):
        store = _tiny_store(make_generator(0))
        g, loss = _tiny_loss(np.ones((2, 3)))(store)
        grads = backward(g, loss)
        assert set(grads) == {"W", "b", "unused"}
        np.testing.assert_array_equal(grads["unused"], 0.0)

    def test_quadratic_gradient_matches_closed_form(self):
        store = ParamStore()
        store.add("w", [1.0, -2.0, 3.0])
        g = Graph(store)
        loss = g.sum_all(g.square(g.param("w")))
        grads = backward(g, loss)
        np.testing.assert_allclose(grads["w"], [2.0, -4.0, 6.0])

    def test_reused_parameter_accumulates(self):
        store = ParamStore()
        store.add("w", [2.0])
        g = Graph(store)
        w = g.param("w")
        loss = g.sum_all(g.mul(w, w))
        assert backward(g, loss)["w"][0] == pytest.approx(4.0)


class TestGradCheck:
    def test_small_graph(self):
        store = _tiny_store(make_generator(1))
        x = make_generator(2).normal(size=(2, 3))
        assert grad_check(_tiny_loss(x), store, 30, make_generator(3)) < 1e-6

    @pytest.mark.parametrize("kind", ["vadd", "mdlm"])
    def test_full_models(self, kind, vadd_model, mdlm_model, streams):
        model = vadd_model if kind == "vadd" else mdlm_model
        arch = model.arch
        rng = make_generator(11)
        x0 = tokens_of(rng, 3)
        t = np.array([0.3, 0.6, 0.9])
        xt = forward_mask(x0, t, rng, arch.vocab_size)
        eps = rng.standard_normal((3, arch.latent_dim))

        def forward(store):
            g = Graph(store)
            if model.has_latent:
                terms, _ = delbo_terms(g, model, x0, t, streams, 0.7, xt=xt, eps=eps)
            else:
                terms, _ = elbo_terms_mdlm(g, model, x0, t, streams, xt=xt)
            return g, g.scale(g.sum_all(terms), -1.0 / 3)

        assert grad_check(forward, model.params, 100, make_generator(12), h=1e-5) < 1e-3


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        store = ParamStore()
        store.add("w", [1.0, 1.0, 1.0])
        grads = {"w": np.array([0.5, -2.0, 0.0])}
        adam_step(store, grads, lr=0.1)
        np.testing.assert_allclose(store["w"], [0.9, 1.1, 1.0], atol=1e-6)
        assert store.step_count == 1

    def test_ten_steps_follow_scalar_recurrence(self):
        grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 1.1, -0.4, 0.9, -2.5]
        lr, b1, b2, eps = 0.05, 0.8, 0.95, 1e-6
        store = ParamStore()
        store.add("w", [0.5])

        w, m, v = 0.5, 0.0, 0.0
        for step, grad in enumerate(grads, start=1):
            adam_step(store, {"w": np.array([grad])}, lr, b1, b2, eps)
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            w -= lr * (m / (1 - b1 ** step)) / (math.sqrt(v / (1 - b2 ** step)) + eps)
            assert store["w"][0] == pytest.approx(w, rel=1e-12, abs=1e-15)
        assert store.adam_m["w"][0] == pytest.approx(m, rel=1e-12)
        assert store.adam_v["w"][0] == pytest.approx(v, rel=1e-12)
        assert store.step_count == 10

    def test_zero_gradient_keeps_moments_at_zero(self):
        store = ParamStore()
        store.add("w", [1.0, -3.0])
        for _ in range(5):
            adam_step(store, {"w": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(store.adam_m["w"], 0.0)
        np.testing.assert_array_equal(store.adam_v["w"], 0.0)
        np.testing.assert_array_equal(store["w"], [1.0, -3.0])
        assert store.step_count == 5

    def test_gradient_shape_checked(self):
        store = ParamStore()
        store.add("w", [1.0, 1.0])
        with pytest.raises(ConfigurationError):
            adam_step(store, {"w": np.zeros(3)}, lr=0.1)

    def test_weight_decay_shrinks_parameters(self):
        store = ParamStore()
        store.add("w", [1.0])
        adam_step(store, {"w": np.zeros(1)}, lr=0.1, weight_decay=0.5)
        assert store["w"][0] < 1.0


class TestCosineLR:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 3e-4) == pytest.approx(3e-4)
        assert cosine_lr(100, 100, 3e-4) == pytest.approx(0.0, abs=1e-20)
        assert cosine_lr(50, 100, 3e-4) == pytest.approx(1.5e-4)

    def test_monotone_decreasing(self):
        values = [cosine_lr(s, 40, 1.0) for s in range(41)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
        assert math.isclose(relative_error(2.0, 1.0), 0.5)
