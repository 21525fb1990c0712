import math

import numpy as np
import pytest

from tests.conftest import SMALL, cut_latent, make_uniform, mdlm_from_vadd, pin_recognizer, tokens_of
from vadd_lab.datagen import make_dataset, write_dataset
from vadd_lab.diffgraph import Graph, adam_step, backward
from vadd_lab.diffusion.orchestrator import run_training
from vadd_lab.errors import UsageError
from vadd_lab.masking import forward_mask, sample_times
from vadd_lab.objective import (
    AnnealSchedule,
    batch_loss,
    delbo_term,
    delbo_terms,
    elbo_terms_mdlm,
    gauss_kl,
    gauss_kl_value,
    importance_log_weights,
    k_sample_delbo,
    k_sample_delbo_curve,
    kl_anneal_weight,
    log_diag_gaussian,
    log_standard_normal,
    logmeanexp,
    masked_log_likelihood,
)
from vadd_lab.rng import RandomStreams, make_generator
from vadd_lab.schemas import RunConfig

V = 100


def _uniform_log_mu(rows: int) -> np.ndarray:
    log_mu = np.full((rows, V + 1), math.log(1.0 / V))
    log_mu[:, V] = -1e30
    return log_mu


class TestAnneal:
    def test_examples(self):
        anneal = AnnealSchedule(200)
        assert kl_anneal_weight(0, anneal) == 0.0
        assert kl_anneal_weight(100, anneal) == 0.5
        assert kl_anneal_weight(200, anneal) == 1.0
        assert kl_anneal_weight(10_000, anneal) == 1.0

    def test_no_annealing(self):
        assert kl_anneal_weight(0, AnnealSchedule(0)) == 1.0

    def test_negative_step(self):
        with pytest.raises(UsageError):
            kl_anneal_weight(-1, AnnealSchedule(10))


class TestGaussKL:
    def _kl(self, mean, std):
        g = Graph()
        mean = np.atleast_2d(mean)
        std = np.atleast_2d(std)
        node = gauss_kl(g, g.constant(mean), g.constant(std), g.constant(np.log(std)))
        return g.value(node)

    def test_prior_has_zero_kl(self):
        assert self._kl([0.0, 0.0], [1.0, 1.0])[0] == 0.0

    def test_unit_shift(self):
        assert self._kl([1.0], [1.0])[0] == pytest.approx(0.5)

    def test_matches_monte_carlo(self):
        mean = np.array([0.7, -0.3])
        std = np.array([0.5, 1.8])
        z = mean + std * make_generator(0).standard_normal((1_000_000, 2))
        ratio = log_diag_gaussian(z, mean, std) - log_standard_normal(z)
        se = ratio.std() / math.sqrt(len(ratio))
        assert abs(ratio.mean() - gauss_kl_value(mean, std)[0]) < 4 * se
        assert self._kl(mean, std)[0] == pytest.approx(gauss_kl_value(mean, std)[0])


class TestMaskedLogLikelihood:
    def test_nothing_masked(self):
        g = Graph()
        ll = masked_log_likelihood(g, [[3, 4]], [[3, 4]], g.constant(_uniform_log_mu(2)), V)
        assert g.value(ll)[0] == 0.0

    def test_one_masked_uniform(self):
        g = Graph()
        ll = masked_log_likelihood(g, [[3, 4]], [[V, 4]], g.constant(_uniform_log_mu(2)), V)
        assert g.value(ll)[0] == pytest.approx(math.log(0.01))

    def test_matches_product_enumeration(self):
        rng = make_generator(4)
        logits = rng.normal(size=(6, V + 1))
        logits[:, V] = -np.inf
        log_mu = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        x0 = np.array([[5, 9], [1, 2], [70, 71]])
        xt = np.array([[V, 9], [V, V], [70, 71]])
        g = Graph()
        ll = g.value(masked_log_likelihood(g, x0, xt, g.constant(log_mu), V))
        mu = np.exp(log_mu)
        expected = [
            math.log(mu[0, 5]),
            math.log(mu[2, 1] * mu[3, 2]),
            0.0,
        ]
        np.testing.assert_allclose(ll, expected, atol=1e-12)

    def test_disagreement_rejected(self):
        g = Graph()
        with pytest.raises(UsageError):
            masked_log_likelihood(g, [[3, 4]], [[V, 5]], g.constant(_uniform_log_mu(2)), V)


class TestTerms:
    def test_uniform_elbo_term(self, mdlm_model, streams):
        model = make_uniform(mdlm_model)
        g = Graph(model.params)
        terms, _ = elbo_terms_mdlm(g, model, [[3, 4]], 0.5, streams, xt=np.array([[V, 4]]))
        assert g.value(terms)[0] == pytest.approx(2.0 * math.log(0.01))

    def test_all_masked_without_kl(self, vadd_model):
        x0 = np.array([[10, 20]])
        g, node, breakdown = delbo_term(vadd_model, x0, 1.0, RandomStreams(0), lam=0.0)
        assert breakdown.n_masked == 2 and isinstance(breakdown.n_masked, int)
        assert g.value(node) == pytest.approx(breakdown.recon)
        assert breakdown.total == pytest.approx(breakdown.recon - breakdown.lam * breakdown.kl)

    def test_nothing_masked_leaves_only_kl(self, vadd_model, streams):
        x0 = np.array([[10, 20]])
        g = Graph(vadd_model.params)
        terms, pieces = delbo_terms(g, vadd_model, x0, 0.5, streams, 0.4, xt=x0.copy())
        assert pieces["recon"][0] == 0.0
        assert g.value(terms)[0] == pytest.approx(-2.0 * 0.4 * pieces["kl_raw"][0])

    def test_pinned_recognizer_has_no_kl(self, vadd_model):
        model = pin_recognizer(vadd_model)
        _, _, breakdown = delbo_term(model, [[1, 2]], 0.5, RandomStreams(2), lam=1.0)
        assert breakdown.kl == 0.0

    def test_time_out_of_range(self, vadd_model, streams):
        with pytest.raises(UsageError):
            delbo_term(vadd_model, [[1, 2]], 0.0, streams, lam=1.0)

    def test_duplicated_rows_identical(self, vadd_model, streams):
        x0 = np.array([[5, 6], [5, 6]])
        xt = np.array([[V, 6], [V, 6]])
        eps = np.array([[0.3, -1.0], [0.3, -1.0]])
        g = Graph(vadd_model.params)
        terms, _ = delbo_terms(g, vadd_model, x0, 0.4, streams, 0.5, xt=xt, eps=eps)
        values = g.value(terms)
        assert values[0] == values[1]

    def test_latent_draw_comes_from_latent_stream(self, vadd_model):
        x0 = np.array([[5, 6], [70, 80], [1, 99]])
        xt = np.array([[V, 6], [V, V], [1, V]])
        g = Graph(vadd_model.params)
        drawn, _ = delbo_terms(g, vadd_model, x0, 0.6, RandomStreams(4), 0.5, xt=xt)

        eps = RandomStreams(4).latent.standard_normal((3, vadd_model.arch.latent_dim))
        g2 = Graph(vadd_model.params)
        given, _ = delbo_terms(g2, vadd_model, x0, 0.6, RandomStreams(4), 0.5, xt=xt, eps=eps)
        np.testing.assert_array_equal(g.value(drawn), g2.value(given))


class TestBatchLoss:
    def test_empty_batch(self, vadd_model, streams):
        with pytest.raises(UsageError):
            batch_loss(vadd_model, np.zeros((0, 2), dtype=int), 0, streams, AnnealSchedule(10))

    def test_single_element_is_negated_term(self, vadd_model):
        x0 = np.array([[12, 13]])
        g, loss, _ = batch_loss(vadd_model, x0, 5, RandomStreams(9), AnnealSchedule(0))

        other = RandomStreams(9)
        t = float(sample_times(other.time, 1)[0])
        g2, node, _ = delbo_term(vadd_model, x0, t, other, lam=1.0)
        assert g.value(loss) == pytest.approx(-g2.value(node), rel=1e-12)

    def test_masked_count_is_batch_total(self, vadd_model):
        batch = tokens_of(make_generator(2), 16)
        g, _, breakdown = batch_loss(vadd_model, batch, 0, RandomStreams(6), AnnealSchedule(5))

        other = RandomStreams(6)
        t = sample_times(other.time, 16)
        xt = forward_mask(batch, t, other.mask, V)
        assert isinstance(breakdown.n_masked, int)
        assert breakdown.n_masked == int(np.sum(xt == V))

    def test_surgery_matches_baseline(self, vadd_model):
        vadd = pin_recognizer(cut_latent(vadd_model))
        mdlm = mdlm_from_vadd(vadd)
        batch = tokens_of(make_generator(1), 32)
        for h in (0, 7, 50):
            g1, l1, _ = batch_loss(vadd, batch, h, RandomStreams(5), AnnealSchedule(20))
            g2, l2, _ = batch_loss(mdlm, batch, h, RandomStreams(5), AnnealSchedule(20))
            assert abs(g1.value(l1) - g2.value(l2)) < 1e-10

    def test_point_mass_overfit(self, vadd_model):
        batch = np.tile([[42, 17]], (64, 1))
        streams = RandomStreams(3)
        anneal = AnnealSchedule(10 ** 9)
        losses = []
        for h in range(200):
            g, loss, _ = batch_loss(vadd_model, batch, h, streams, anneal)
            adam_step(vadd_model.params, backward(g, loss), lr=1e-2)
            losses.append(float(g.value(loss)))
        assert np.mean(losses[-20:]) < 0.1
        assert np.mean(losses[-20:]) < np.mean(losses[:20])


class TestKSample:
    def test_logmeanexp_of_equal_values(self):
        assert logmeanexp([-3.5] * 17) == pytest.approx(-3.5, abs=1e-12)

    def test_exact_recognizer_gives_flat_curve(self, vadd_model):
        model = pin_recognizer(cut_latent(vadd_model))
        curve = k_sample_delbo_curve(model, [[3, 4]], [1, 10, 100], 5, RandomStreams(1))
        assert curve[1] == pytest.approx(curve[10], rel=1e-12)
        assert curve[10] == pytest.approx(curve[100], rel=1e-12)

    def test_baseline_ignores_K(self, mdlm_model):
        curve = k_sample_delbo_curve(mdlm_model, [[3, 4]], [1, 50], 3, RandomStreams(1))
        assert curve[1] == curve[50]

    def test_single_K_matches_curve(self, vadd_model):
        single = k_sample_delbo(vadd_model, [[3, 4]], 8, 3, RandomStreams(2))
        curve = k_sample_delbo_curve(vadd_model, [[3, 4]], [8], 3, RandomStreams(2))
        assert single == curve[8]

    def test_bad_arguments(self, vadd_model, streams):
        with pytest.raises(UsageError):
            k_sample_delbo(vadd_model, [[3, 4]], 0, 3, streams)

    def test_nested_prefixes_tighten(self, vadd_model):
        # recognizer mean 1 against an N(0, I) prior: a loose single-sample bound
        model = pin_recognizer(cut_latent(vadd_model), mean=1.0)
        x0 = np.array([[3, 4]])
        xt = np.array([[V, 4]])
        eps = make_generator(6).standard_normal((100 * 100, 2))
        log_w = importance_log_weights(model, x0, xt, 0.5, eps).reshape(100, 100)
        l1 = np.mean(log_w[:, 0])
        l10 = np.mean([logmeanexp(row[:10]) for row in log_w])
        l100 = np.mean([logmeanexp(row) for row in log_w])
        assert l1 < l10 < l100

    @pytest.mark.slow
    def test_trained_model_block_means_increase_with_K(self, tmp_path):
        cfg = RunConfig.model_validate({
            "dataset": {"name": "checkerboard", "n": 4000, "truth_n": 100},
            "model": dict(SMALL),
            "training": {"epochs": 5, "anneal_epochs": 2},
            "seed": 8,
        })
        streams = RandomStreams(8)
        write_dataset(make_dataset(cfg.dataset, streams, "train"), tmp_path / "data", "k")
        model = run_training(cfg, "vadd", tmp_path / "data", tmp_path / "run", "k").model
        truth = make_dataset(cfg.dataset, streams, "truth").tokens

        for case in range(5):
            x0 = truth[case:case + 1]
            xt = np.array([[V, x0[0, 1]]]) if case % 2 else np.array([[V, V]])
            eps = make_generator(case).standard_normal((1000, 2))
            log_w = importance_log_weights(model, x0, xt, 0.3 + 0.1 * case, eps)
            # mean of logmeanexp over disjoint blocks of K draws
            means = [np.mean([logmeanexp(b) for b in log_w.reshape(-1, k)]) for k in (1, 10, 100, 1000)]
            assert all(a <= b + 1e-12 for a, b in zip(means, means[1:]))
            assert means[0] < means[-1]
