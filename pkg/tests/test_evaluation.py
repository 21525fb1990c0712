import math

import numpy as np
import pytest

from tests.conftest import cut_latent, last_layer, make_uniform
from vadd_lab.diffusion.oracles import comparison_checks, run_comparison
from vadd_lab.errors import UsageError
from vadd_lab.evaluation import (
    Histogram2D,
    js_divergence,
    log_gaussian_expectation,
    mask_count_test,
    nll,
    nll_curve,
    posterior_oracle,
    quadrant_occupancy,
    quadrature_logp,
    sample_stats,
    standard_normal_grid,
)
from vadd_lab.masking import posterior_probs
from vadd_lab.objective import log_likelihood_given_z
from vadd_lab.rng import make_generator
from vadd_lab.schemas import EvalMetrics

V = 100


class TestJSDivergence:
    def test_identical(self):
        h = Histogram2D.from_tokens([[1, 2], [3, 4], [3, 4]])
        assert js_divergence(h, h) == 0.0

    def test_disjoint_support(self):
        p = Histogram2D.from_tokens([[1, 2]])
        q = Histogram2D.from_tokens([[50, 60]])
        assert js_divergence(p, q) == pytest.approx(math.log(2.0))

    def test_two_bins_by_hand(self):
        p = Histogram2D.from_tokens([[0, 0]] * 3 + [[0, 1]])
        q = Histogram2D.from_tokens([[0, 0]] + [[0, 1]] * 3)
        expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
        assert js_divergence(p, q) == pytest.approx(expected, rel=1e-12)

    def test_symmetric(self):
        rng = make_generator(0)
        p = Histogram2D.from_tokens(rng.integers(0, V, size=(500, 2)))
        q = Histogram2D.from_tokens(rng.integers(0, 30, size=(500, 2)))
        assert js_divergence(p, q) == pytest.approx(js_divergence(q, p), rel=1e-12)

    def test_empty_histogram(self):
        empty = Histogram2D(np.zeros((V, V), dtype=np.int64))
        with pytest.raises(UsageError):
            js_divergence(empty, empty)

    def test_needs_pairs(self):
        with pytest.raises(UsageError):
            Histogram2D.from_tokens([[1, 2, 3]])


class TestSampleStats:
    def test_checkerboard(self):
        tokens = np.array([[10, 10]] * 5 + [[60, 60]] * 5)
        result = sample_stats(tokens, "checkerboard")
        assert result["quadrants"] == {"q00": 0.5, "q01": 0.0, "q10": 0.0, "q11": 0.5}
        assert result["quadrants_with_mass"] == 2
        assert result["on_cell_fraction"] == 1.0
        assert result["on_cells_with_mass"] == 2

    @pytest.mark.parametrize("board,cells,bins", [(2, 2, 5000), (4, 8, 5000), (5, 13, 5200)])
    def test_support_size(self, board, cells, bins):
        result = sample_stats(np.array([[10, 10]]), "checkerboard", board_size=board)
        assert result["on_cells"] == cells
        assert result["support_bins"] == bins

    def test_off_cell_mass(self):
        tokens = np.array([[10, 60], [60, 10], [10, 10], [70, 70]])
        assert sample_stats(tokens, "checkerboard")["on_cell_fraction"] == 0.5

    def test_other_datasets_skip_cells(self):
        result = sample_stats(np.array([[1, 1]]), "swissroll")
        assert "on_cell_fraction" not in result

    def test_quadrant_fractions_sum_to_one(self):
        tokens = make_generator(1).integers(0, V, size=(1000, 2))
        assert sum(quadrant_occupancy(tokens).values()) == pytest.approx(1.0)


class TestNLL:
    def test_uniform_baseline(self, mdlm_model):
        model = make_uniform(mdlm_model)
        tokens = make_generator(2).integers(0, V, size=(100, 2))
        value = nll(model, tokens, K=1, n_time_pairs=50, seed=0)
        # the 1/t weights leave a standard error near 0.3
        assert value == pytest.approx(2 * math.log(V), abs=1.5)

    def test_point_mass_model(self, mdlm_model):
        layer = last_layer("den.out", mdlm_model.arch)
        mdlm_model.params[f"{layer}.W"][...] = 0.0
        mdlm_model.params[f"{layer}.b"][...] = 0.0
        mdlm_model.params[f"{layer}.b"][42] = 50.0
        value = nll(mdlm_model, [[42, 42]], K=1, n_time_pairs=20, seed=1)
        assert 0.0 <= value < 1e-6

    def test_thread_count_does_not_matter(self, vadd_model):
        tokens = make_generator(3).integers(0, V, size=(6, 2))
        a = nll_curve(vadd_model, tokens, [1, 4], 3, seed=2, threads=1)
        b = nll_curve(vadd_model, tokens, [1, 4], 3, seed=2, threads=3)
        assert a == b

    def test_needs_sequences(self, vadd_model):
        with pytest.raises(UsageError):
            nll(vadd_model, np.zeros((0, 2), dtype=int))


class TestQuadrature:
    def test_grid_weights_sum_to_one(self):
        _, log_w = standard_normal_grid(2, 10)
        assert np.exp(log_w).sum() == pytest.approx(1.0, rel=1e-12)

    def test_gaussian_integral(self):
        value = log_gaussian_expectation(lambda z: z[:, 0] - 0.5 * z[:, 0] ** 2, 1)
        expected = 0.25 - 0.5 * math.log(2.0)
        assert abs(value - expected) / abs(expected) < 1e-8

    def test_latent_free_model(self, vadd_model):
        model = cut_latent(vadd_model)
        x0 = np.array([[3, 4]])
        xt = np.array([[V, 4]])
        expected = log_likelihood_given_z(model, x0, xt, 0.5, np.zeros((1, 2)))[0]
        assert quadrature_logp(model, x0, xt, 0.5, nodes_per_dim=10) == pytest.approx(expected, abs=1e-10)

    def test_dimension_limit(self):
        with pytest.raises(UsageError):
            standard_normal_grid(4)


class TestForwardOracles:
    @pytest.mark.parametrize("s,t", [(0.0, 0.3), (0.2, 0.5), (0.6, 1.0)])
    def test_posterior_matches_closed_form(self, s, t):
        vocab = 5
        for x0 in range(vocab):
            for xt in (x0, vocab):
                np.testing.assert_allclose(
                    posterior_oracle(x0, xt, s, t, vocab),
                    posterior_probs(xt, x0, s, t, vocab),
                    atol=1e-12,
                )

    def test_posterior_near_diagonal(self):
        probs = posterior_oracle(2, 5, 0.5 - 1e-9, 0.5, 5)
        assert probs[5] == pytest.approx(1.0, abs=1e-6)

    def test_unmasked_token_at_full_masking(self):
        for s in (0.0, 0.4, 0.99):
            probs = posterior_oracle(3, 3, s, 1.0, 5)
            np.testing.assert_array_equal(probs, [0, 0, 0, 1, 0, 0])
        with pytest.raises(UsageError):
            posterior_oracle(2, 3, 0.4, 1.0, 5)

    def test_unreachable_state(self):
        with pytest.raises(UsageError):
            posterior_oracle(1, 3, 0.2, 0.5, 5)

    def test_mask_counts_follow_binomial(self):
        assert mask_count_test(0.3, 2, 10_000, make_generator(0)) > 0.001
        assert mask_count_test(0.7, 50, 5_000, make_generator(1)) > 0.001

    def test_degenerate_times(self):
        assert mask_count_test(0.0, 2, 1000, make_generator(0)) == 1.0
        assert mask_count_test(1.0, 2, 1000, make_generator(0)) == 1.0

    def test_needs_enough_trials(self):
        with pytest.raises(UsageError):
            mask_count_test(0.3, 2, 999, make_generator(0))


def _metrics(model, js1, js5, nll, on_cells_with_mass=2, dataset="checkerboard"):
    stats = {
        "1": {"quadrants": {}, "on_cells": 2, "on_cells_with_mass": on_cells_with_mass},
        "truth": {"support_bins": 5000},
    }
    return EvalMetrics(js={"1": js1, "5": js5}, nll=nll, K=1000, n_time_pairs=100, seed=0,
                       model=model, config_hash="abc", sample_stats=stats, dataset=dataset)


class TestComparisonGates:
    def test_paper_like_numbers_pass(self):
        report = run_comparison(_metrics("vadd", 0.01, 0.004, 8.06), _metrics("mdlm", 0.2, 0.01, 8.50))
        assert report.passed and report.scope == "compare"
        by_name = {c.name: c for c in report.checks}
        assert by_name["js_1_ratio"].value == pytest.approx(0.05)
        assert by_name["mdlm_nll_vs_support_entropy"].details["target"] == pytest.approx(math.log(5000))
        assert by_name["one_step_on_cells"].threshold == 2

    @pytest.mark.parametrize("vadd,failed", [
        (dict(js1=0.15, js5=0.004, nll=8.06), "js_1_ratio"),
        (dict(js1=0.01, js5=0.02, nll=8.06), "js_5_ordering"),
        (dict(js1=0.01, js5=0.004, nll=8.60), "nll_ordering"),
        (dict(js1=0.01, js5=0.004, nll=8.06, on_cells_with_mass=1), "one_step_on_cells"),
    ])
    def test_each_gate_can_fail(self, vadd, failed):
        checks = comparison_checks(_metrics("vadd", **vadd), _metrics("mdlm", 0.2, 0.01, 8.50))
        assert [c.name for c in checks if not c.passed] == [failed]

    def test_mdlm_far_from_support_entropy(self):
        checks = comparison_checks(_metrics("vadd", 0.01, 0.004, 8.06), _metrics("mdlm", 0.2, 0.01, 9.3))
        assert [c.name for c in checks if not c.passed] == ["mdlm_nll_vs_support_entropy"]

    def test_equal_js_5_passes(self):
        checks = comparison_checks(_metrics("vadd", 0.01, 0.01, 8.06), _metrics("mdlm", 0.2, 0.01, 8.50))
        assert all(c.passed for c in checks)

    def test_other_datasets_skip_cell_gates(self):
        vadd = _metrics("vadd", 0.01, 0.004, 8.06, dataset="swissroll")
        mdlm = _metrics("mdlm", 0.2, 0.01, 9.9, dataset="swissroll")
        assert {c.name for c in comparison_checks(vadd, mdlm)} == {"js_1_ratio", "js_5_ordering", "nll_ordering"}

    @pytest.mark.parametrize("vadd,mdlm", [
        (_metrics("mdlm", 0.1, 0.1, 8.0), _metrics("mdlm", 0.1, 0.1, 8.0)),
        (_metrics("vadd", 0.1, 0.1, 8.0, dataset="circles"), _metrics("mdlm", 0.1, 0.1, 8.0)),
    ])
    def test_mismatched_evals(self, vadd, mdlm):
        with pytest.raises(UsageError):
            comparison_checks(vadd, mdlm)
