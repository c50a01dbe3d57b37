"""Tests for sparsity metrics, pruning, KDE, and constraint geometry."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from stableprior.analysis import (
    EmptyLevelSet,
    EmptyModel,
    InfeasibleBudget,
    QuadraticObjective,
    RootNotBracketed,
    constraint_contour,
    contour_radius,
    kappa_for_axis_radius,
    magnitude_prune,
    sparsity,
    sparsity_fraction,
    toy_lse_solve,
    weight_kde,
)
from stableprior.net import LayerSpec, Model
from stableprior.stable import StableParams, log_pdf
from stableprior.train import evaluate


def flat_model(weights, in_features=None):
    """Single dense layer whose weight tensor holds the given values."""
    w = np.asarray(weights, dtype=np.float64)
    if in_features is None:
        in_features = w.shape[-1] if w.ndim == 2 else w.size
    out_features = w.size // in_features
    model = Model([LayerSpec("flatten"),
                   LayerSpec("dense", out_features=out_features)],
                  (1, 1, in_features), seed=0)
    model.layers[1].params["W"][...] = w.reshape(out_features, in_features)
    return model


def two_layer_model():
    return Model([LayerSpec("flatten"), LayerSpec("dense", out_features=2),
                  LayerSpec("relu"), LayerSpec("dense", out_features=3)],
                 (1, 1, 4), seed=0)


class TestSparsity:
    def test_all_zero_weights_fraction_one(self):
        model = flat_model(np.zeros(6), in_features=3)
        assert sparsity_fraction(model, 1e-3) == 1.0

    def test_fresh_initialization_is_dense(self):
        model = two_layer_model()
        assert sparsity_fraction(model, 1e-8) < 0.001

    def test_counts_weights_within_threshold(self):
        model = flat_model([0.0, 0.5, -0.002])
        assert sparsity_fraction(model, 0.01) == pytest.approx(2 / 3)
        rep = sparsity(model, 0.01)
        assert rep.fraction == pytest.approx(2 / 3)
        assert rep.threshold == 0.01

    def test_per_layer_breakdown_and_global_aggregate(self):
        model = two_layer_model()
        w1 = model.layers[1].params["W"]  # [2, 4]
        w3 = model.layers[3].params["W"]  # [3, 2]
        w1[...] = 1.0
        w1.ravel()[:2] = 1e-6
        w3[...] = -1.0
        w3.ravel()[:3] = 0.0
        rep = sparsity(model, 1e-3)
        assert rep.per_layer == {"1.W": 2 / 8, "3.W": 3 / 6}
        assert rep.fraction == pytest.approx(5 / 14)

    def test_uniform_weights_have_flat_tail_kurtosis(self):
        model = flat_model(np.linspace(-1.0, 1.0, 1000), in_features=40)
        rep = sparsity(model, 1e-3)
        assert abs(rep.kurtosis - 1.8) < 0.1

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            sparsity(two_layer_model(), 0.0)

    def test_model_without_weight_tensors(self):
        model = Model([LayerSpec("flatten")], (1, 2, 2), seed=0)
        with pytest.raises(EmptyModel):
            sparsity_fraction(model, 1e-3)


class TestMagnitudePrune:
    def test_zero_fraction_is_identity(self):
        model = two_layer_model()
        pruned, masks = magnitude_prune(model, 0.0)
        for (ka, a), (kb, b) in zip(model.state_arrays(), pruned.state_arrays()):
            assert ka == kb
            assert_array_equal(a, b)
        assert all(m.all() for m in masks.values())

    def test_drops_global_smallest_magnitudes(self):
        model = flat_model([0.1, -0.5, 0.3, -0.05])
        pruned, masks = magnitude_prune(model, 0.5)
        assert_array_equal(pruned.layers[1].params["W"].ravel(), [0.0, -0.5, 0.3, 0.0])
        assert_array_equal(masks["1.W"].ravel(), [False, True, True, False])

    def test_floor_semantics_on_odd_counts(self):
        model = flat_model([5.0, 4.0, 3.0, 2.0, 1.0], in_features=5)
        pruned, _ = magnitude_prune(model, 0.5)  # floor(2.5) = 2
        assert np.count_nonzero(pruned.layers[1].params["W"] == 0.0) == 2
        assert_array_equal(pruned.layers[1].params["W"].ravel(), [5.0, 4.0, 3.0, 0.0, 0.0])

    def test_magnitude_ties_drop_in_scan_order(self):
        model = flat_model([0.2, -0.2, 0.3, 0.4])
        pruned, _ = magnitude_prune(model, 0.25)  # k = 1, |0.2| tied twice
        assert_array_equal(pruned.layers[1].params["W"].ravel(), [0.0, -0.2, 0.3, 0.4])

    def test_ranking_is_global_across_layers(self):
        model = two_layer_model()
        model.layers[1].params["W"][...] = 1e-4  # 8 tiny weights
        model.layers[3].params["W"][...] = 1.0   # 6 large weights
        _, masks = magnitude_prune(model, 0.5)   # k = 7 of 14
        assert np.count_nonzero(~masks["1.W"]) == 7
        assert masks["3.W"].all()

    def test_input_model_untouched_and_biases_kept(self):
        model = two_layer_model()
        before = [a.copy() for _, a in model.state_arrays()]
        model.layers[1].params["b"][...] = 0.75
        pruned, _ = magnitude_prune(model, 0.5)
        assert_array_equal(pruned.layers[1].params["b"], 0.75)
        model.layers[1].params["b"][...] = 0.0
        for (k, a), b in zip(model.state_arrays(), before):
            assert_array_equal(a, b), k

    def test_accuracy_degrades_once_signal_weights_go(self):
        from stableprior.datasets import LabeledDataset
        data = LabeledDataset(np.eye(4).reshape(4, 1, 1, 4) * 10.0,
                              np.arange(4), 4, "test")
        model = Model([LayerSpec("flatten"), LayerSpec("dense", out_features=4),
                       LayerSpec("softmax")], (1, 1, 4), seed=0)
        model.layers[1].params["W"][...] = np.diag([4.0, 3.0, 2.0, 1.0])
        light, _ = magnitude_prune(model, 0.25)  # only zero off-diagonals go
        assert evaluate(light, data)[0] == 1.0
        heavy, _ = magnitude_prune(model, 13 / 16)  # kills the weakest class
        assert evaluate(heavy, data)[0] == 0.75

    @pytest.mark.parametrize("fraction", [-0.1, 1.0, 1.5])
    def test_rejects_bad_fraction(self, fraction):
        with pytest.raises(ValueError):
            magnitude_prune(two_layer_model(), fraction)


class TestWeightKde:
    def test_single_weight_reproduces_the_kernel(self):
        model = flat_model([0.3], in_features=1)
        grid = np.linspace(-2, 2, 101)
        bw = 0.25
        dens = weight_kde(model, bw, grid)
        z = (grid - 0.3) / bw
        assert_allclose(dens, np.exp(-0.5 * z * z) / (bw * math.sqrt(2 * math.pi)),
                        rtol=1e-12)

    def test_symmetric_weights_symmetric_density(self):
        model = flat_model([-0.4, 0.4, -1.0, 1.0])
        grid = np.linspace(-3, 3, 121)
        dens = weight_kde(model, 0.3, grid)
        assert_allclose(dens, dens[::-1], rtol=1e-12)

    def test_smaller_bandwidth_sharpens_the_peak(self):
        model = flat_model([0.0, 0.0, 0.0, 2.0])
        grid = np.linspace(-4, 4, 401)
        wide = weight_kde(model, 0.5, grid)
        narrow = weight_kde(model, 0.25, grid)
        assert narrow.max() > wide.max()

    def test_density_integrates_to_one(self):
        model = two_layer_model()
        grid = np.linspace(-6, 6, 2001)
        dens = weight_kde(model, 0.2, grid)
        assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-3

    def test_validation_and_empty_model(self):
        with pytest.raises(ValueError):
            weight_kde(two_layer_model(), 0.0, np.linspace(-1, 1, 5))
        with pytest.raises(ValueError):
            weight_kde(two_layer_model(), 0.1, np.array([0.0]))
        with pytest.raises(EmptyModel):
            weight_kde(Model([LayerSpec("flatten")], (1, 2, 2), seed=0),
                       0.1, np.linspace(-1, 1, 5))


def level_at(params, point):
    vals = log_pdf(params, np.asarray(point, dtype=np.float64))
    return float(vals[0] + vals[1])


class TestConstraintGeometry:
    def test_axis_kappa_matches_definition(self):
        params = StableParams(1.0, gamma=1.0)
        kappa = kappa_for_axis_radius(params, 1.0)
        assert_allclose(kappa, level_at(params, (1.0, 0.0)), rtol=1e-15)
        with pytest.raises(ValueError):
            kappa_for_axis_radius(params, 0.0)

    def test_axis_radius_recovered(self):
        params = StableParams(1.0, gamma=1.0)
        kappa = kappa_for_axis_radius(params, 1.0)
        assert_allclose(contour_radius(params, kappa, 0.0), 1.0, rtol=0, atol=1e-7)
        assert_allclose(contour_radius(params, kappa, math.pi / 2), 1.0,
                        rtol=0, atol=1e-7)

    def test_gaussian_level_sets_are_circles(self):
        params = StableParams(2.0, gamma=0.8)
        kappa = kappa_for_axis_radius(params, 1.2)
        contour = constraint_contour(params, kappa, resolution=64)
        radii = np.hypot(contour.points[:-1, 0], contour.points[:-1, 1])
        assert radii.max() / radii.min() - 1.0 < 0.005
        assert_allclose(radii, 1.2, rtol=0.005)

    def test_contour_points_satisfy_the_level_equation(self):
        params = StableParams(1.0, gamma=1.0)
        kappa = kappa_for_axis_radius(params, 1.0)
        contour = constraint_contour(params, kappa, resolution=16)
        assert contour.points.shape == (17, 2)
        assert_array_equal(contour.points[-1], contour.points[0])
        for pt in contour.points[:-1]:
            assert abs(level_at(params, pt) - kappa) < 1e-8

    def test_cauchy_diagonal_pinch(self):
        """At the unit axis radius the Cauchy contour crosses the
        diagonal at sqrt(2(sqrt(2) - 1)), from (1 + d^2/2)^2 = 2."""
        params = StableParams(1.0, gamma=1.0)
        kappa = kappa_for_axis_radius(params, 1.0)
        d = contour_radius(params, kappa, math.pi / 4)
        assert_allclose(d, math.sqrt(2.0 * (math.sqrt(2.0) - 1.0)),
                        rtol=0, atol=1e-6)

    def test_pinch_ratio_strictly_decreasing_in_alpha(self):
        ratios = []
        for alpha in (2.0, 1.5, 1.0, 0.5):
            params = StableParams(alpha, gamma=1.0)
            kappa = kappa_for_axis_radius(params, 1.0)
            ratios.append(contour_radius(params, kappa, math.pi / 4)
                          / contour_radius(params, kappa, 0.0))
        assert ratios[0] == pytest.approx(1.0, abs=1e-6)
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_pinch_ratio_strictly_increasing_in_gamma(self):
        ratios = []
        for gamma in (0.3, 1.0, 1.5):
            params = StableParams(1.5, gamma=gamma)
            kappa = kappa_for_axis_radius(params, 1.0)
            ratios.append(contour_radius(params, kappa, math.pi / 4)
                          / contour_radius(params, kappa, 0.0))
        assert all(a < b for a, b in zip(ratios, ratios[1:]))

    def test_empty_level_set_above_the_peak(self):
        params = StableParams(1.0, gamma=1.0)
        peak = level_at(params, (0.0, 0.0))
        with pytest.raises(EmptyLevelSet):
            contour_radius(params, peak, 0.0)
        with pytest.raises(EmptyLevelSet):
            contour_radius(params, peak + 1.0, 0.0)

    def test_near_peak_contour_is_tiny(self):
        params = StableParams(1.0, gamma=1.0)
        peak = level_at(params, (0.0, 0.0))
        assert contour_radius(params, peak - 1e-9, 0.0) < 1e-3

    def test_unreachable_level_reports_no_bracket(self):
        params = StableParams(1.0, gamma=1.0)
        with pytest.raises(RootNotBracketed):
            contour_radius(params, -2000.0, 0.3)

    def test_resolution_floor(self):
        params = StableParams(1.0, gamma=1.0)
        with pytest.raises(ValueError):
            constraint_contour(params, kappa_for_axis_radius(params, 1.0),
                               resolution=3)


class TestQuadraticObjective:
    def test_value(self):
        obj = QuadraticObjective(center=(1.0, -1.0), matrix=((2.0, 0.5), (0.5, 1.0)))
        d = np.array([0.5, 1.0])  # point (1.5, 0)
        expected = float(d @ np.array([[2.0, 0.5], [0.5, 1.0]]) @ d)
        assert obj.value((1.5, 0.0)) == pytest.approx(expected, rel=1e-15)

    def test_rejects_asymmetric_or_indefinite(self):
        with pytest.raises(ValueError):
            QuadraticObjective(center=(0, 0), matrix=((1.0, 0.2), (0.3, 1.0)))
        with pytest.raises(ValueError):
            QuadraticObjective(center=(0, 0), matrix=((1.0, 0.0), (0.0, -2.0)))


class TestToyConstrainedSolve:
    def test_feasible_center_is_returned_unchanged(self):
        params = StableParams(2.0, gamma=1.0)
        kappa = kappa_for_axis_radius(params, 1.0)
        assert toy_lse_solve(QuadraticObjective(center=(0.1, 0.05)),
                             params, kappa) == (0.1, 0.05)

    def test_gaussian_budget_projects_onto_the_circle(self):
        params = StableParams(2.0, gamma=1.0)
        kappa = kappa_for_axis_radius(params, 1.0)
        sol = toy_lse_solve(QuadraticObjective(center=(2.0, 0.5)), params, kappa)
        norm = math.hypot(2.0, 0.5)
        assert_allclose(sol, (2.0 / norm, 0.5 / norm), rtol=0, atol=1e-6)

    def test_budget_at_the_peak_pins_the_origin(self):
        params = StableParams(2.0, gamma=1.0)
        peak = level_at(params, (0.0, 0.0))
        assert toy_lse_solve(QuadraticObjective(center=(2.0, 0.5)),
                             params, peak) == (0.0, 0.0)

    def test_budget_above_the_peak_is_infeasible(self):
        params = StableParams(2.0, gamma=1.0)
        with pytest.raises(InfeasibleBudget):
            toy_lse_solve(QuadraticObjective(center=(2.0, 0.5)), params, 10.0)

    def test_solution_sits_on_the_contour_and_beats_candidates(self):
        obj = QuadraticObjective(center=(2.0, 0.5))
        for alpha, res in ((1.0, 256), (1.5, 64)):
            params = StableParams(alpha, gamma=1.0)
            kappa = kappa_for_axis_radius(params, 1.0)
            sol = toy_lse_solve(obj, params, kappa, resolution=res)
            assert abs(level_at(params, sol) - kappa) < 1e-7
            for angle in (0.0, math.pi / 4, math.pi / 2):
                r = contour_radius(params, kappa, angle)
                cand = (r * math.cos(angle), r * math.sin(angle))
                assert obj.value(sol) <= obj.value(cand) + 1e-9

    def test_heavier_tails_push_the_small_coordinate_down(self):
        """The same objective against tighter-waisted budgets lands ever
        closer to the axis: the geometric seed of the sparsity effect."""
        obj = QuadraticObjective(center=(2.0, 0.5))
        seconds = []
        for alpha, res in ((2.0, 256), (1.5, 64), (1.0, 256), (0.5, 64)):
            params = StableParams(alpha, gamma=1.0)
            kappa = kappa_for_axis_radius(params, 1.0)
            seconds.append(toy_lse_solve(obj, params, kappa, resolution=res)[1])
        assert all(a > b for a, b in zip(seconds, seconds[1:]))
        assert seconds[0] == pytest.approx(0.2425356, abs=1e-4)
        assert seconds[-1] < 0.05

    def test_objective_weights_steer_the_solution(self):
        params = StableParams(2.0, gamma=1.0)
        kappa = kappa_for_axis_radius(params, 1.0)
        iso = toy_lse_solve(QuadraticObjective(center=(2.0, 0.5)), params, kappa)
        heavy_t2 = QuadraticObjective(center=(2.0, 0.5),
                                      matrix=((1.0, 0.0), (0.0, 100.0)))
        aniso = toy_lse_solve(heavy_t2, params, kappa)
        assert aniso[1] > iso[1]  # pulled toward the center's t2
