"""Tests for the log-density-derivative lookup table.

Analytic derivatives of the Cauchy and Gaussian laws pin down the
construction; an independent density implementation run through the
same central-difference formula cross-checks the quadrature-backed
entries; serialization is verified byte by byte.
"""

import math
import struct

import numpy as np
import pytest
from scipy.stats import levy_stable

from stableprior.stable import StableParams
from stableprior.table import (
    ChecksumMismatch,
    DegenerateDensity,
    DerivTable,
    VersionMismatch,
    build_table,
    deserialize,
    key_of,
    lookup_grad,
    lookup_grad_many,
    read_header,
    serialize,
)

CAUCHY = StableParams(1.0, 0.0, 1.0)
GAUSS = StableParams(2.0, 0.0, 1.0)


def cauchy_log_deriv(theta):
    return -2.0 * theta / (1.0 + theta * theta)


class TestBuild:
    def test_cauchy_anchor_value(self):
        # eps=2, n_grid=20 puts key 10 at theta=1 where (ln h)' = -1
        t = build_table(CAUCHY, 2.0, 20, 1.0)
        np.testing.assert_allclose(t.values[10 + 20], -1.0, atol=1e-3)
        np.testing.assert_allclose(t.values[10 + 20], -0.9999750006249845, rtol=1e-12)

    def test_gaussian_matches_linear_derivative(self):
        # (ln h)' = -theta / (2 gamma^2) for the Gaussian branch
        t = build_table(GAUSS, 2.0, 20, 1.0)
        np.testing.assert_allclose(t.values[10 + 20], -0.5, atol=2e-3)
        ks = np.arange(-20, 21)
        np.testing.assert_allclose(t.values, -ks * t.delta / 2.0, atol=2e-3)

    def test_center_is_exactly_zero(self):
        t = build_table(CAUCHY, 0.8, 50, 1.0)
        assert t.values[50] == 0.0

    def test_odd_symmetry(self):
        for params in (CAUCHY, StableParams(1.5, 0.0, 1.0)):
            t = build_table(params, 0.8, 60, 1.0)
            assert np.max(np.abs(t.values + t.values[::-1])) < 1e-12

    def test_sign_pattern(self):
        t = build_table(StableParams(0.5, 0.0, 1.0), 0.8, 80, 1.0)
        assert np.all(t.values[81:] <= 0.0)
        assert np.all(t.values[:80] >= 0.0)

    def test_quadrature_entries_against_independent_density(self):
        # same central-difference formula, densities from scipy
        t = build_table(StableParams(1.5, 0.0, 1.0), 0.8, 40, 1.0)
        d = t.delta
        for k in (-40, -13, 7, 25, 40):
            theta = k * d
            ref = (
                levy_stable.pdf(theta + d, 1.5, 0.0, scale=1.0)
                - levy_stable.pdf(theta - d, 1.5, 0.0, scale=1.0)
            ) / (2.0 * d * levy_stable.pdf(theta, 1.5, 0.0, scale=1.0))
            np.testing.assert_allclose(t.values[k + 40], ref, atol=1e-7)

    def test_convergence_is_second_order(self):
        errs = []
        for n_grid in (100, 200, 400):
            t = build_table(CAUCHY, 0.8, n_grid, 1.0)
            th = np.arange(-n_grid, n_grid + 1) * t.delta
            errs.append(np.max(np.abs(t.values - cauchy_log_deriv(th))))
        assert 3.5 < errs[0] / errs[1] < 4.5
        assert 3.5 < errs[1] / errs[2] < 4.5

    def test_degenerate_density_raises(self):
        # Gaussian with tiny dispersion underflows at the grid edge
        with pytest.raises(DegenerateDensity):
            build_table(StableParams(2.0, 0.0, 0.01), 0.8, 10, 1.0)

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            build_table(CAUCHY, 0.0, 10, 1.0)
        with pytest.raises(ValueError):
            build_table(CAUCHY, 0.8, 0, 1.0)
        with pytest.raises(ValueError):
            build_table(CAUCHY, 0.8, 10, -1.0)

    def test_delta_is_derived(self):
        t = build_table(CAUCHY, 0.8, 400, 1.0)
        assert t.delta == 0.8 / 400
        assert t.values.shape == (801,)


class TestKeying:
    def test_documented_examples(self):
        t = build_table(CAUCHY, 0.8, 400, 1.0)
        assert key_of(t, 0.0) == 0
        assert key_of(t, 0.0031) == 1
        assert key_of(t, 5.0) == 400
        assert key_of(t, -5.0) == -400

    def test_floor_behavior_below_zero(self):
        t = build_table(CAUCHY, 0.8, 400, 1.0)
        # flooring sends small negatives to the cell left of zero
        assert key_of(t, -0.0001) == -1
        assert key_of(t, -0.0031) == -2

    def test_clamp_engages_far_out(self):
        t = build_table(CAUCHY, 0.8, 400, 1.0)
        assert key_of(t, 1e9) == 400
        assert key_of(t, -1e9) == -400

    def test_saturation_constant_outside_domain(self):
        t = build_table(CAUCHY, 0.8, 100, 2.0)
        edge = lookup_grad(t, 10.0)
        assert lookup_grad(t, 1e6) == edge
        assert lookup_grad(t, -1e6) == lookup_grad(t, -10.0)

    def test_scale_applied_at_query_time(self):
        base = build_table(CAUCHY, 0.8, 100, 1.0)
        scaled = base.with_scale(3.0)
        np.testing.assert_array_equal(base.values, scaled.values)
        for theta in (-0.41, -0.003, 0.0, 0.25, 2.0):
            assert lookup_grad(scaled, theta) == 3.0 * lookup_grad(base, theta)

    def test_pull_is_toward_zero(self):
        t = build_table(StableParams(1.5, 0.0, 1.0), 0.8, 200, 1.0)
        rng = np.random.default_rng(0)
        for theta in rng.uniform(-3.0, 3.0, 200):
            assert lookup_grad(t, float(theta)) * theta <= 0.0

    def test_cell_shifted_odd_symmetry(self):
        # off-grid theta in cell k mirrors to cell -k after one shift
        t = build_table(CAUCHY, 0.8, 100, 1.0)
        d = t.delta
        for k in (1, 7, 42, 99):
            theta = (k + 0.5) * d
            assert lookup_grad(t, theta) == -lookup_grad(t, -theta + d)

    def test_vectorized_matches_scalar(self):
        t = build_table(CAUCHY, 0.8, 150, 1.7)
        thetas = np.concatenate([
            np.random.default_rng(1).uniform(-2.0, 2.0, 100),
            [0.0, 1e9, -1e9, 0.7999, -0.8],
        ])
        vec = lookup_grad_many(t, thetas)
        ref = np.array([lookup_grad(t, float(x)) for x in thetas])
        np.testing.assert_array_equal(vec, ref)


class TestSerialization:
    def make(self):
        return build_table(StableParams(1.5, 0.0, 0.9, 0.1), 0.8, 25, 2.5)

    def test_round_trip_bit_exact(self):
        t = self.make()
        u = deserialize(serialize(t))
        assert u.params == t.params
        assert u.epsilon == t.epsilon
        assert u.n_grid == t.n_grid
        assert u.prior_scale_c == t.prior_scale_c
        np.testing.assert_array_equal(u.values, t.values)

    def test_header_only_read(self):
        t = self.make()
        blob = serialize(t)
        meta = read_header(blob[:60])  # values never materialized
        assert meta["alpha"] == 1.5
        assert meta["gamma"] == 0.9
        assert meta["mu"] == 0.1
        assert meta["epsilon"] == 0.8
        assert meta["n_grid"] == 25
        assert meta["prior_scale_c"] == 2.5

    def test_corruption_detected_everywhere(self):
        blob = bytearray(serialize(self.make()))
        for pos in (5, 20, 70, len(blob) // 2, len(blob) - 10):
            broken = bytearray(blob)
            broken[pos] ^= 0xFF
            with pytest.raises(ChecksumMismatch):
                deserialize(bytes(broken))

    def test_version_mismatch(self):
        blob = bytearray(serialize(self.make()))
        struct.pack_into("<I", blob, 4, 99)
        blob[-4:] = struct.pack("<I", __import__("zlib").crc32(bytes(blob[:-4])))
        with pytest.raises(VersionMismatch):
            deserialize(bytes(blob))

    def test_bad_magic(self):
        blob = bytearray(serialize(self.make()))
        blob[0:4] = b"XXXX"
        blob[-4:] = struct.pack("<I", __import__("zlib").crc32(bytes(blob[:-4])))
        with pytest.raises(ValueError):
            deserialize(bytes(blob))

    def test_truncation_rejected(self):
        blob = serialize(self.make())
        with pytest.raises(ValueError):
            deserialize(blob[:10])

    def test_expected_byte_length(self):
        t = self.make()
        # magic+version (8) + six f64/u64 fields (48) + values + crc (4)
        assert len(serialize(t)) == 8 + 48 + 8 * (2 * 25 + 1) + 4


class TestDataclassValidation:
    def test_rejects_wrong_value_length(self):
        with pytest.raises(ValueError):
            DerivTable(CAUCHY, 0.8, 10, 1.0, np.zeros(5))

    def test_rejects_non_finite_values(self):
        v = np.zeros(21)
        v[3] = math.nan
        with pytest.raises(ValueError):
            DerivTable(CAUCHY, 0.8, 10, 1.0, v)
