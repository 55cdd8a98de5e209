"""Gaussian-ring kernel construction, symmetry, and layer tests."""

import math

import numpy as np
import pytest

from equipatch import gmr, tensorkit as tk
from equipatch.errors import ContractError
from equipatch.tensorkit import Tensor


def make_layer(k, c_in, c_out, stride=1, pad=0, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    spec = gmr.ring_spec(k)
    rw = Tensor((rng.standard_normal((c_out, c_in, spec.n_rings)) * scale).astype(np.float32))
    b = Tensor((rng.standard_normal(c_out) * scale).astype(np.float32))
    return gmr.GmrConvLayer(spec, c_in, c_out, rw, b, stride, pad), gmr.build_basis(spec)


class TestRingSpec:
    def test_k6(self):
        spec = gmr.ring_spec(6, 0.5)
        assert spec.n_rings == 3
        np.testing.assert_allclose(spec.radii, [0.0, 1.25, 2.5])
        np.testing.assert_allclose(spec.sigma, [0.625, 0.625, 0.625])

    def test_k1_degenerate(self):
        spec = gmr.ring_spec(1)
        assert spec.n_rings == 1
        assert spec.radii == (0.0,)
        assert spec.sigma[0] > 0

    def test_k11(self):
        spec = gmr.ring_spec(11)
        assert spec.n_rings == 6
        np.testing.assert_allclose(spec.radii, [0, 1, 2, 3, 4, 5])
        np.testing.assert_allclose(spec.sigma, [0.5] * 6)

    def test_radii_strictly_increasing(self):
        for k in range(2, 20):
            spec = gmr.ring_spec(k)
            r = spec.radii
            assert all(b > a for a, b in zip(r, r[1:]))
            assert r[0] == 0.0
            if spec.n_rings > 1:
                assert r[-1] == (k - 1) / 2.0

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            gmr.ring_spec(0)


class TestBasis:
    def test_corner_distance_k6(self):
        d = gmr.grid_distances(6)
        assert abs(d[0, 0] - math.sqrt(12.5)) < 1e-12

    def test_odd_k_center_is_ring0_max(self):
        basis = gmr.build_basis(gmr.ring_spec(7))
        ring0 = basis.values64[0]
        assert ring0[3, 3] == ring0.max()
        # unnormalized center value of ring 0 is exactly exp(0) = 1
        raw = np.exp(-((gmr.grid_distances(7) - 0.0) ** 2) / (2 * basis.spec.sigma[0] ** 2))
        assert raw[3, 3] == 1.0

    def test_k3_matches_scalar_oracle(self):
        spec = gmr.ring_spec(3, 0.5)
        basis = gmr.build_basis(spec)
        # independent scalar evaluation of the ring-1 slice
        raw = np.empty((3, 3))
        for u in range(3):
            for v in range(3):
                d = math.sqrt((u - 1.0) ** 2 + (v - 1.0) ** 2)
                raw[u, v] = math.exp(-((d - spec.radii[1]) ** 2) / (2.0 * spec.sigma[1] ** 2))
        ref = raw / raw.sum()
        assert np.abs(basis.values64[1] - ref).max() < 1e-12
        edge = [ref[0, 1], ref[1, 0], ref[1, 2], ref[2, 1]]
        corner = [ref[0, 0], ref[0, 2], ref[2, 0], ref[2, 2]]
        assert len(set(edge)) == 1
        assert min(edge) > max(corner)

    @pytest.mark.parametrize("k", [1, 2, 3, 5, 6, 7, 8, 9, 10, 11, 12, 16])
    def test_slices_normalized_and_symmetric(self, k):
        basis = gmr.build_basis(gmr.ring_spec(k))
        sums = basis.values64.sum(axis=(1, 2))
        assert np.abs(sums - 1.0).max() < 1e-12
        rot = np.rot90(basis.values64, 1, axes=(1, 2))
        flip = basis.values64[:, :, ::-1]
        assert np.abs(basis.values64 - rot).max() < 1e-12
        assert np.abs(basis.values64 - flip).max() < 1e-12


class TestSynthesize:
    def test_zero_weights_zero_kernel(self):
        layer, basis = make_layer(5, 2, 3)
        layer.ring_weights = Tensor(np.zeros_like(layer.ring_weights.data))
        kern = gmr.synthesize_kernels(layer, basis)
        assert np.all(kern.data == 0)

    def test_one_hot_weight_reproduces_slice(self):
        layer, basis = make_layer(6, 1, 1)
        for i in range(basis.spec.n_rings):
            w = np.zeros((1, 1, basis.spec.n_rings), np.float32)
            w[0, 0, i] = 1.0
            layer.ring_weights = Tensor(w)
            kern = gmr.synthesize_kernels(layer, basis)
            np.testing.assert_allclose(kern.data[0, 0], basis.values[i], atol=1e-7)

    def test_matches_scalar_loop(self):
        layer, basis = make_layer(7, 2, 3, seed=5)
        kern = gmr.synthesize_kernels(layer, basis).data
        w = layer.ring_weights.data
        ref = np.zeros_like(kern, dtype=np.float64)
        for o in range(3):
            for c in range(2):
                for i in range(basis.spec.n_rings):
                    ref[o, c] += float(w[o, c, i]) * basis.values64[i]
        assert np.abs(kern - ref).max() < 1e-6

    def test_spec_mismatch_rejected(self):
        layer, _ = make_layer(5, 1, 1)
        other = gmr.build_basis(gmr.ring_spec(7))
        with pytest.raises(ContractError):
            gmr.synthesize_kernels(layer, other)

    def test_ring_weight_gradients(self):
        layer, basis = make_layer(6, 2, 2, stride=2, pad=2, seed=3)
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((1, 2, 8, 8)).astype(np.float32))

        def f(p):
            lay = gmr.GmrConvLayer(layer.spec, 2, 2, p["rw"], p["b"], 2, 2)
            return tk.tsum(tk.gelu(gmr.gmr_forward(x, lay, basis)))

        errs = tk.grad_check(f, {"rw": layer.ring_weights, "b": layer.bias}, eps=1e-3)
        assert max(errs.values()) < 1e-3


class TestForward:
    def test_zero_weights_constant_bias_maps(self):
        layer, basis = make_layer(5, 3, 4, stride=1, pad=2)
        layer.ring_weights = Tensor(np.zeros_like(layer.ring_weights.data))
        x = Tensor(np.random.default_rng(0).random((2, 3, 10, 10), dtype=np.float32))
        y = gmr.gmr_forward(x, layer, basis).data
        for o in range(4):
            np.testing.assert_allclose(y[:, o], layer.bias.data[o], atol=1e-7)

    def test_output_shape_matches_dense_conv(self):
        layer, basis = make_layer(6, 3, 4, stride=2, pad=2)
        x = Tensor(np.random.default_rng(1).random((2, 3, 16, 16), dtype=np.float32))
        y = gmr.gmr_forward(x, layer, basis)
        dense = tk.conv2d(x, gmr.synthesize_kernels(layer, basis), layer.bias, 2, 2)
        assert y.shape == dense.shape == (2, 4, 8, 8)
        np.testing.assert_array_equal(y.data, dense.data)

    def test_rot90_equivariance_k6(self):
        layer, basis = make_layer(6, 3, 5, stride=2, pad=2, seed=9)
        x = np.random.default_rng(2).random((1, 3, 32, 32), dtype=np.float32)
        y = gmr.gmr_forward(Tensor(x), layer, basis).data
        yr = gmr.gmr_forward(Tensor(np.rot90(x, 1, axes=(-2, -1)).copy()), layer, basis).data
        assert np.abs(yr - np.rot90(y, 1, axes=(-2, -1))).max() < 1e-4

    @pytest.mark.parametrize("trial", range(20))
    def test_rot90_equivariance_exact_geometry_trials(self, trial):
        rng = np.random.default_rng(100 + trial)
        k = int(rng.choice([4, 6, 8]))
        s = int(rng.choice([2, 4]))
        # pick H, pad so that (H + 2p - k) divides the stride exactly
        p = int(rng.integers(0, 3))
        ho = int(rng.integers(3, 7))
        h = (ho - 1) * s + k - 2 * p
        if h < k - 2 * p or h < 4:
            h = k + s * 2
            ho = (h + 2 * p - k) // s + 1
        layer, basis = make_layer(k, 2, 3, stride=s, pad=p, seed=trial)
        x = rng.random((1, 2, h, h), dtype=np.float32)
        y = gmr.gmr_forward(Tensor(x), layer, basis).data
        yr = gmr.gmr_forward(Tensor(np.rot90(x, 1, axes=(-2, -1)).copy()), layer, basis).data
        assert np.abs(yr - np.rot90(y, 1, axes=(-2, -1))).max() < 1e-4


class TestInvarianceReport:
    @pytest.mark.parametrize("k", [5, 6, 7, 8, 9, 10, 11, 12, 16])
    def test_synthesized_kernels_symmetric(self, k):
        layer, basis = make_layer(k, 2, 3, seed=k)
        rep = gmr.kernel_invariance_report(gmr.synthesize_kernels(layer, basis))
        assert rep["rot90_dev"] < 1e-6
        assert rep["flip_dev"] < 1e-6

    def test_random_dense_kernel_reported(self):
        kern = np.random.default_rng(4).standard_normal((2, 2, 7, 7)).astype(np.float32)
        rep = gmr.kernel_invariance_report(kern)
        assert rep["rot90_dev"] > 0.1  # generic asymmetry, order of the value range
        assert rep["flip_dev"] > 0.1

    def test_smooth_profile_continuous_deviation(self):
        # canonical smooth radial profile: equal ring weights
        spec = gmr.ring_spec(11)
        basis = gmr.build_basis(spec)
        kern = basis.values64.sum(axis=0)
        rep = gmr.kernel_invariance_report(kern[None, None])
        assert rep["continuous_dev"] < 0.05 * np.abs(kern).max()

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            gmr.kernel_invariance_report(np.zeros((2, 3, 4)))


class TestParamCount:
    def test_k6_example(self):
        layer, _ = make_layer(6, 3, 32)
        counts = gmr.gmr_param_count(layer)
        assert counts["params"] == 320
        assert counts["dense_equivalent"] == 3488
        assert abs(counts["ratio"] - 10.9) < 0.1

    def test_k11_per_filter_ratio(self):
        layer, _ = make_layer(11, 16, 16)
        counts = gmr.gmr_param_count(layer)
        # ignoring bias the ratio tends to 121/6
        assert abs(counts["ratio"] - 121 / 6) < 0.5

    @pytest.mark.parametrize("k", range(2, 17))
    def test_strictly_fewer_params(self, k):
        layer, _ = make_layer(k, 2, 3)
        counts = gmr.gmr_param_count(layer)
        assert counts["params"] < counts["dense_equivalent"]

    def test_reported_memory_figure_order(self):
        # 0.79M params at 4 bytes each lands near the reported 3.0 MB
        assert abs(0.79e6 * 4 / 1e6 - 3.0) < 0.5


class TestCsvExport:
    def test_grid_lines(self):
        basis = gmr.build_basis(gmr.ring_spec(4))
        lines = gmr.grid_csv_lines(basis.values[0])
        assert len(lines) == 4
        assert all(len(line.split(",")) == 4 for line in lines)
        parsed = np.array([[float(v) for v in line.split(",")] for line in lines], np.float32)
        np.testing.assert_array_equal(parsed, basis.values[0])
