import math

import numpy as np
import pytest

from conftest import eight_layer_specs, random_stack
from mflow.autodiff import numerical_jacobian
from mflow.flows import (
    SCALE_BOUND,
    ActNorm,
    AffineCoupling,
    FlowStack,
    GaussianPrior,
    InvertibleLinear,
    LayerSpec,
    gaussian_log_density,
    glow_specs,
    stack_forward,
    stack_inverse,
)
from mflow.rng import SplitMix64


def _log_abs_det(f, x):
    J = numerical_jacobian(lambda y: f.forward(y)[0], x, 1e-5)
    return np.linalg.slogdet(J)[1]


class TestLayerSpec:
    def test_coupling_needs_two_dims(self):
        with pytest.raises(ValueError):
            LayerSpec("affine_coupling", 1)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown layer kind"):
            LayerSpec("squeeze", 4)


class TestAffineCoupling:
    def test_identity_at_init(self, rng):
        layer = AffineCoupling(LayerSpec("affine_coupling", 4, (8, 8)), SplitMix64(3))
        x = rng.normal(size=(5, 4))
        z, ld = layer.forward(x)
        np.testing.assert_array_equal(z, x)
        np.testing.assert_array_equal(ld, np.zeros(5))

    def test_constant_log_scale_doubles_active_coordinate(self):
        layer = AffineCoupling(LayerSpec("affine_coupling", 2, (), "even"))
        # output bias (raw_s, t); bounded scale gives s = ln 2 exactly
        layer.params["b_out"][:] = [SCALE_BOUND * math.atanh(math.log(2.0) / SCALE_BOUND), 0.0]
        z, ld = layer.forward(np.array([[0.4, 1.5]]))
        np.testing.assert_allclose(z, [[0.4, 3.0]], rtol=1e-15)
        assert ld[0] == pytest.approx(math.log(2.0), abs=1e-15)

    def test_round_trip_random_params(self):
        f = FlowStack([AffineCoupling(LayerSpec("affine_coupling", 8, (16,), "odd"))], 8)
        f.randomize(SplitMix64(11), scale=0.5)
        x = np.random.default_rng(2).normal(size=(100, 8))
        back, _ = f.inverse(f.forward(x)[0])
        assert np.max(np.abs(back - x)) < 1e-10

    def test_masks_partition_coordinates(self):
        even = AffineCoupling(LayerSpec("affine_coupling", 5, (), "even"))
        odd = AffineCoupling(LayerSpec("affine_coupling", 5, (), "odd"))
        assert even.passive.tolist() == [0, 2, 4] and even.active.tolist() == [1, 3]
        assert odd.passive.tolist() == [1, 3] and odd.active.tolist() == [0, 2, 4]


class TestActNorm:
    def test_identity_before_init(self, rng):
        layer = ActNorm(LayerSpec("actnorm", 3))
        x = rng.normal(size=(4, 3))
        z, ld = layer.forward(x)
        np.testing.assert_array_equal(z, x)
        np.testing.assert_array_equal(ld, 0.0)

    def test_diagonal_log_det(self):
        layer = ActNorm(LayerSpec("actnorm", 2))
        layer.params["scale"][:] = [2.0, 3.0]
        _, ld = layer.forward(np.zeros((1, 2)))
        assert ld[0] == pytest.approx(math.log(6.0), abs=1e-15)

    def test_data_dependent_init_moments(self, rng):
        layer = ActNorm(LayerSpec("actnorm", 4))
        x = rng.normal(loc=[1.0, -3.0, 0.0, 10.0], scale=[0.1, 2.0, 5.0, 1.0], size=(256, 4))
        layer.initialize(x)
        z, _ = layer.forward(x)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(z.var(axis=0), 1.0, atol=1e-6)
        assert layer.initialized

    def test_zero_scale_is_an_error(self):
        layer = ActNorm(LayerSpec("actnorm", 2))
        layer.params["scale"][:] = [1.0, 0.0]
        with pytest.raises(ValueError, match="zero"):
            layer.forward(np.ones((1, 2)))


class TestInvertibleLinear:
    def test_identity_at_init(self, rng):
        layer = InvertibleLinear(LayerSpec("invertible_linear", 3))
        x = rng.normal(size=(4, 3))
        z, ld = layer.forward(x)
        np.testing.assert_allclose(z, x, atol=0)
        np.testing.assert_array_equal(ld, 0.0)

    def test_unit_determinant(self):
        layer = InvertibleLinear(LayerSpec("invertible_linear", 2))
        layer.params["log_diag"][:] = [math.log(2.0), math.log(0.5)]
        z, ld = layer.forward(np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(z, [[2.0, 0.5]])
        assert ld[0] == pytest.approx(0.0, abs=1e-15)

    def test_random_lu_matches_numerical_jacobian(self):
        for seed in range(5):
            f = FlowStack([InvertibleLinear(LayerSpec("invertible_linear", 6))], 6)
            f.randomize(SplitMix64(seed), scale=0.5)
            x = np.random.default_rng(seed).normal(size=6)
            assert abs(f.forward(x)[1] - _log_abs_det(f, x)) < 1e-6

    def test_near_singular_rejected(self):
        layer = InvertibleLinear(LayerSpec("invertible_linear", 2))
        layer.params["log_diag"][:] = [0.0, -40.0]
        with pytest.raises(ValueError, match="near-singular"):
            layer.forward(np.ones((1, 2)))


class TestFlowStack:
    def test_empty_stack_is_identity(self):
        f = FlowStack([], 3)
        x = np.array([0.1, -0.2, 0.3])
        z, ld = stack_forward(f, x)
        np.testing.assert_array_equal(z, x)
        assert ld == 0.0

    def test_log_det_additivity_diagonal_layers(self):
        a = ActNorm(LayerSpec("actnorm", 2))
        a.params["scale"][:] = [2.0, 3.0]
        b = InvertibleLinear(LayerSpec("invertible_linear", 2))
        b.params["log_diag"][:] = [math.log(2.0), math.log(0.5)]
        f = FlowStack([a, b], 2)
        _, ld = f.forward(np.array([0.3, 0.4]))
        assert ld == pytest.approx(math.log(6.0), abs=1e-14)

    def test_random_eight_layer_round_trip(self):
        f = random_stack(8, seed=4)
        x = np.random.default_rng(4).normal(size=(100, 8))
        assert np.max(np.abs(stack_inverse(f, f.forward(x)[0]) - x)) < 1e-8

    @pytest.mark.parametrize("D", [2, 4, 8, 16])
    def test_round_trip_1000_points(self, D):
        f = random_stack(D, seed=D)
        x = np.random.default_rng(D).normal(size=(1000, D))
        z, ld = f.forward(x)
        back, ld_inv = f.inverse(z)
        assert np.max(np.abs(back - x)) < 1e-8
        np.testing.assert_allclose(ld, -ld_inv, atol=1e-8)

    @pytest.mark.parametrize("D", [2, 3, 4, 8])
    def test_log_det_matches_numerical_jacobian(self, D):
        for seed in range(4):
            f = random_stack(D, seed=100 + seed)
            x = np.random.default_rng(seed).normal(size=D)
            assert abs(f.forward(x)[1] - _log_abs_det(f, x)) < 1e-5

    def test_log_det_is_exact_sum_of_layers(self):
        f = random_stack(4, seed=9)
        x = np.random.default_rng(9).normal(size=(7, 4))
        _, dets = f.forward_layers(x)
        total = np.zeros(7)
        for d in dets:
            total = total + d
        assert f.forward(x)[1].tobytes() == total.tobytes()

    @pytest.mark.parametrize("D", [1, 2, 5])
    def test_fresh_stack_is_identity(self, D):
        f = FlowStack.from_specs(glow_specs(D, 3, (16, 16)), D, seed=5)
        x = np.random.default_rng(5).normal(size=(50, D))
        z, ld = f.forward(x)
        np.testing.assert_allclose(z, x, atol=1e-12)
        np.testing.assert_allclose(ld, 0.0, atol=1e-12)

    def test_flat_parameter_round_trip(self):
        f = random_stack(4, seed=1)
        theta = f.get_flat()
        g = FlowStack.from_specs(eight_layer_specs(4), 4, seed=77)
        g.set_flat(theta)
        assert g.get_flat().tobytes() == theta.tobytes()

    def test_half_log_det_G_is_negative_forward_log_det(self):
        """0.5 log|det(J_inv^T J_inv)| at f(x) equals -log|det J_f(x)|."""
        f = random_stack(3, seed=21)
        x = np.random.default_rng(21).normal(size=3)
        z, ld = f.forward(x)
        J_inv = numerical_jacobian(lambda y: f.inverse(y)[0], z, 1e-5)
        half_log_det_G = 0.5 * np.linalg.slogdet(J_inv.T @ J_inv)[1]
        assert half_log_det_G == pytest.approx(-ld, abs=1e-5)


class TestGaussianPrior:
    def test_origin_two_dims(self):
        assert gaussian_log_density(GaussianPrior(2), np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)

    def test_unit_point_one_dim(self):
        val = gaussian_log_density(GaussianPrior(1), np.array([1.0]))
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-15)
        assert round(val, 4) == -1.4189

    def test_factorization(self, rng):
        z = rng.normal(size=(10, 5))
        joint = GaussianPrior(5).log_density(z)
        split = GaussianPrior(2).log_density(z[:, :2]) + GaussianPrior(3).log_density(z[:, 2:])
        np.testing.assert_allclose(joint, split, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gaussian_log_density(GaussianPrior(3), np.zeros(2))
