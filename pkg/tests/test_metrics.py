import math

import numpy as np
import pytest
from scipy import stats
from scipy.optimize import minimize_scalar

from conftest import random_stack
from mflow import metrics
from mflow.data import make_swiss_roll
from mflow.flows import FlowStack
from mflow.objective import LatentSplit, LossConfig, Model, pixel_rejection_loss
from mflow.rng import SplitMix64

LOG_2PI = math.log(2 * math.pi)


def identity_model(D, d):
    return Model(FlowStack([], D), LatentSplit(D, d))


class TestNLL:
    def test_single_point_at_origin(self):
        assert metrics.nll(identity_model(2, 1), np.zeros((1, 2))) == pytest.approx(LOG_2PI, abs=1e-12)

    def test_gaussian_entropy(self):
        D, n = 3, 20_000
        x = SplitMix64(5).normal(n * D).reshape(n, D)
        per = metrics.nll_per_sample(identity_model(D, 1), x)
        expected = 0.5 * D * (1 + LOG_2PI)
        assert abs(per.mean() - expected) < 3 * per.std() / math.sqrt(n)

    def test_matches_objective_likelihood(self):
        m = Model(random_stack(4, seed=2), LatentSplit(4, 2))
        x = np.random.default_rng(2).normal(size=(64, 4))
        loss, _ = pixel_rejection_loss(m.flow, x, m.split, LossConfig(lam=0.0))
        assert metrics.nll(m, x) == pytest.approx(loss, abs=1e-10)

    def test_shards_agree_with_single_pass(self, monkeypatch):
        m = Model(random_stack(2, seed=3), LatentSplit(2, 1))
        x = np.random.default_rng(3).normal(size=(9000, 2))
        one = metrics.nll(m, x)
        monkeypatch.setenv("MFLOW_THREADS", "3")
        assert metrics.nll(m, x) == pytest.approx(one, rel=1e-12)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_row_reported(self):
        x = np.zeros((5, 2))
        x[3, 1] = 1e200
        with pytest.raises(FloatingPointError, match="row 3"):
            metrics.nll(identity_model(2, 1), x)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            metrics.nll(identity_model(2, 1), np.zeros((1, 3)))


class TestBPD:
    def test_reference_pair(self):
        assert abs(metrics.bpd(7462.32, 3072) - 3.50) <= 0.01

    def test_zero(self):
        assert metrics.bpd(0.0, 5) == 0.0

    def test_unit(self):
        assert metrics.bpd(7 * math.log(2.0), 7) == 1.0

    def test_bad_dimension(self):
        with pytest.raises(ValueError):
            metrics.bpd(1.0, 0)


class TestReconMSE:
    def test_zero_when_off_coordinates_vanish(self):
        x = np.random.default_rng(0).normal(size=(10, 3))
        x[:, 2] = 0.0
        assert metrics.recon_mse(identity_model(3, 2), x) == 0.0

    def test_zeroed_coordinate(self):
        assert metrics.recon_mse(identity_model(2, 1), np.array([[0.0, 1.0]])) == 0.5


class TestManifoldDistance:
    def test_on_circle(self):
        th = np.linspace(0, 2 * math.pi, 17)
        pts = np.stack([np.cos(th), np.sin(th)], axis=1)
        assert metrics.manifold_distance(pts, "unit-circle") < 1e-12

    def test_point_outside_circle(self):
        assert metrics.manifold_distance(np.array([[2.0, 0.0]]), "unit-circle") == 1.0

    def test_unknown_descriptor(self):
        with pytest.raises(ValueError, match="unknown manifold"):
            metrics.manifold_distance(np.zeros((1, 2)), "torus")

    def test_swiss_roll_matches_bounded_search(self):
        """Perturbed roll points against a dense scalar search over the curve parameter."""
        x = make_swiss_roll(40, 0.5, seed=9).points
        got = metrics.manifold_distance_per_point(x, "swiss-roll")
        lo, hi = 1.5 * math.pi, 4.5 * math.pi
        for p, g in zip(x, got):
            def planar(t):
                return (t * math.cos(t) - p[0]) ** 2 + (t * math.sin(t) - p[2]) ** 2

            grid = np.linspace(lo, hi, 20_000)
            t0 = grid[np.argmin([planar(t) for t in grid])]
            res = minimize_scalar(planar, bounds=(max(lo, t0 - 0.01), min(hi, t0 + 0.01)), method="bounded",
                                  options={"xatol": 1e-12})
            dy = p[1] - min(max(p[1], 0.0), 21.0)
            assert g == pytest.approx(math.sqrt(res.fun + dy * dy), abs=1e-6)

    def test_embedded_gaussian_off_manifold_point(self):
        from mflow.data import embed

        u = np.array([[0.3, -0.2]])
        on = embed(u, 2, 5)
        assert metrics.manifold_distance(on, "embedded-gaussian:2:5") < 1e-10
        far = on + 0.05 * np.ones((1, 5))
        assert 0 < metrics.manifold_distance(far, "embedded-gaussian:2:5") <= 0.05 * math.sqrt(5)


def test_evaluate_bundles_metrics():
    m = identity_model(2, 1)
    x = np.array([[0.0, 0.0], [0.0, 1.0]])
    s = metrics.evaluate(m, x, np.array([[2.0, 0.0]]), "unit-circle")
    assert s.bpd == pytest.approx(s.nll_nats / (2 * math.log(2)), abs=1e-15)
    assert s.recon_mse == 0.25 and s.manifold_dist == 1.0
    assert len(s.csv_row().split(",")) == 4


class TestManifoldNLL:
    def test_identity_flow_is_marginal_gaussian(self):
        x = np.array([[0.3, 5.0], [-1.2, 0.0]])
        got = metrics.manifold_nll_per_sample(identity_model(2, 1), x)
        np.testing.assert_allclose(got, -stats.norm.logpdf(x[:, 0]), atol=1e-9)

    def test_scaled_chart_matches_change_of_variables(self):
        from mflow.flows import ActNorm, LayerSpec

        layer = ActNorm(LayerSpec("actnorm", 2))
        layer.params["scale"][:] = [2.0, 7.0]
        layer.params["bias"][:] = [0.5, -1.0]
        m = Model(FlowStack([layer], 2), LatentSplit(2, 1))
        x = np.random.default_rng(0).normal(size=(20, 2))
        # u = 2 x1 + 0.5 ~ N(0,1)  <=>  x1 ~ N(-0.25, 0.5^2)
        expected = -stats.norm(-0.25, 0.5).logpdf(x[:, 0])
        np.testing.assert_allclose(metrics.manifold_nll_per_sample(m, x), expected, atol=1e-8)

    def test_chain_of_identity_stages(self):
        x = np.random.default_rng(1).normal(size=(10, 4))
        chain = [identity_model(4, 2), identity_model(2, 1)]
        np.testing.assert_allclose(metrics.manifold_nll_per_sample(chain, x), -stats.norm.logpdf(x[:, 0]),
                                   atol=1e-9)
        assert metrics.manifold_nll(chain, x) == pytest.approx(-stats.norm.logpdf(x[:, 0]).mean(), abs=1e-9)
