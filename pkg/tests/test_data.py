import math

import numpy as np
import pytest
from scipy import stats
from scipy.spatial import cKDTree

from mflow.data import (
    CSVError,
    Dataset,
    load_csv,
    make_circle,
    make_embedded_gaussian,
    make_swiss_roll,
    parse_data_spec,
    train_heldout_split,
    write_csv,
)
from mflow.metrics import manifold_distance_per_point


class TestCircle:
    def test_noise_free_points_on_unit_circle(self):
        x = make_circle(500, 0.0, seed=3).points
        np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)

    def test_seed_reproducible(self):
        assert make_circle(100, 0.01, 7).points.tobytes() == make_circle(100, 0.01, 7).points.tobytes()
        assert make_circle(100, 0.01, 7).points.tobytes() != make_circle(100, 0.01, 8).points.tobytes()

    def test_mean_radius_with_noise(self):
        r = np.linalg.norm(make_circle(10_000, 0.01, seed=0).points, axis=1)
        assert abs(r.mean() - 1.0) < 0.002

    def test_metadata(self):
        ds = make_circle(3)
        assert ds.manifold_dim == 1 and ds.descriptor == "unit-circle"

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            make_circle(0)
        with pytest.raises(ValueError):
            make_circle(5, -1.0)


class TestEmbeddedGaussian:
    def test_curve_is_locally_one_dimensional(self):
        x = make_embedded_gaussian(2000, 1, 2, seed=1).points
        _, idx = cKDTree(x).query(x[:200], k=10)
        for nb in idx:
            patch = x[nb] - x[nb].mean(axis=0)
            sv = np.linalg.svd(patch, compute_uv=False)
            assert sv[1] < 0.05 * sv[0]

    def test_seed_reproducible(self):
        a = make_embedded_gaussian(50, 2, 5, seed=4, noise_sigma=0.1).points
        b = make_embedded_gaussian(50, 2, 5, seed=4, noise_sigma=0.1).points
        assert a.tobytes() == b.tobytes()

    def test_all_seeds_share_the_manifold(self):
        for seed in (0, 1, 2):
            x = make_embedded_gaussian(100, 2, 6, seed=seed).points
            assert manifold_distance_per_point(x, "embedded-gaussian:2:6").max() < 1e-9

    def test_guards(self):
        with pytest.raises(ValueError):
            make_embedded_gaussian(0, 1, 2)
        with pytest.raises(ValueError):
            make_embedded_gaussian(10, 3, 3)


class TestSwissRoll:
    def test_radius_equals_parameter(self):
        x = make_swiss_roll(1000, 0.0, seed=2).points
        r = np.hypot(x[:, 0], x[:, 2])
        t = np.arctan2(x[:, 2], x[:, 0])
        # recover t from the angle by unwrapping against the radius
        k = np.round((r - t) / (2 * math.pi))
        np.testing.assert_allclose(t + 2 * math.pi * k, r, atol=1e-12)

    def test_bounding_box(self):
        a = make_swiss_roll(500, 0.0, seed=5).points
        assert a.tobytes() == make_swiss_roll(500, 0.0, seed=5).points.tobytes()
        assert np.all(np.isfinite(a))
        assert a[:, 1].min() >= 0 and a[:, 1].max() <= 21
        assert np.abs(a[:, [0, 2]]).max() <= 4.5 * math.pi + 1e-12

    def test_parameter_histogram_uniform(self):
        x = make_swiss_roll(10_000, 0.0, seed=11).points
        t = np.hypot(x[:, 0], x[:, 2])
        counts, _ = np.histogram(t, bins=20, range=(1.5 * math.pi, 4.5 * math.pi))
        assert stats.chisquare(counts).pvalue > 0.01


@pytest.mark.parametrize(
    "make",
    [
        lambda: make_circle(300, 0.0, 1),
        lambda: make_embedded_gaussian(300, 2, 5, 1),
        lambda: make_swiss_roll(300, 0.0, 1),
    ],
    ids=["circle", "embedded-gaussian", "swiss-roll"],
)
def test_noise_free_points_satisfy_descriptor(make):
    ds = make()
    assert manifold_distance_per_point(ds.points, ds.descriptor).max() < 1e-12


class TestDataset:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[0.0, np.nan]]))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 2)))


class TestSplit:
    def test_partition_is_deterministic_and_disjoint(self):
        ds = make_circle(1000, 0.01, 0)
        tr, ho = train_heldout_split(ds, seed=3)
        tr2, ho2 = train_heldout_split(ds, seed=3)
        assert tr.points.tobytes() == tr2.points.tobytes()
        assert tr.n + ho.n == 1000
        assert 50 < ho.n < 150

    def test_tiny_dataset_falls_back_to_training_rows(self):
        tr, ho = train_heldout_split(make_circle(1), seed=0)
        assert tr.n == 1 and ho.n == 1


class TestCSV:
    def test_two_by_two(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("1,2\n3,4\n")
        np.testing.assert_array_equal(load_csv(p).points, [[1, 2], [3, 4]])

    def test_tab_delimited_with_header(self, tmp_path):
        p = tmp_path / "a.tsv"
        p.write_text("x\ty\n1\t2\n")
        np.testing.assert_array_equal(load_csv(p, header=True).points, [[1, 2]])

    def test_auto_header(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("x1,x2\n1,2\n")
        assert load_csv(p, header="auto").points.tolist() == [[1.0, 2.0]]
        p.write_text("3,4\n1,2\n")
        assert load_csv(p, header="auto").points.tolist() == [[3.0, 4.0], [1.0, 2.0]]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("")
        with pytest.raises(CSVError, match="no rows"):
            load_csv(p)

    def test_ragged_rows(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("1,2\n3\n")
        with pytest.raises(CSVError, match="line 2"):
            load_csv(p)

    def test_parse_error_names_position(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("1,2\n3,abc\n")
        with pytest.raises(CSVError, match="line 2, column 2"):
            load_csv(p)

    def test_round_trip_exact(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(50, 3)) * 10.0 ** np.arange(-5, 10, 5)
        p = tmp_path / "rt.csv"
        write_csv(p, x)
        assert load_csv(p).points.tobytes() == x.tobytes()


class TestDataSpec:
    def test_generator_spec_matches_direct_call(self):
        a = parse_data_spec("circle:n=20,sigma=0.01,seed=4")
        assert a.points.tobytes() == make_circle(20, 0.01, 4).points.tobytes()
        assert a.descriptor == "unit-circle"

    def test_embedded_gaussian_spec(self):
        a = parse_data_spec("embedded_gaussian:n=5,d=2,D=4,seed=1")
        assert a.points.shape == (5, 4) and a.descriptor == "embedded-gaussian:2:4"

    def test_unknown_argument(self):
        with pytest.raises(ValueError, match="bad argument"):
            parse_data_spec("circle:n=5,radius=2")

    def test_path_falls_through_to_csv(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("0.5,0.25\n")
        assert parse_data_spec(str(p)).points.tolist() == [[0.5, 0.25]]
