import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multitransnet.benchmarks import make_problem, training_set
from multitransnet.geometry import (
    BallCover,
    DegenerateSamplingError,
    DomainPartition,
    LevelSetRegion,
    OutOfDomainError,
    ParamAxis,
    box_facets,
    box_membership,
    classify,
    classify_many,
    latin_hypercube_test_points,
    sample_boundary,
    sample_interface,
    sample_interior,
    sphere_param,
    write_cloud_csv,
)


def square(lo=0.0, hi=2.0):
    lo, hi = np.full(2, lo), np.full(2, hi)
    return LevelSetRegion(box_membership(lo, hi), lo, hi)


def test_ball_cover_rejects_nonpositive_radius():
    with pytest.raises(ValueError):
        BallCover([0.0, 0.0], 0.0)


class TestSampleInterior:
    def test_square_grid_count(self):
        cloud = sample_interior(square(), 2.0 / 50)
        assert len(cloud) == 49**2

    def test_empty_region(self):
        r = LevelSetRegion(lambda x: np.ones(len(x)), [0.0, 0.0], [1.0, 1.0])
        assert len(sample_interior(r, 0.1)) == 0

    def test_disk_matches_brute_force(self):
        disk = LevelSetRegion(lambda x: np.sum(x**2, axis=1) - 1.0, [-1.0, -1.0], [1.0, 1.0])
        cloud = sample_interior(disk, 0.5)
        brute = sum(
            1
            for i in range(5)
            for j in range(5)
            if (-1 + 0.5 * i) ** 2 + (-1 + 0.5 * j) ** 2 - 1.0 < 0
        )
        assert len(cloud) == brute == 9

    def test_points_strictly_inside_every_region(self):
        prob = make_problem("P5")
        for k, region in enumerate(prob.partition.regions):
            cloud = sample_interior(region, 2.0 / 56, label=k)
            m = region(cloud.points)
            assert np.all(m < 0)
            # grid nodes that round onto an interface may tie to a lower index
            clear = m < -1e-12
            assert np.all(classify_many(prob.partition, cloud.points[clear]) == k)

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            sample_interior(square(), 0.0)


class TestSampleBoundary:
    def test_square_edges(self):
        part = DomainPartition((square(),), (), box_facets([0, 0], [2, 2]))
        cloud = sample_boundary(part, 51)
        assert len(cloud) == 204
        assert cloud.role == "boundary" and cloud.normals is None

    def test_cube_faces(self):
        lo, hi = np.zeros(3), np.ones(3)
        part = DomainPartition((LevelSetRegion(box_membership(lo, hi), lo, hi),), (), box_facets(lo, hi))
        assert len(sample_boundary(part, 31)) == 5766

    def test_circle_single_point_is_parametrization_start(self):
        param, axes = sphere_param([0.0, 0.0], 2.0)
        from multitransnet.geometry import BoundaryFacet

        disk = LevelSetRegion(lambda x: np.sum(x**2, axis=1) - 4.0, [-2, -2], [2, 2])
        part = DomainPartition((disk,), (), (BoundaryFacet(param, axes, 0),))
        cloud = sample_boundary(part, 1)
        np.testing.assert_allclose(cloud.points, [[2.0, 0.0]])

    def test_zero_count_rejected(self):
        part = DomainPartition((square(),), (), box_facets([0, 0], [2, 2]))
        with pytest.raises(ValueError):
            sample_boundary(part, 0)


class TestSampleInterface:
    def test_circle_120(self):
        prob = make_problem("P3")
        cloud = sample_interface(prob.partition.interfaces[0], 120)
        assert len(cloud) == 120 and cloud.pair == (0, 1)
        r = cloud.points - 1.0
        np.testing.assert_allclose(np.sum(r**2, axis=1), 0.5, atol=1e-12)
        # outward normals, equi-angular spacing
        np.testing.assert_allclose(cloud.normals, r / math.sqrt(0.5), atol=1e-12)
        ang = np.unwrap(np.arctan2(r[:, 1], r[:, 0]))
        np.testing.assert_allclose(np.diff(ang), 2 * np.pi / 120, atol=1e-12)

    def test_ellipsoid_counts(self):
        prob = make_problem("P6")
        assert len(sample_interface(prob.partition.interfaces[0], (60, 30))) == 1800

    def test_flower_radii(self):
        # r(theta) = 0.5 - 0.1 cos(5 theta) at the four quarter angles
        spec = make_problem("P5").partition.interfaces[1]
        cloud = sample_interface(spec, 4)
        radii = np.linalg.norm(cloud.points, axis=1)
        expected = [0.5 - 0.1 * math.cos(5 * t) for t in (0, math.pi / 2, math.pi, 3 * math.pi / 2)]
        np.testing.assert_allclose(radii, expected, atol=1e-15)
        np.testing.assert_allclose(radii, [0.4, 0.5, 0.6, 0.5], atol=1e-15)

    @pytest.mark.parametrize("pid", ["P1", "P3", "P4", "P5", "P6", "P7"])
    def test_normals_unit_and_oriented(self, pid):
        prob = make_problem(pid)
        tr = training_set(prob)
        for cloud in tr.interfaces:
            i, j = cloud.pair
            np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-12)
            eps = 1e-6
            assert np.all(classify_many(prob.partition, cloud.points - eps * cloud.normals) == i)
            assert np.all(classify_many(prob.partition, cloud.points + eps * cloud.normals) == j)

    @pytest.mark.parametrize("pid", ["P3", "P5", "P6", "P7"])
    def test_points_on_the_level_set(self, pid):
        prob = make_problem(pid)
        for cloud in training_set(prob).interfaces:
            i, j = cloud.pair
            assert np.max(np.abs(prob.partition.regions[i](cloud.points))) <= 1e-10

    @pytest.mark.parametrize("pid", ["P3", "P5", "P6", "P7"])
    def test_normals_orthogonal_to_tangents(self, pid):
        spec = make_problem(pid).partition.interfaces[0 if pid != "P5" else 1]
        rng = np.random.default_rng(0)
        t = np.column_stack([rng.uniform(ax.lo + 0.1, ax.hi - 0.1, 50) for ax in spec.axes])
        _, n = spec.param(t)
        h = 1e-6
        for c in range(t.shape[1]):
            dt = np.zeros_like(t)
            dt[:, c] = h
            tangent = (spec.param(t + dt)[0] - spec.param(t - dt)[0]) / (2 * h)
            tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
            assert np.max(np.abs(np.sum(tangent * n, axis=1))) <= 1e-6


class TestParamAxis:
    def test_modes(self):
        np.testing.assert_allclose(ParamAxis(0, 1, "closed").nodes(3), [0, 0.5, 1])
        np.testing.assert_allclose(ParamAxis(0, 1, "periodic").nodes(4), [0, 0.25, 0.5, 0.75])
        np.testing.assert_allclose(ParamAxis(0, 1, "open").nodes(2), [0.25, 0.75])

    def test_zero_nodes(self):
        with pytest.raises(ValueError):
            ParamAxis(0, 1).nodes(0)


class TestClassify:
    def setup_method(self):
        self.part = make_problem("P3").partition

    def test_center_inside(self):
        assert classify(self.part, [1.0, 1.0]) == 0

    def test_corner_outside_circle(self):
        assert classify(self.part, [0.0, 0.0]) == 1

    def test_tie_goes_to_lower_index(self):
        p = [1.0 + math.sqrt(0.5), 1.0]
        assert classify(self.part, p) == 0

    def test_out_of_domain(self):
        with pytest.raises(OutOfDomainError):
            classify(self.part, [3.0, 3.0])
        assert classify_many(self.part, np.array([[3.0, 3.0]]), strict=False)[0] == -1

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 2), st.floats(0, 2))
    def test_label_has_nonpositive_membership(self, x, y):
        k = classify(self.part, [x, y])
        assert self.part.regions[k](np.array([[x, y]]))[0] <= 1e-12


class TestLatinHypercube:
    def test_one_point_per_stratum_1d(self):
        r = LevelSetRegion(box_membership([0.0], [1.0]), [0.0], [1.0])
        part = DomainPartition((r,))
        pts, lab = latin_hypercube_test_points(part, 4, seed=3)
        assert sorted(np.floor(pts[:, 0] * 4).astype(int)) == [0, 1, 2, 3]
        assert np.all(lab == 0)

    def test_poisson_test_set_size(self):
        prob = make_problem("P2")
        n = 4 * (49**2 + 204)
        pts, lab = latin_hypercube_test_points(prob.partition, n, seed=0)
        assert pts.shape == (n, 2)

    def test_shell_membership(self):
        prob = make_problem("P7")
        pts, lab = latin_hypercube_test_points(prob.partition, 2000, seed=1)
        r2 = np.sum(pts**2, axis=1)
        assert np.all((r2 >= 0.151**2) & (r2 <= 0.911**2))
        assert set(np.unique(lab)) == {0, 1}

    def test_reproducible(self):
        prob = make_problem("P5")
        a = latin_hypercube_test_points(prob.partition, 500, seed=7)
        b = latin_hypercube_test_points(prob.partition, 500, seed=7)
        assert a[0].tobytes() == b[0].tobytes() and np.array_equal(a[1], b[1])

    def test_degenerate_domain(self):
        r = LevelSetRegion(lambda x: np.sum((x - 0.5) ** 2, axis=1) - 1e-12, [0, 0], [1, 1])
        with pytest.raises(DegenerateSamplingError):
            latin_hypercube_test_points(DomainPartition((r,)), 100, seed=0)


def test_cloud_csv(tmp_path):
    cloud = sample_interface(make_problem("P3").partition.interfaces[0], 8)
    path = tmp_path / "gamma.csv"
    write_cloud_csv(cloud, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,role,k,nx,ny"
    assert len(lines) == 9 and lines[1].split(",")[2:4] == ["interface", "0-1"]
