"""Tests for signed projection, density/resolution selection, rasterization."""

import numpy as np
import pytest

from terrafill import (
    EmptyCloud,
    EmptyProjection,
    InvalidParameter,
    ParseError,
    PointCloud,
)
from terrafill.bspline import BSplineSurface, uniform_clamped_knots
from terrafill.heightfield import (
    HeightField,
    ProjectionSet,
    choose_resolution,
    estimate_density,
    project_cloud,
    rasterize,
    read_heightfield,
    write_heightfield,
    write_pgm_preview,
)


def greville(knots, degree):
    return np.array(
        [knots[i + 1: i + degree + 1].mean() for i in range(len(knots) - degree - 1)]
    )


def make_surface(nu=8, nv=8, z=None, span=1.0):
    """Surface with x(u)=span*u, y(v)=span*v and optional height net."""
    ku = uniform_clamped_knots(nu, 3)
    kv = uniform_clamped_knots(nv, 3)
    ctrl = np.zeros((nu, nv, 3))
    ctrl[:, :, 0] = span * greville(ku, 3)[:, None]
    ctrl[:, :, 1] = span * greville(kv, 3)[None, :]
    if z is not None:
        ctrl[:, :, 2] = z
    return BSplineSurface(3, 3, ku, kv, ctrl)


def make_projections(uv, distances):
    """Hand-built projection set for rasterization tests."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.asarray(distances, dtype=np.float64)
    return ProjectionSet(
        params=uv,
        feet=np.zeros((len(uv), 3)),
        signed_distances=d,
        source_indices=np.arange(len(uv)),
        invalid_indices=np.array([], dtype=np.intp),
    )


class TestProjectCloud:
    def test_plane_signs(self):
        s = make_surface(z=0.0, span=4.0)
        rng = np.random.default_rng(200)
        base = rng.uniform(0.5, 3.5, size=(60, 2))
        pts = np.column_stack([base, np.zeros(60)])
        pts = np.vstack([pts, [[2.0, 2.0, 2.0], [1.5, 2.5, -3.0]]])
        ps = project_cloud(PointCloud(pts), s)
        assert len(ps.invalid_indices) == 0
        by_source = dict(zip(ps.source_indices, ps.signed_distances))
        assert abs(by_source[60] - 2.0) <= 1e-8
        assert abs(by_source[61] + 3.0) <= 1e-8
        # on-surface points are (near) zero with positive sign convention
        on_surface = ps.signed_distances[:60]
        assert np.abs(on_surface).max() <= 1e-8

    def test_offset_oracle(self):
        # points constructed as foot + t * n must come back with D = t
        rng = np.random.default_rng(201)
        g = np.linspace(0.0, 1.0, 8)
        z = 0.05 * np.sin(np.pi * g)[:, None] * np.cos(np.pi * g)[None, :]
        s = make_surface(z=z)
        uv = rng.uniform(0.05, 0.95, size=(1500, 2))
        part = s.derivatives(uv)
        n = np.cross(part.s_u, part.s_v)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        t = rng.uniform(-0.05, 0.05, size=1500)
        pts = s.evaluate(uv) + t[:, None] * n
        ps = project_cloud(PointCloud(pts), s)
        recovered = np.full(1500, np.nan)
        recovered[ps.source_indices] = ps.signed_distances
        ok = ~np.isnan(recovered)
        assert ok.mean() > 0.99
        assert np.abs(recovered[ok] - t[ok]).max() <= 1e-4

    def test_one_sided_cloud_sign_consistent(self):
        rng = np.random.default_rng(202)
        s = make_surface(z=0.1 * rng.normal(size=(8, 8)))
        uv = rng.uniform(0.1, 0.9, size=(300, 2))
        part = s.derivatives(uv)
        n = np.cross(part.s_u, part.s_v)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        offsets = rng.uniform(0.01, 0.04, size=300)
        pts = s.evaluate(uv) + offsets[:, None] * n
        ps = project_cloud(PointCloud(pts), s)
        assert (ps.signed_distances > 0).all()

    def test_tangential_points_invalid(self):
        s = make_surface(z=0.0)
        # far to the side: feet sit on the domain edge, residuals tangential
        pts = np.column_stack(
            [np.full(40, 5.0), np.linspace(0.1, 0.9, 40), np.zeros(40)]
        )
        with pytest.raises(EmptyProjection):
            project_cloud(PointCloud(pts), s)

    def test_record_view(self):
        s = make_surface(z=0.0, span=2.0)
        rng = np.random.default_rng(203)
        pts = np.column_stack(
            [rng.uniform(0.4, 1.6, (30, 2)), rng.uniform(-1, 1, 30)]
        )
        ps = project_cloud(PointCloud(pts), s)
        rec = ps.record(3)
        assert abs(abs(rec.signed_distance)
                   - np.linalg.norm(pts[rec.source_index] - rec.foot)) <= 1e-9

    def test_validation(self):
        s = make_surface()
        with pytest.raises(EmptyCloud):
            project_cloud(PointCloud(np.zeros((0, 3))), s)
        with pytest.raises(InvalidParameter):
            project_cloud(PointCloud(np.zeros((5, 3))), s, epsilon=0.0)


class TestEstimateDensity:
    def test_two_points(self):
        assert estimate_density(np.array([[0.0, 0.0], [0.3, 0.4]]), k=1) == 0.5

    def test_regular_grid_interior_median(self):
        h = 0.1
        g = np.arange(10) * h
        uv = np.column_stack([np.repeat(g, 10), np.tile(g, 10)])
        rho = estimate_density(uv, k=8)
        # brute-force all-pairs oracle
        medians = []
        for p in uv:
            d = np.sort(np.linalg.norm(uv - p, axis=1))[1: 9]
            medians.append(np.median(d))
        assert abs(rho - np.mean(medians)) <= 1e-12
        # interior points see 4 edge + 4 diagonal neighbors
        inner = np.median(
            np.sort(np.linalg.norm(uv - np.array([5 * h, 5 * h]), axis=1))[1: 9]
        )
        assert abs(inner - (h + h * np.sqrt(2)) / 2) <= 1e-12

    def test_uniform_sanity_band(self):
        rng = np.random.default_rng(204)
        uv = rng.uniform(0, 1, size=(10000, 2))
        rho = estimate_density(uv, k=8)
        # median of 8-NN distances for a unit-intensity-10000 Poisson field:
        # approximately (sqrt(4/(pi n)) + sqrt(5/(pi n))) / 2
        theory = 0.5 * (np.sqrt(4 / (np.pi * 1e4)) + np.sqrt(5 / (np.pi * 1e4)))
        assert abs(rho - theory) <= 0.2 * theory

    def test_validation(self):
        with pytest.raises(InvalidParameter):
            estimate_density(np.zeros((3, 2)), k=3)
        with pytest.raises(InvalidParameter):
            estimate_density(np.zeros((5, 2)), k=0)


class TestChooseResolution:
    def test_reciprocal(self):
        assert choose_resolution(0.01) == 100

    def test_clamp_floor(self):
        assert choose_resolution(0.6) == 2

    def test_clamp_ceiling(self):
        assert choose_resolution(1e-6) == 4096
        assert choose_resolution(1e-6, r_max=512) == 512

    def test_validation(self):
        for bad in (0.0, -1.0, np.nan, np.inf):
            with pytest.raises(InvalidParameter):
                choose_resolution(bad)
        with pytest.raises(InvalidParameter):
            choose_resolution(0.5, r_max=1)


class TestRasterize:
    def test_majority_positive_keeps_max(self):
        ps = make_projections([[0.1, 0.1]] * 3, [2.0, 1.0, -3.0])
        hf = rasterize(ps, 4)
        assert hf.values[0, 0] == 2.0
        assert hf.counts[0, 0] == 3

    def test_majority_negative_keeps_min(self):
        ps = make_projections([[0.9, 0.9]] * 3, [-1.0, -2.0, 5.0])
        hf = rasterize(ps, 4)
        assert hf.values[3, 3] == -2.0

    def test_zero_counts_as_nonpositive(self):
        hf = rasterize(make_projections([[0.1, 0.1]] * 2, [0.0, 1.0]), 2)
        assert hf.values[0, 0] == 1.0  # N+ = N- = 1, tie keeps max
        hf2 = rasterize(make_projections([[0.1, 0.1]], [0.0]), 2)
        assert hf2.values[0, 0] == 0.0

    def test_empty_cells_are_holes(self):
        hf = rasterize(make_projections([[0.1, 0.1]], [1.0]), 4)
        assert hf.n_holes == 15
        assert np.isnan(hf.values[2, 2])

    def test_boundary_params_go_to_last_cell(self):
        ps = make_projections([[1.0, 1.0], [1.0, 0.0], [0.5, 1.0]], [1.0, 2.0, 3.0])
        hf = rasterize(ps, 4)
        assert hf.values[3, 3] == 1.0
        assert hf.values[3, 0] == 2.0
        assert hf.values[2, 3] == 3.0

    def test_counts_partition(self):
        rng = np.random.default_rng(205)
        ps = make_projections(rng.uniform(0, 1, (500, 2)), rng.normal(size=500))
        hf = rasterize(ps, 7)
        assert hf.counts.sum() == 500

    def test_permutation_invariant(self):
        rng = np.random.default_rng(206)
        uv = rng.uniform(0, 1, (300, 2))
        d = rng.normal(size=300)
        perm = rng.permutation(300)
        a = rasterize(make_projections(uv, d), 9)
        b = rasterize(make_projections(uv[perm], d[perm]), 9)
        assert np.array_equal(a.values, b.values, equal_nan=True)
        assert np.array_equal(a.counts, b.counts)

    def test_dense_even_cloud_has_few_holes(self):
        # evenly spaced scan with jitter, rasterized at r = round(1/rho)
        rng = np.random.default_rng(207)
        g = (np.arange(60) + 0.5) / 60
        uv = np.column_stack(
            [np.repeat(g, 60), np.tile(g, 60)]
        ) + rng.uniform(-0.2 / 60, 0.2 / 60, size=(3600, 2))
        uv = np.clip(uv, 0, 1)
        rho = estimate_density(uv, k=8)
        r = choose_resolution(rho)
        hf = rasterize(make_projections(uv, np.ones(3600)), r)
        assert hf.n_holes / r**2 < 0.02

    def test_validation(self):
        ps = make_projections([[0.5, 0.5]], [1.0])
        with pytest.raises(InvalidParameter):
            rasterize(ps, 1)
        empty = make_projections(np.zeros((0, 2)), [])
        with pytest.raises(EmptyProjection):
            rasterize(empty, 4)


class TestHeightFieldType:
    def test_mask_count_consistency_enforced(self):
        values = np.array([[1.0, np.nan], [0.5, 2.0]])
        good = np.array([[1, 0], [2, 1]])
        hf = HeightField(values, good)
        assert hf.n_holes == 1
        with pytest.raises(InvalidParameter):
            HeightField(values, np.array([[1, 1], [2, 1]]))
        with pytest.raises(InvalidParameter):
            HeightField(values, np.array([[0, 0], [2, 1]]))

    def test_shape_checks(self):
        with pytest.raises(InvalidParameter):
            HeightField(np.zeros((3, 2)), np.ones((3, 2)))
        with pytest.raises(InvalidParameter):
            HeightField(np.zeros((1, 1)), np.ones((1, 1)))
        with pytest.raises(InvalidParameter):
            HeightField(np.full((3, 3), np.inf), np.ones((3, 3)))

    def test_mean_count(self):
        hf = HeightField(
            np.array([[1.0, np.nan], [2.0, 3.0]]), np.array([[2, 0], [4, 6]])
        )
        assert hf.mean_count() == 4.0

    def test_with_values(self):
        hf = HeightField(
            np.array([[1.0, np.nan], [2.0, 3.0]]), np.array([[2, 0], [4, 6]])
        )
        filled = hf.with_values(np.array([[1.0, 9.0], [2.0, 3.0]]))
        assert filled.n_holes == 0
        assert filled.counts[0, 1] == 1
        assert filled.counts[1, 1] == 6


class TestHeightFieldIO:
    def make_field(self, seed=208, r=20):
        rng = np.random.default_rng(seed)
        values = rng.normal(size=(r, r))
        holes = rng.random((r, r)) < 0.2
        values[holes] = np.nan
        counts = rng.integers(1, 9, size=(r, r))
        counts[holes] = 0
        return HeightField(values, counts, density=0.05)

    def test_round_trip(self, tmp_path):
        hf = self.make_field()
        path = tmp_path / "h.hf01"
        write_heightfield(path, hf)
        back = read_heightfield(path)
        assert back.resolution == hf.resolution
        assert back.density == hf.density
        assert np.array_equal(back.hole_mask, hf.hole_mask)
        # float32 storage: relative error bounded by single precision
        ok = ~hf.hole_mask
        assert np.abs(back.values[ok] - hf.values[ok]).max() <= 1e-6
        assert np.array_equal(back.counts, hf.counts)

    def test_missing_counts_sidecar_degrades(self, tmp_path):
        hf = self.make_field()
        path = tmp_path / "h.hf01"
        write_heightfield(path, hf)
        (tmp_path / "h.hf01.counts").unlink()
        back = read_heightfield(path)
        assert set(np.unique(back.counts)) <= {0, 1}
        assert np.array_equal(back.counts == 0, hf.hole_mask)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.hf01"
        path.write_bytes(b"XXXX" + b"\x00" * 30)
        with pytest.raises(ParseError):
            read_heightfield(path)

    def test_truncated(self, tmp_path):
        hf = self.make_field(r=10)
        path = tmp_path / "h.hf01"
        write_heightfield(path, hf)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 17])
        with pytest.raises(ParseError):
            read_heightfield(path)

    def test_pgm_preview(self, tmp_path):
        values = np.array([[0.0, np.nan], [5.0, 10.0]])
        counts = np.array([[1, 0], [1, 1]])
        path = tmp_path / "p.pgm"
        write_pgm_preview(path, HeightField(values, counts))
        blob = path.read_bytes()
        header, rest = blob.split(b"255\n", 1)
        assert header.startswith(b"P5")
        img = np.frombuffer(rest, dtype=np.uint8).reshape(2, 2)
        assert img[0, 1] == 0  # hole
        assert img[0, 0] == 1  # minimum maps just above the hole code
        assert img[1, 1] == 255

    def test_pgm_constant_field(self, tmp_path):
        hf = HeightField(np.full((2, 2), 3.0), np.ones((2, 2)))
        path = tmp_path / "c.pgm"
        write_pgm_preview(path, hf)
        img = np.frombuffer(path.read_bytes().split(b"255\n", 1)[1], np.uint8)
        assert (img == 255).all()
