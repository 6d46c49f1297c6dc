"""Tests for Halton sampling, normals, bilinear intensity, point synthesis."""

import numpy as np
import pytest

from terrafill import (
    DegenerateTangent,
    HoleCoverageFailure,
    InvalidParameter,
    PointCloud,
)
from terrafill.bspline import (
    BSplineSurface,
    FitConfig,
    fit_surface,
    uniform_clamped_knots,
)
from terrafill.heightfield import (
    HeightField,
    ProjectionSet,
    choose_resolution,
    estimate_density,
    project_cloud,
    rasterize,
)
from terrafill.inpaint2d import GradientField, solve_poisson
from terrafill.pointcloud import KdIndex, footprint_box
from terrafill.reconstruct import (
    ReconstructionSample,
    fill_holes,
    halton_sequence,
    sample_intensity,
    surface_normal,
    synthesize_samples,
)


def greville(knots, degree):
    return np.array(
        [knots[i + 1: i + degree + 1].mean() for i in range(len(knots) - degree - 1)]
    )


def make_surface(nu=8, nv=8, z=None, span=1.0, swap=False):
    ku = uniform_clamped_knots(nu, 3)
    kv = uniform_clamped_knots(nv, 3)
    ctrl = np.zeros((nu, nv, 3))
    gu = span * greville(ku, 3)
    gv = span * greville(kv, 3)
    if swap:
        ctrl[:, :, 0] = gv[None, :]
        ctrl[:, :, 1] = gu[:, None]
    else:
        ctrl[:, :, 0] = gu[:, None]
        ctrl[:, :, 1] = gv[None, :]
    if z is not None:
        ctrl[:, :, 2] = z
    return BSplineSurface(3, 3, ku, kv, ctrl)


def make_heightfield(values, counts=None):
    values = np.asarray(values, dtype=np.float64)
    if counts is None:
        counts = (~np.isnan(values)).astype(np.int64)
    return HeightField(values, counts)


class TestHaltonSequence:
    def test_base2_hand_values(self):
        pts = halton_sequence(8)
        expected = [1 / 2, 1 / 4, 3 / 4, 1 / 8, 5 / 8, 3 / 8, 7 / 8, 1 / 16]
        assert np.array_equal(pts[:, 0], expected)

    def test_base3_hand_values(self):
        pts = halton_sequence(8)
        expected = [1 / 3, 2 / 3, 1 / 9, 4 / 9, 7 / 9, 2 / 9, 5 / 9, 8 / 9]
        assert np.abs(pts[:, 1] - expected).max() <= 1e-15

    def test_empty(self):
        assert halton_sequence(0).shape == (0, 2)

    def test_prefix_property(self):
        full = halton_sequence(100)
        assert np.array_equal(full[:30], halton_sequence(30))
        assert np.array_equal(full[5:15], halton_sequence(10, skip=5))

    def test_other_bases(self):
        pts = halton_sequence(4, bases=(5, 7))
        assert np.allclose(pts[:, 0], [1 / 5, 2 / 5, 3 / 5, 4 / 5])
        assert np.allclose(pts[:, 1], [1 / 7, 2 / 7, 3 / 7, 4 / 7])

    def test_in_unit_square(self):
        pts = halton_sequence(5000)
        assert (pts > 0).all() and (pts < 1).all()

    def test_validation(self):
        with pytest.raises(InvalidParameter):
            halton_sequence(-1)
        with pytest.raises(InvalidParameter):
            halton_sequence(4, skip=-2)
        with pytest.raises(InvalidParameter):
            halton_sequence(4, bases=(1, 3))


class TestSurfaceNormal:
    def test_plane_points_up(self):
        s = make_surface(z=0.0)
        n = surface_normal(s, np.array([0.3, 0.7]))
        assert np.allclose(n, [0.0, 0.0, 1.0], atol=1e-12)

    def test_swapped_orientation_points_down(self):
        s = make_surface(z=0.0, swap=True)
        n = surface_normal(s, np.array([0.3, 0.7]))
        assert np.allclose(n, [0.0, 0.0, -1.0], atol=1e-12)

    def test_batch_shape(self):
        s = make_surface(z=0.0)
        rng = np.random.default_rng(400)
        uv = rng.uniform(0.1, 0.9, size=(40, 2))
        n = surface_normal(s, uv)
        assert n.shape == (40, 3)
        assert np.abs(np.linalg.norm(n, axis=1) - 1).max() <= 1e-12

    def test_perpendicular_to_fd_tangents(self):
        rng = np.random.default_rng(401)
        s = make_surface(z=0.3 * rng.normal(size=(8, 8)))
        uv = rng.uniform(0.1, 0.9, size=(50, 2))
        normals = surface_normal(s, uv)
        h = 1e-5
        for axis in range(2):
            step = np.zeros(2)
            step[axis] = h
            tang = (s.evaluate(uv + step) - s.evaluate(uv - step)) / (2 * h)
            tang /= np.linalg.norm(tang, axis=1, keepdims=True)
            assert np.abs(np.einsum("ij,ij->i", normals, tang)).max() <= 1e-5

    def test_degenerate_tangent(self):
        s = make_surface(z=0.0)
        ctrl = s.control.copy()
        ctrl[0, :, :] = ctrl[0, 0, :]  # collapse one boundary row to a point
        collapsed = BSplineSurface(3, 3, s.knots_u, s.knots_v, ctrl)
        with pytest.raises(DegenerateTangent):
            surface_normal(collapsed, np.array([0.0, 0.5]))


class TestSampleIntensity:
    def test_constant_field(self):
        h = make_heightfield(np.full((9, 9), 4.25))
        rng = np.random.default_rng(402)
        vals = sample_intensity(h, rng.uniform(0, 1, size=(100, 2)))
        assert np.abs(vals - 4.25).max() <= 1e-12

    def test_cell_center_exact(self):
        rng = np.random.default_rng(403)
        v = rng.normal(size=(8, 8))
        h = make_heightfield(v)
        for x, y in ((0, 0), (3, 5), (7, 7), (2, 6)):
            p = np.array([(x + 0.5) / 8, (y + 0.5) / 8])
            assert sample_intensity(h, p) == v[x, y]

    def test_linear_in_u(self):
        r = 16
        v = np.broadcast_to(np.arange(r, dtype=np.float64)[:, None], (r, r))
        h = make_heightfield(v.copy())
        rng = np.random.default_rng(404)
        uv = rng.uniform(0.5 / r, 1 - 0.5 / r, size=(200, 2))
        vals = sample_intensity(h, uv)
        assert np.abs(vals - (uv[:, 0] * r - 0.5)).max() <= 1e-12

    def test_border_clamp(self):
        rng = np.random.default_rng(405)
        v = rng.normal(size=(6, 6))
        h = make_heightfield(v)
        assert sample_intensity(h, np.array([0.0, 0.0])) == v[0, 0]
        assert sample_intensity(h, np.array([1.0, 1.0])) == v[5, 5]

    def test_rejects_holes_and_bad_params(self):
        v = np.ones((6, 6))
        v[2, 2] = np.nan
        with pytest.raises(InvalidParameter):
            sample_intensity(make_heightfield(v), np.array([0.5, 0.5]))
        h = make_heightfield(np.ones((6, 6)))
        with pytest.raises(InvalidParameter):
            sample_intensity(h, np.array([1.2, 0.5]))


class TestReconstructionSample:
    def test_validation(self):
        n = np.array([0.0, 0.0, 1.0])
        sp = np.array([1.0, 2.0, 3.0])
        ReconstructionSample([0.5, 0.5], sp, n, 0.25, sp + 0.25 * n)
        with pytest.raises(InvalidParameter):
            ReconstructionSample([0.5, 0.5], sp, 2 * n, 0.25, sp + 0.5 * n)
        with pytest.raises(InvalidParameter):
            ReconstructionSample([0.5, 0.5], sp, n, 0.25, sp + 0.5 * n)


class TestFillHoles:
    def test_no_holes_empty_output(self):
        s = make_surface(z=0.0)
        h = make_heightfield(np.zeros((8, 8)))
        out = fill_holes(s, h, h)
        assert len(out) == 0

    def test_flat_surface_constant_intensity(self):
        s = make_surface(z=0.0, span=2.0)
        r = 8
        v = np.zeros((r, r))
        v[5, 3] = np.nan
        counts = np.full((r, r), 4, dtype=np.int64)
        counts[5, 3] = 0
        h_before = HeightField(v, counts)
        h_after = make_heightfield(np.full((r, r), 0.75))
        samples = synthesize_samples(s, h_before, h_after)
        assert len(samples) == 4  # one hole cell x mean count 4
        for rec in samples:
            assert 5 / 8 <= rec.param[0] < 6 / 8
            assert 3 / 8 <= rec.param[1] < 4 / 8
            assert abs(rec.output_point[2] - 0.75) <= 1e-12
            # x(u) = 2u, y(v) = 2v on this surface
            assert abs(rec.output_point[0] - 2 * rec.param[0]) <= 1e-9
            assert abs(rec.output_point[1] - 2 * rec.param[1]) <= 1e-9

    def test_target_count_and_reassembly(self):
        rng = np.random.default_rng(406)
        s = make_surface(z=0.1 * rng.normal(size=(8, 8)))
        r = 16
        values = rng.normal(size=(r, r))
        counts = rng.integers(1, 6, size=(r, r))
        hole = np.zeros((r, r), bool)
        hole[4:8, 9:12] = True
        values[hole] = np.nan
        counts[hole] = 0
        h_before = HeightField(values, counts)
        h_after = h_before.with_values(np.where(hole, 0.3, values))

        target = round(hole.sum() * counts[~hole].mean())
        cloud = fill_holes(s, h_before, h_after)
        assert len(cloud) == target

        samples = synthesize_samples(s, h_before, h_after)
        assert len(samples) == target
        for rec in samples:
            cell = np.minimum((rec.param * r).astype(int), r - 1)
            assert hole[cell[0], cell[1]]
            assembled = rec.surface_point + rec.intensity * rec.normal
            assert np.linalg.norm(rec.output_point - assembled) <= 1e-9
            assert abs(rec.intensity
                       - sample_intensity(h_after, rec.param)) <= 1e-12
        assert np.array_equal(cloud.points,
                              np.array([rec.output_point for rec in samples]))

    def test_density_factor_scales_count(self):
        s = make_surface(z=0.0)
        r = 12
        v = np.zeros((r, r))
        v[4:6, 4:6] = np.nan
        counts = (~np.isnan(v)).astype(np.int64) * 3
        h_before = HeightField(v, counts)
        h_after = make_heightfield(np.zeros((r, r)))
        base = fill_holes(s, h_before, h_after, density_factor=1.0)
        double = fill_holes(s, h_before, h_after, density_factor=2.0)
        assert len(double) == 2 * len(base)
        assert len(fill_holes(s, h_before, h_after, density_factor=0.0)) == 0

    def test_deterministic(self):
        s = make_surface(z=0.0)
        r = 12
        v = np.zeros((r, r))
        v[5:8, 2:5] = np.nan
        h_before = make_heightfield(v)
        h_after = make_heightfield(np.zeros((r, r)))
        a = fill_holes(s, h_before, h_after)
        b = fill_holes(s, h_before, h_after)
        assert np.array_equal(a.points, b.points)

    def test_coverage_failure_on_tiny_hole(self):
        s = make_surface(z=0.0)
        r = 512
        v = np.zeros((r, r))
        v[400, 311] = np.nan
        h_before = make_heightfield(v)
        h_after = make_heightfield(np.zeros((r, r)))
        with pytest.raises(HoleCoverageFailure):
            fill_holes(s, h_before, h_after)

    def test_validation(self):
        s = make_surface(z=0.0)
        h8 = make_heightfield(np.zeros((8, 8)))
        h9 = make_heightfield(np.zeros((9, 9)))
        with pytest.raises(InvalidParameter):
            fill_holes(s, h8, h9)
        holey = np.zeros((8, 8))
        holey[2, 2] = np.nan
        with pytest.raises(InvalidParameter):
            fill_holes(s, h8, make_heightfield(holey))
        with pytest.raises(InvalidParameter):
            fill_holes(s, h8, h8, density_factor=-1.0)


def jittered_grid_cloud(n, span, rng, amplitude=0.3):
    g = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(g * span, g * span, indexing="ij")
    xx = xx + rng.uniform(-0.3, 0.3, xx.shape) * span / n
    yy = yy + rng.uniform(-0.3, 0.3, yy.shape) * span / n
    zz = amplitude * np.sin(2 * np.pi * xx / span) * np.cos(2 * np.pi * yy / span)
    return PointCloud(np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()]))


class TestRoundTrip:
    def test_cell_center_resynthesis_hausdorff(self):
        rng = np.random.default_rng(407)
        cloud = jittered_grid_cloud(50, 4.0, rng)
        fit = fit_surface(cloud, FitConfig(m=10, n=10, iterations=5))
        s = fit.surface
        projections = project_cloud(cloud, s)
        rho = estimate_density(projections.params)
        r = choose_resolution(rho)
        h = rasterize(projections, r, rho)
        # dense decomposition: only raster/grid beat leaves isolated holes
        assert h.n_holes <= 0.05 * r * r
        if h.n_holes:
            ones = np.ones((r, r), bool)
            h = solve_poisson(
                h, GradientField(np.zeros((r, r)), np.zeros((r, r)), ones, ones)
            )

        g = (np.arange(r) + 0.5) / r
        uu, vv = np.meshgrid(g, g, indexing="ij")
        centers = np.column_stack([uu.ravel(), vv.ravel()])
        beta = (s.evaluate(centers)
                + sample_intensity(h, centers)[:, None]
                * surface_normal(s, centers))

        dist, _ = KdIndex(cloud.points).query_many(beta, k=1)
        scale = 2 * footprint_box(cloud).half_extents[:2].max()
        assert dist.max() <= 3 * rho * scale

    def test_carved_hole_density_match(self):
        rng = np.random.default_rng(408)
        cloud = jittered_grid_cloud(60, 4.0, rng)
        fit = fit_surface(cloud, FitConfig(m=10, n=10, iterations=5))
        s = fit.surface
        projections = project_cloud(cloud, s)

        center = np.array([0.55, 0.5])
        uv_dist = np.linalg.norm(projections.params - center, axis=1)
        keep = uv_dist > 0.12
        carved = ProjectionSet(
            projections.params[keep],
            projections.feet[keep],
            projections.signed_distances[keep],
            projections.source_indices[keep],
            projections.invalid_indices,
        )
        rho = estimate_density(carved.params)
        r = choose_resolution(rho)
        h_before = rasterize(carved, r, rho)
        assert h_before.n_holes > 0
        ones = np.ones((r, r), bool)
        zero_g = GradientField(np.zeros((r, r)), np.zeros((r, r)), ones, ones)
        h_after = solve_poisson(h_before, zero_g)

        new_points = fill_holes(s, h_before, h_after)
        target = round(h_before.n_holes * h_before.mean_count())
        assert len(new_points) == target

        kept_points = cloud.points[carved.source_indices]
        merged = np.vstack([kept_points, new_points.points])
        index = KdIndex(merged)

        d_new, _ = index.query_many(new_points.points, k=9)
        annulus = (uv_dist > 0.18) & (uv_dist < 0.30)
        ann_points = cloud.points[projections.source_indices[annulus]]
        d_old, _ = index.query_many(ann_points, k=9)
        # compare mean spacing to the 8th neighbor (column 0 is the point)
        ratio = d_new[:, 1:].mean() / d_old[:, 1:].mean()
        assert abs(ratio - 1.0) <= 0.25
