"""Point synthesis inside filled hole regions.

New points are planted at low-discrepancy UV parameters that land in
former hole cells: each parameter is lifted to 3D by evaluating the base
surface, interpolating the filled height raster bilinearly, and stepping
that height along the surface normal.  The Halton stream makes the whole
procedure deterministic and prefix-stable, so batching never changes the
output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bspline import BSplineSurface
from .errors import DegenerateTangent, HoleCoverageFailure, InvalidParameter
from .heightfield import HeightField
from .pointcloud import PointCloud

__all__ = [
    "ReconstructionSample",
    "fill_holes",
    "halton_sequence",
    "sample_intensity",
    "surface_normal",
    "synthesize_samples",
]

# Leading Halton indices are skipped before rejection sampling; the first
# few base-2/3 pairs sit on coarse lattice lines and correlate visibly.
_HALTON_SKIP = 20


@dataclass(frozen=True)
class ReconstructionSample:
    """One synthesized point with the fields it was assembled from."""

    param: np.ndarray
    surface_point: np.ndarray
    normal: np.ndarray
    intensity: float
    output_point: np.ndarray

    def __post_init__(self):
        param = np.asarray(self.param, dtype=np.float64)
        surface_point = np.asarray(self.surface_point, dtype=np.float64)
        normal = np.asarray(self.normal, dtype=np.float64)
        output_point = np.asarray(self.output_point, dtype=np.float64)
        object.__setattr__(self, "param", param)
        object.__setattr__(self, "surface_point", surface_point)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "intensity", float(self.intensity))
        object.__setattr__(self, "output_point", output_point)
        if param.shape != (2,) or surface_point.shape != (3,):
            raise InvalidParameter("param must be (2,), points (3,)")
        if normal.shape != (3,) or output_point.shape != (3,):
            raise InvalidParameter("normal and output_point must be (3,)")
        if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
            raise InvalidParameter("normal must have unit length")
        assembled = surface_point + self.intensity * normal
        if np.linalg.norm(output_point - assembled) > 1e-9:
            raise InvalidParameter(
                "output_point must equal surface_point + intensity * normal"
            )


def _radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    """Digit-reversed fractions of the given indices in the given base."""
    out = np.zeros(len(indices))
    n = indices.copy()
    scale = 1.0 / base
    while n.any():
        out += scale * (n % base)
        n //= base
        scale /= base
    return out


def halton_sequence(count: int, bases: tuple[int, int] = (2, 3),
                    skip: int = 0) -> np.ndarray:
    """``count`` radical-inverse pairs starting at index ``skip + 1``.

    The sequence is prefix-stable: requesting more points never changes
    the earlier ones, and ``skip`` simply advances the stream.
    """
    if count < 0:
        raise InvalidParameter("count must be nonnegative")
    if skip < 0:
        raise InvalidParameter("skip must be nonnegative")
    if len(bases) != 2 or any(b < 2 for b in bases):
        raise InvalidParameter(f"bases must be two integers >= 2, got {bases}")
    if count == 0:
        return np.empty((0, 2))
    indices = np.arange(skip + 1, skip + count + 1, dtype=np.int64)
    return np.column_stack([_radical_inverse(indices, b) for b in bases])


def surface_normal(s: BSplineSurface, param) -> np.ndarray:
    """Right-handed unit normal ``S_u x S_v / |S_u x S_v|``.

    Accepts one (2,) parameter or a batch of (N, 2).
    """
    param = np.asarray(param, dtype=np.float64)
    single = param.ndim == 1
    pts = np.atleast_2d(param)
    part = s.derivatives(pts, order=1)
    cross = np.cross(part.s_u, part.s_v)
    norm = np.linalg.norm(cross, axis=1)
    if (norm < 1e-12).any():
        where = pts[int(np.argmin(norm))]
        raise DegenerateTangent(
            f"tangents are parallel or vanish at uv=({where[0]:g}, {where[1]:g})"
        )
    out = cross / norm[:, None]
    return out[0] if single else out


def sample_intensity(h: HeightField, param) -> float | np.ndarray:
    """Bilinear interpolation of a hole-free raster at UV parameters.

    The interpolation lattice sits on cell centers ((x+0.5)/r, (y+0.5)/r);
    coordinates past the outermost centers clamp to the border cells.
    Accepts one (2,) parameter or a batch of (N, 2).
    """
    if h.n_holes:
        raise InvalidParameter("height field still has holes")
    param = np.asarray(param, dtype=np.float64)
    single = param.ndim == 1
    pts = np.atleast_2d(param)
    if ((pts < 0.0) | (pts > 1.0)).any():
        raise InvalidParameter("parameters must lie in [0, 1]^2")
    r = h.resolution
    q = np.clip(pts * r - 0.5, 0.0, r - 1.0)
    base = np.minimum(q.astype(np.int64), r - 2)
    frac = q - base
    x0, y0 = base[:, 0], base[:, 1]
    fu, fv = frac[:, 0], frac[:, 1]
    v = h.values
    out = (v[x0, y0] * (1 - fu) * (1 - fv)
           + v[x0 + 1, y0] * fu * (1 - fv)
           + v[x0, y0 + 1] * (1 - fu) * fv
           + v[x0 + 1, y0 + 1] * fu * fv)
    return float(out[0]) if single else out


def _synthesize(s: BSplineSurface, h_before: HeightField,
                h_after: HeightField, density_factor: float):
    if h_before.resolution != h_after.resolution:
        raise InvalidParameter("height fields must share a resolution")
    if h_after.n_holes:
        raise InvalidParameter("h_after must be hole-free")
    if not np.isfinite(density_factor) or density_factor < 0:
        raise InvalidParameter("density_factor must be finite and >= 0")
    hole = h_before.hole_mask
    n_holes = int(hole.sum())
    target = int(round(n_holes * h_before.mean_count() * density_factor))
    empty = (np.empty((0, 2)), np.empty((0, 3)), np.empty((0, 3)),
             np.empty(0), np.empty((0, 3)))
    if n_holes == 0 or target == 0:
        return empty
    r = h_before.resolution
    cap = 1000 * target
    chunk = max(1024, target)
    drawn = 0
    kept = []
    n_kept = 0
    while n_kept < target and drawn < cap:
        take = min(chunk, cap - drawn)
        candidates = halton_sequence(take, skip=_HALTON_SKIP + drawn)
        drawn += take
        cells = np.minimum((candidates * r).astype(np.int64), r - 1)
        selected = candidates[hole[cells[:, 0], cells[:, 1]]]
        kept.append(selected)
        n_kept += len(selected)
    if n_kept < target:
        raise HoleCoverageFailure(
            f"drew {drawn} candidates but only {n_kept} landed in the "
            f"{n_holes} hole cells (target {target})"
        )
    alpha = np.concatenate(kept)[:target]
    surface_points = s.evaluate(alpha)
    normals = surface_normal(s, alpha)
    intensity = sample_intensity(h_after, alpha)
    beta = surface_points + intensity[:, None] * normals
    return alpha, surface_points, normals, intensity, beta


def synthesize_samples(s: BSplineSurface, h_before: HeightField,
                       h_after: HeightField,
                       density_factor: float = 1.0) -> list[ReconstructionSample]:
    """Per-point records of the synthesis; useful for audits and tests."""
    alpha, surface_points, normals, intensity, beta = _synthesize(
        s, h_before, h_after, density_factor
    )
    return [
        ReconstructionSample(alpha[i], surface_points[i], normals[i],
                             intensity[i], beta[i])
        for i in range(len(alpha))
    ]


def fill_holes(s: BSplineSurface, h_before: HeightField, h_after: HeightField,
               density_factor: float = 1.0) -> PointCloud:
    """Synthesize the new points for all former hole cells.

    The target count is the hole area times the mean projection count of
    the known cells, scaled by ``density_factor``; Halton candidates are
    kept only when they land in a former hole cell, with the stream
    capped at 1000x the target before :class:`HoleCoverageFailure`.
    Returns only the new points (surface normals attached).
    """
    _, _, normals, _, beta = _synthesize(s, h_before, h_after, density_factor)
    return PointCloud(beta, normals if len(beta) else None)
