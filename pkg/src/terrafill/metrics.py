"""Point-cloud and height-map quality metrics plus plain-text report writers."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .bspline import BSplineSurface, project_points
from .errors import EmptyCloud, InvalidParameter
from .heightfield import HeightField
from .pointcloud import KdIndex, PointCloud, compute_obb, concat_clouds, estimate_normals

__all__ = [
    "SATURATED",
    "MetricReport",
    "Saturated",
    "compute_report",
    "error_map",
    "gpsnr",
    "nrmse_fit",
    "nshd",
    "rmse_maps",
    "write_error_map",
    "write_report",
    "write_report_csv",
]

_SATURATION_RATIO = 1e-24
_DEGENERATE_VOLUME = 1e-18


class Saturated:
    """Sentinel for a PSNR whose error term is numerically zero.

    Compared with ``is SATURATED``; report writers serialize it as ``inf``.
    """

    __slots__ = ()

    def __repr__(self):
        return "Saturated"


SATURATED = Saturated()


def _cloud_normals(cloud: PointCloud, k: int) -> np.ndarray:
    """The cloud's own normals, or PCA estimates when it carries none.

    Only squared normal-projected distances are consumed here, so the sign
    ambiguity of unoriented PCA normals is harmless.
    """
    if cloud.normals is not None:
        return cloud.normals
    fitted, _ = estimate_normals(cloud, k=k)
    return fitted.normals


def _mean_sq_plane(points: np.ndarray, kd: KdIndex, normals: np.ndarray) -> float:
    """Mean squared point-to-plane distance from ``points`` to the indexed cloud."""
    _, idx = kd.query_many(points, 1)
    nearest = idx[:, 0]
    offsets = points - kd.points[nearest]
    along = np.einsum("ij,ij->i", offsets, normals[nearest])
    return float(np.mean(along**2))


def gpsnr(a: PointCloud, b: PointCloud, *, k_normals: int = 16,
          one_sided: bool = False, union_peak: bool = False):
    """Geometric PSNR between two clouds from point-to-plane error, in dB.

    The error term is the symmetric mean of squared point-to-plane
    distances: each point of ``a`` against the tangent plane of its nearest
    neighbor in ``b``, averaged with the reverse direction. Missing normals
    are estimated per cloud. The peak is the full OBB diagonal of ``a``,
    which makes the default mode asymmetric in its arguments; pass
    ``union_peak=True`` to take the diagonal of the merged cloud instead,
    which restores symmetry under argument swap. ``one_sided=True`` drops
    the reverse direction from the error term.

    Returns 10*log10(peak^2 / error), or ``SATURATED`` when the error is
    zero relative to the peak (below 1e-24 * peak^2).

    Raises:
        EmptyCloud: either cloud is empty.
    """
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("gpsnr needs two nonempty clouds")
    e = _mean_sq_plane(a.points, KdIndex(b.points), _cloud_normals(b, k_normals))
    if not one_sided:
        e_back = _mean_sq_plane(
            b.points, KdIndex(a.points), _cloud_normals(a, k_normals)
        )
        e = 0.5 * (e + e_back)
    box = compute_obb(concat_clouds(a, b)) if union_peak else compute_obb(a)
    peak_sq = box.diagonal**2
    if e <= _SATURATION_RATIO * peak_sq:
        return SATURATED
    with np.errstate(divide="ignore"):
        return float(10.0 * np.log10(peak_sq / e))


def nshd(a: PointCloud, b: PointCloud) -> float:
    """Symmetric one-sided Hausdorff distance normalized by OBB volume.

    The larger of the two one-sided Hausdorff distances (max-min nearest
    distances) divided by the OBB volume of ``a``. Degenerate volumes below
    1e-18 fall back to the OBB diagonal as normalizer, with a
    RuntimeWarning. Lower is better; 0 means identical supports.

    Raises:
        EmptyCloud: either cloud is empty.
    """
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("nshd needs two nonempty clouds")
    d_ab, _ = KdIndex(b.points).query_many(a.points, 1)
    d_ba, _ = KdIndex(a.points).query_many(b.points, 1)
    worst = float(max(d_ab.max(), d_ba.max()))
    box = compute_obb(a)
    denom = box.volume
    if denom < _DEGENERATE_VOLUME:
        warnings.warn(
            "OBB volume is degenerate; normalizing NSHD by the diagonal instead",
            RuntimeWarning,
            stacklevel=2,
        )
        denom = box.diagonal
    if denom == 0.0:
        # every point coincides: only the zero distance is representable
        return 0.0 if worst == 0.0 else float("inf")
    return worst / denom


def nrmse_fit(cloud: PointCloud, s: BSplineSurface) -> float:
    """Root-mean-square point-to-surface residual over the cloud's OBB diagonal.

    Residuals come from closest-point projection of every point onto the
    surface. The result is clamped to [0, 1]; 0 means the surface passes
    through every point.

    Raises:
        EmptyCloud: the cloud is empty.
    """
    if len(cloud) == 0:
        raise EmptyCloud("nrmse_fit needs a nonempty cloud")
    batch = project_points(s, cloud.points)
    rms = float(np.sqrt(np.mean(batch.distances**2)))
    span = compute_obb(cloud).diagonal
    if span == 0.0:
        return 0.0 if rms == 0.0 else 1.0
    return float(min(max(rms / span, 0.0), 1.0))


def rmse_maps(a: HeightField, b: HeightField) -> float:
    """Root-mean-square difference over cells defined in both height maps.

    Raises:
        InvalidParameter: resolutions differ, or no cell is defined in both.
    """
    if a.resolution != b.resolution:
        raise InvalidParameter(
            f"height maps differ in resolution: {a.resolution} vs {b.resolution}"
        )
    joint = ~a.hole_mask & ~b.hole_mask
    if not joint.any():
        raise InvalidParameter("no cell is defined in both height maps")
    diff = a.values[joint] - b.values[joint]
    return float(np.sqrt(np.mean(diff**2)))


def error_map(result: PointCloud, truth: PointCloud) -> np.ndarray:
    """Distance from each result point to its nearest truth point.

    Raises:
        EmptyCloud: either cloud is empty.
    """
    if len(result) == 0 or len(truth) == 0:
        raise EmptyCloud("error_map needs two nonempty clouds")
    d, _ = KdIndex(truth.points).query_many(result.points, 1)
    return np.ascontiguousarray(d[:, 0])


@dataclass(frozen=True)
class MetricReport:
    """One evaluation run's scalar metrics plus the per-point error map.

    ``gpsnr_db`` is a finite float or ``SATURATED``. ``nrmse`` and ``rmse``
    are None when their inputs (fitted surface, height-map pair) were not
    supplied to :func:`compute_report`.
    """

    gpsnr_db: object
    nshd: float
    nrmse: float | None = None
    rmse: float | None = None
    error_map: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not isinstance(self.gpsnr_db, Saturated):
            value = float(self.gpsnr_db)
            if not np.isfinite(value):
                raise InvalidParameter(f"gpsnr_db must be finite, got {value}")
            object.__setattr__(self, "gpsnr_db", value)
        if not (np.isfinite(self.nshd) and self.nshd >= 0.0):
            raise InvalidParameter(f"nshd must be finite and >= 0, got {self.nshd}")
        if self.nrmse is not None and not (0.0 <= self.nrmse <= 1.0):
            raise InvalidParameter(f"nrmse must lie in [0, 1], got {self.nrmse}")
        if self.rmse is not None and not (np.isfinite(self.rmse) and self.rmse >= 0.0):
            raise InvalidParameter(f"rmse must be finite and >= 0, got {self.rmse}")
        errs = np.asarray(self.error_map, dtype=np.float64)
        if errs.ndim != 1 or not np.isfinite(errs).all() or (errs < 0.0).any():
            raise InvalidParameter("error_map must be 1-D, finite and nonnegative")
        object.__setattr__(self, "error_map", errs)


def compute_report(result: PointCloud, truth: PointCloud, *,
                   surface: BSplineSurface | None = None,
                   height_a: HeightField | None = None,
                   height_b: HeightField | None = None,
                   k_normals: int = 16) -> MetricReport:
    """Evaluate a result cloud against a reference and bundle the numbers.

    GPSNR, NSHD and the error map always compare ``result`` against
    ``truth`` (in that argument order). NRMSE is filled only when a fitted
    surface is supplied and measures it against the reference cloud; RMSE
    is filled only when both height maps are supplied.
    """
    return MetricReport(
        gpsnr_db=gpsnr(result, truth, k_normals=k_normals),
        nshd=nshd(result, truth),
        nrmse=None if surface is None else nrmse_fit(truth, surface),
        rmse=None if height_a is None or height_b is None
        else rmse_maps(height_a, height_b),
        error_map=error_map(result, truth),
    )


def _format_metric(value) -> str:
    if isinstance(value, Saturated):
        return "inf"
    if value is None:
        return "nan"
    return repr(float(value))


def write_report(path, report: MetricReport) -> None:
    """Write the scalar metrics as one key=value line each."""
    with open(path, "w", encoding="ascii") as fh:
        for key in ("gpsnr_db", "nshd", "nrmse", "rmse"):
            fh.write(f"{key}={_format_metric(getattr(report, key))}\n")


def write_report_csv(path, report: MetricReport) -> None:
    """Write the scalar metrics as a one-row CSV table."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("gpsnr_db,nshd,nrmse,rmse\n")
        fh.write(
            ",".join(
                _format_metric(getattr(report, key))
                for key in ("gpsnr_db", "nshd", "nrmse", "rmse")
            )
            + "\n"
        )


def write_error_map(path, cloud: PointCloud, distances) -> None:
    """Write points with their nearest-distance errors as x y z d rows."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.shape != (len(cloud),):
        raise InvalidParameter(
            f"need one distance per point, got {distances.shape} for {len(cloud)}"
        )
    table = np.column_stack([cloud.points, distances])
    np.savetxt(path, table, fmt="%.17g")
