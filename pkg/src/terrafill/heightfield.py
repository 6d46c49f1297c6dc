"""Signed relative-height decomposition of a cloud over a base surface.

Projects every point onto the surface, signs the projection distances by
consistently oriented foot-point normals, picks a raster resolution from
the sampling density, and rasterizes the signed heights into a square
grid whose empty cells form the hole mask.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .bspline import BSplineSurface, project_points
from .errors import EmptyCloud, EmptyProjection, InvalidParameter, ParseError
from .pointcloud import (
    KdIndex,
    PointCloud,
    compute_obb,
    estimate_normals,
    orient_normals,
)

_HF_MAGIC = b"HF01"
_COUNTS_MAGIC = b"HC01"


@dataclass(frozen=True)
class SignedProjection:
    """One projected point: its parameter, foot point and signed height."""

    param: np.ndarray
    foot: np.ndarray
    signed_distance: float
    source_index: int


@dataclass(frozen=True)
class ProjectionSet:
    """Valid signed projections (struct-of-arrays) plus the rejected rows.

    ``source_indices`` maps each row back into the projected cloud;
    ``invalid_indices`` lists points whose residual direction was too far
    from the local surface normal to trust the sign.
    """

    params: np.ndarray
    feet: np.ndarray
    signed_distances: np.ndarray
    source_indices: np.ndarray
    invalid_indices: np.ndarray

    def __len__(self):
        return len(self.params)

    def record(self, i: int) -> SignedProjection:
        return SignedProjection(
            self.params[i],
            self.feet[i],
            float(self.signed_distances[i]),
            int(self.source_indices[i]),
        )


def project_cloud(
    cloud: PointCloud,
    s: BSplineSurface,
    k_normals: int = 16,
    epsilon: float = 1e-3,
    init_grid=(64, 64),
    max_iter: int = 30,
    tol: float = 1e-10,
) -> ProjectionSet:
    """Project a cloud onto the surface and sign the distances.

    Foot-point normals come from PCA over the foot-point set, made
    consistent by spanning-tree propagation and then flipped, if needed,
    to agree with the surface's own cross-product normal field (majority
    vote), so downstream offsetting along surface normals reproduces the
    signs. A point is invalid when 1 - |n . R| >= epsilon, where R is the
    unit residual direction; invalid rows are excluded but reported.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot project an empty cloud")
    if not 0 < epsilon < 1:
        raise InvalidParameter(f"epsilon must be in (0, 1), got {epsilon}")
    batch = project_points(s, cloud.points, init_grid=init_grid,
                           max_iter=max_iter, tol=tol)
    feet = batch.feet
    part = s.derivatives(batch.params, order=1)
    cross = np.cross(part.s_u, part.s_v)
    cross_len = np.linalg.norm(cross, axis=1)
    usable = cross_len > 1e-12
    cross_unit = np.where(usable[:, None], cross, 1.0)
    cross_unit = cross_unit / np.linalg.norm(cross_unit, axis=1, keepdims=True)

    with_normals, degenerate = estimate_normals(PointCloud(feet), k=k_normals)
    pca_normals = with_normals.normals.copy()
    # rank-deficient foot neighborhoods can't vote on a normal; use the
    # surface's own normal there instead of an arbitrary perpendicular
    fallback = degenerate[usable[degenerate]]
    pca_normals[fallback] = cross_unit[fallback]
    normals = orient_normals(PointCloud(feet, pca_normals), k=k_normals).normals

    agree = np.einsum("ij,ij->i", normals[usable], cross_unit[usable])
    if np.sum(np.sign(agree)) < 0:
        normals = -normals

    residual = cloud.points - feet
    dist = np.linalg.norm(residual, axis=1)
    scale = compute_obb(cloud).diagonal
    near = dist <= 1e-9 * (scale if scale > 0 else 1.0)
    direction = residual / np.where(near, 1.0, dist)[:, None]
    alignment = np.einsum("ij,ij->i", normals, direction)
    valid = near | (1.0 - np.abs(alignment) < epsilon)
    if not valid.any():
        raise EmptyProjection(
            f"all {len(cloud)} projections failed the sign-validity test"
        )
    omega = np.where(alignment >= 0, 1.0, -1.0)
    omega[near] = 1.0
    signed = omega * dist
    idx = np.arange(len(cloud))
    return ProjectionSet(
        params=batch.params[valid],
        feet=feet[valid],
        signed_distances=signed[valid],
        source_indices=idx[valid],
        invalid_indices=idx[~valid],
    )


def estimate_density(params, k: int = 8) -> float:
    """Mean over points of the median distance to the k nearest UV neighbors."""
    params = np.asarray(params, dtype=np.float64)
    if k < 1:
        raise InvalidParameter(f"k must be >= 1, got {k}")
    if len(params) < k + 1:
        raise InvalidParameter(
            f"density estimation needs at least k+1={k + 1} points, "
            f"got {len(params)}"
        )
    dists, _ = KdIndex(params).query_many(params, k + 1)
    medians = np.median(dists[:, 1:], axis=1)  # drop the self-distance
    return float(medians.mean())


def choose_resolution(rho: float, r_max: int = 4096) -> int:
    """Raster resolution r = round(1/rho), clamped to [2, r_max]."""
    if not (np.isfinite(rho) and rho > 0):
        raise InvalidParameter(f"density must be positive, got {rho}")
    if r_max < 2:
        raise InvalidParameter(f"r_max must be >= 2, got {r_max}")
    return int(np.clip(round(1.0 / rho), 2, r_max))


@dataclass(frozen=True)
class HeightField:
    """Square signed-height raster; NaN cells are holes.

    ``values[x, y]`` covers the UV cell [x/r,(x+1)/r) x [y/r,(y+1)/r);
    ``counts`` stores how many projections each cell absorbed (0 for
    holes); ``density`` is the UV sampling density the resolution was
    derived from (0.0 when not recorded).
    """

    values: np.ndarray
    counts: np.ndarray
    density: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "counts", counts)
        r = values.shape[0] if values.ndim == 2 else 0
        if values.ndim != 2 or values.shape != (r, r) or r < 2:
            raise InvalidParameter(
                f"values must be square with r >= 2, got {values.shape}"
            )
        if counts.shape != values.shape:
            raise InvalidParameter("counts shape must match values")
        if (counts < 0).any():
            raise InvalidParameter("counts must be nonnegative")
        holes = np.isnan(values)
        if ((counts == 0) != holes).any():
            raise InvalidParameter("NaN cells and zero counts must coincide")
        if np.isinf(values).any():
            raise InvalidParameter("values must be finite or NaN")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def hole_mask(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def n_holes(self) -> int:
        return int(self.hole_mask.sum())

    def mean_count(self) -> float:
        """Mean projection count over valued cells."""
        filled = self.counts[self.counts > 0]
        return float(filled.mean()) if len(filled) else 0.0

    def with_values(self, values) -> "HeightField":
        """Same grid with replaced cell values; counts kept for old holes."""
        values = np.asarray(values, dtype=np.float64)
        counts = self.counts.copy()
        counts[~np.isnan(values) & (counts == 0)] = 1
        counts[np.isnan(values)] = 0
        return HeightField(values, counts, self.density)


def rasterize(projections: ProjectionSet, r: int, density: float = 0.0) -> HeightField:
    """Bin signed heights into an r x r grid, keeping a per-cell extremum.

    Cell (x, y) holds the projections with floor(u*r) = x, floor(v*r) = y
    (u = 1 goes to the last cell). A cell with more positive than
    non-positive heights keeps its maximum, otherwise its minimum; empty
    cells are holes. Order-independent by construction.
    """
    if r < 2:
        raise InvalidParameter(f"resolution must be >= 2, got {r}")
    if len(projections) == 0:
        raise EmptyProjection("rasterize needs at least one projection")
    uv = projections.params
    d = projections.signed_distances
    ix = np.clip(np.floor(uv[:, 0] * r).astype(np.intp), 0, r - 1)
    iy = np.clip(np.floor(uv[:, 1] * r).astype(np.intp), 0, r - 1)
    flat = ix * r + iy

    counts = np.zeros(r * r, dtype=np.int64)
    np.add.at(counts, flat, 1)
    pos = np.zeros(r * r, dtype=np.int64)
    np.add.at(pos, flat, (d > 0).astype(np.int64))
    maxima = np.full(r * r, -np.inf)
    np.maximum.at(maxima, flat, d)
    minima = np.full(r * r, np.inf)
    np.minimum.at(minima, flat, d)

    neg = counts - pos
    values = np.where(pos >= neg, maxima, minima)
    values[counts == 0] = np.nan
    return HeightField(values.reshape(r, r), counts.reshape(r, r), density)


def write_heightfield(path, hf: HeightField):
    """Binary dump: magic, resolution, density, float32 cells (NaN = hole).

    Cell counts go to a '<path>.counts' sidecar so density-matched refill
    survives a round trip.
    """
    path = str(path)
    r = hf.resolution
    with open(path, "wb") as fh:
        fh.write(_HF_MAGIC)
        fh.write(struct.pack("<I", r))
        fh.write(struct.pack("<d", hf.density))
        fh.write(hf.values.astype("<f4").tobytes())
    with open(path + ".counts", "wb") as fh:
        fh.write(_COUNTS_MAGIC)
        fh.write(struct.pack("<I", r))
        fh.write(hf.counts.astype("<u4").tobytes())


def read_heightfield(path) -> HeightField:
    """Read a heightfield dump; missing counts sidecar degrades to 0/1."""
    path = str(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != _HF_MAGIC:
        raise ParseError("not a heightfield file (bad magic)", path=path)
    r = struct.unpack("<I", blob[4:8])[0]
    density = struct.unpack("<d", blob[8:16])[0]
    if r < 2:
        raise ParseError(f"invalid resolution {r}", path=path)
    need = 16 + 4 * r * r
    if len(blob) < need:
        raise ParseError(
            f"truncated cells: need {need} bytes, have {len(blob)}", path=path
        )
    values = np.frombuffer(blob[16:need], dtype="<f4").astype(np.float64)
    values = values.reshape(r, r)
    counts = None
    try:
        with open(path + ".counts", "rb") as fh:
            cblob = fh.read()
        if cblob[:4] != _COUNTS_MAGIC or len(cblob) < 8 + 4 * r * r:
            raise ParseError("corrupt counts sidecar", path=path + ".counts")
        if struct.unpack("<I", cblob[4:8])[0] != r:
            raise ParseError("counts resolution mismatch", path=path + ".counts")
        counts = np.frombuffer(cblob[8: 8 + 4 * r * r], dtype="<u4")
        counts = counts.astype(np.int64).reshape(r, r)
    except FileNotFoundError:
        counts = (~np.isnan(values)).astype(np.int64)
    return HeightField(values, counts, density)


def write_pgm_preview(path, hf: HeightField):
    """8-bit PGM of the raster: holes are 0, values span 1..255 (min-max)."""
    values = hf.values
    holes = hf.hole_mask
    img = np.zeros(values.shape, dtype=np.uint8)
    if (~holes).any():
        filled = values[~holes]
        lo, hi = filled.min(), filled.max()
        if hi > lo:
            scaled = 1 + np.rint((values - lo) / (hi - lo) * 254)
        else:
            scaled = np.full_like(values, 255.0)
        img[~holes] = scaled[~holes].astype(np.uint8)
    with open(path, "wb") as fh:
        r = hf.resolution
        fh.write(f"P5\n{r} {r}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
