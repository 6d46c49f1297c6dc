"""Point-cloud container, spatial index, normals, OBB and voxel downsampling."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import EmptyCloud, InvalidParameter

_UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points with optional unit normals.

    ``points`` is an (N, 3) float64 array; ``normals``, when present, has the
    same shape and every row has Euclidean norm within 1e-6 of 1. All
    coordinates must be finite.
    """

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidParameter(f"points must be (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise InvalidParameter("points contain NaN or Inf")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise InvalidParameter(
                    f"normals shape {nrm.shape} does not match points {pts.shape}"
                )
            if not np.isfinite(nrm).all():
                raise InvalidParameter("normals contain NaN or Inf")
            lengths = np.linalg.norm(nrm, axis=1)
            if len(lengths) and np.abs(lengths - 1.0).max() > _UNIT_NORM_TOL:
                raise InvalidParameter("normals are not unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.points.shape[0]

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals)

    def without_normals(self) -> "PointCloud":
        return PointCloud(self.points)


def concat_clouds(a: PointCloud, b: PointCloud) -> PointCloud:
    """Concatenate two clouds; normals are kept only if both carry them."""
    pts = np.vstack([a.points, b.points])
    if a.normals is not None and b.normals is not None:
        return PointCloud(pts, np.vstack([a.normals, b.normals]))
    return PointCloud(pts)


@dataclass(frozen=True)
class OrientedBoundingBox:
    """Covariance-aligned bounding box.

    ``axes`` holds one orthonormal axis per row, ordered by descending
    covariance eigenvalue; ``half_extents`` are the nonnegative half widths
    along those axes.
    """

    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray

    @property
    def longest_axis(self) -> int:
        return int(np.argmax(self.half_extents))

    @property
    def shortest_axis(self) -> int:
        return int(np.argmin(self.half_extents))

    @property
    def diagonal(self) -> float:
        """Full diagonal length, 2 * |half_extents|."""
        return float(2.0 * np.linalg.norm(self.half_extents))

    @property
    def volume(self) -> float:
        return float(np.prod(2.0 * self.half_extents))


def _box_around(pts: np.ndarray, axes: np.ndarray) -> OrientedBoundingBox:
    centroid = pts.mean(axis=0)
    proj = (pts - centroid) @ axes.T
    lo = proj.min(axis=0)
    hi = proj.max(axis=0)
    center = centroid + 0.5 * (lo + hi) @ axes
    return OrientedBoundingBox(center, axes, 0.5 * (hi - lo))


def _canonical_frame(axes: np.ndarray) -> np.ndarray:
    """Deterministic signs for the first two rows, right-handed third."""
    axes = axes.copy()
    for i in range(2):
        if axes[i, np.argmax(np.abs(axes[i]))] < 0:
            axes[i] = -axes[i]
    axes[2] = np.cross(axes[0], axes[1])
    return axes


def compute_obb(cloud: PointCloud) -> OrientedBoundingBox:
    """Covariance-eigenvector OBB covering all points exactly.

    Degenerate clouds (coplanar, collinear, single point) yield zero
    half-extents on the trailing axes.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot compute OBB of an empty cloud")
    pts = cloud.points
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(cloud)
    eigvals, eigvecs = np.linalg.eigh(cov)
    # descending eigenvalue order; deterministic signs, right-handed frame
    axes = _canonical_frame(eigvecs[:, ::-1].T)
    return _box_around(pts, axes)


def footprint_box(cloud: PointCloud) -> OrientedBoundingBox:
    """OBB with in-plane axes from the minimum-area bounding rectangle.

    The covariance frame pins down the height direction well, but for a
    near-square footprint its two in-plane eigenvalues almost tie and the
    eigenvectors spin freely with sampling noise, which would rotate the
    footprint inside the parameter square and waste a large corner of it.
    Rotating calipers over the planar convex hull give the tightest frame
    and a reproducible one.  Clouds whose footprint degenerates to a line
    or point keep the covariance frame.
    """
    base = compute_obb(cloud)
    plane = (cloud.points - base.center) @ base.axes[:2].T
    try:
        hull = ConvexHull(plane)
    except QhullError:
        return base
    corners = plane[hull.vertices]
    edges = np.roll(corners, -1, axis=0) - corners
    angles = np.unique(np.arctan2(edges[:, 1], edges[:, 0]) % (np.pi / 2))
    best_area = np.inf
    best = None
    for theta in angles:
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, s], [-s, c]])
        ext = np.ptp(corners @ rot.T, axis=0)
        if ext[0] * ext[1] < best_area:
            best_area = ext[0] * ext[1]
            best = (rot, ext)
    rot, ext = best
    in_plane = rot @ base.axes[:2]
    if ext[1] > ext[0]:
        in_plane = in_plane[::-1]
    axes = _canonical_frame(np.vstack([in_plane, base.axes[2]]))
    return _box_around(cloud.points, axes)


class KdIndex:
    """Immutable k-d tree over a point snapshot with deterministic queries.

    Results match a brute-force scan exactly: neighbors sorted by ascending
    squared distance, ties broken by ascending point index.
    """

    def __init__(self, points):
        if isinstance(points, PointCloud):
            points = points.points
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise EmptyCloud("KdIndex needs at least one point")
        self._points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._points

    def _brute_row(self, point, k):
        d2 = np.sum((self._points - point) ** 2, axis=1)
        order = np.lexsort((np.arange(len(d2)), d2))[:k]
        return d2[order], order

    def query(self, point, k):
        """k nearest neighbors of one point; returns (distances, indices)."""
        point = np.asarray(point, dtype=np.float64)
        k_eff = min(int(k), len(self))
        if k_eff < 1:
            raise InvalidParameter("k must be >= 1")
        d, _ = self._tree.query(point, k=k_eff)
        dmax = float(np.max(d))
        cand = self._tree.query_ball_point(point, dmax * (1.0 + 1e-9) + 1e-300)
        cand = np.asarray(sorted(cand), dtype=np.intp)
        d2 = np.sum((self._points[cand] - point) ** 2, axis=1)
        order = np.lexsort((cand, d2))[:k_eff]
        sel = cand[order]
        return np.sqrt(d2[order]), sel

    def query_many(self, points, k):
        """Vectorized k-NN for many query points; same tie rule as query()."""
        pts = np.asarray(points, dtype=np.float64)
        n = len(self)
        k_eff = min(int(k), n)
        if k_eff < 1:
            raise InvalidParameter("k must be >= 1")
        pad = min(n, k_eff + 8)
        _, idx = self._tree.query(pts, k=pad)
        idx = idx.reshape(len(pts), pad)
        diff = self._points[idx] - pts[:, None, :]
        d2 = np.einsum("mkd,mkd->mk", diff, diff)
        order = np.lexsort((idx, d2), axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)
        if pad < n:
            # a tie group at the cutoff may extend past the padded window
            suspect = np.nonzero(d2[:, k_eff - 1] >= d2[:, -1])[0]
            for row in suspect:
                d2_row, idx_row = self._brute_row(pts[row], pad)
                d2[row] = d2_row
                idx[row] = idx_row
        return np.sqrt(d2[:, :k_eff]), idx[:, :k_eff]


def voxel_downsample(cloud: PointCloud, ratio: float) -> PointCloud:
    """Replace the points of each occupied voxel by their gravity center.

    The voxel edge is ``ratio`` times the longest OBB axis length. Output
    voxels are ordered by ascending voxel key, one centroid per non-empty
    voxel; normals are not carried over.
    """
    if not (0.0 < ratio <= 1.0):
        raise InvalidParameter(f"voxel ratio must be in (0, 1], got {ratio}")
    if len(cloud) == 0:
        raise EmptyCloud("cannot downsample an empty cloud")
    obb = compute_obb(cloud)
    edge = ratio * 2.0 * float(obb.half_extents.max())
    if edge <= 0.0:
        # all points coincide
        return PointCloud(cloud.points.mean(axis=0, keepdims=True))
    origin = cloud.points.min(axis=0)
    keys = np.floor((cloud.points - origin) / edge).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, cloud.points)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    return PointCloud(sums / counts[:, None])


def estimate_normals(cloud: PointCloud, k: int = 16):
    """PCA normals from each point's k-nearest neighborhood.

    The normal is the unit eigenvector of the smallest eigenvalue of the
    covariance of the point plus its k nearest neighbors. Neighborhoods whose
    covariance is rank-deficient (collinear or coincident points) get an
    arbitrary perpendicular of the dominant direction instead.

    Returns:
        (cloud_with_normals, degenerate_indices) where the second element
        lists the points that hit the rank-deficient fallback.
    """
    if k < 3:
        raise InvalidParameter(f"k must be >= 3, got {k}")
    n = len(cloud)
    if n < 2:
        raise InvalidParameter("normal estimation needs at least 2 points")
    kd = KdIndex(cloud)
    m = min(k + 1, n)  # the point itself plus up to k neighbors
    _, idx = kd.query_many(cloud.points, m)
    nbrs = cloud.points[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nmi,nmj->nij", centered, centered) / m
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0].copy()
    degenerate = np.nonzero(eigvals[:, 1] <= 1e-9 * eigvals[:, 2])[0]
    if len(degenerate):
        dominant = eigvecs[degenerate, :, 2]
        normals[degenerate] = _any_perpendicular(dominant)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    # deterministic pre-orientation sign: largest-magnitude component positive
    flip = np.take_along_axis(
        normals, np.argmax(np.abs(normals), axis=1)[:, None], axis=1
    )[:, 0] < 0
    normals[flip] = -normals[flip]
    return cloud.with_normals(normals), degenerate


def _any_perpendicular(directions):
    """A unit vector perpendicular to each row of ``directions``."""
    helper = np.zeros_like(directions)
    helper[np.arange(len(directions)), np.argmin(np.abs(directions), axis=1)] = 1.0
    perp = np.cross(directions, helper)
    return perp / np.linalg.norm(perp, axis=1, keepdims=True)


def orient_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    """Make normal signs consistent by propagation along an MST.

    The tree spans the k-NN graph with edge weight 1 - |n_a . n_b|. Each
    connected component is seeded at its point of maximal coordinate along
    the OBB's shortest axis, with that normal forced positive along the
    axis; signs then propagate outward, flipping any normal that disagrees
    with its tree parent. Deterministic and idempotent.
    """
    if cloud.normals is None:
        raise InvalidParameter("orient_normals requires normals")
    n = len(cloud)
    normals = cloud.normals.copy()
    if n == 1:
        return cloud.with_normals(normals)
    kd = KdIndex(cloud)
    m = min(k + 1, n)
    _, idx = kd.query_many(cloud.points, m)
    src = np.repeat(np.arange(n), m - 1)
    dst = idx[:, 1:].ravel()
    agree = np.abs(np.einsum("ij,ij->i", normals[src], normals[dst]))
    # +1e-9 keeps fully-agreeing edges from vanishing as explicit zeros
    weights = (1.0 - np.minimum(agree, 1.0)) + 1e-9
    graph = coo_matrix((weights, (src, dst)), shape=(n, n)).tocsr()
    graph = graph.maximum(graph.T)  # symmetrize; opposite directions agree
    mst = minimum_spanning_tree(graph)
    adj = (mst + mst.T).tolil().rows

    n_comp, labels = connected_components(graph, directed=False)
    axis_short = compute_obb(cloud).axes[2]
    if axis_short[np.argmax(np.abs(axis_short))] < 0:
        axis_short = -axis_short  # canonical 'up' side for the seed normal
    coord = (cloud.points - cloud.points.mean(axis=0)) @ axis_short
    visited = np.zeros(n, dtype=bool)
    for comp in range(n_comp):
        members = np.nonzero(labels == comp)[0]
        seed = members[np.argmax(coord[members])]
        if normals[seed] @ axis_short < 0:
            normals[seed] = -normals[seed]
        visited[seed] = True
        queue = deque([seed])
        while queue:
            cur = queue.popleft()
            for nb in adj[cur]:
                if not visited[nb]:
                    visited[nb] = True
                    if normals[cur] @ normals[nb] < 0:
                        normals[nb] = -normals[nb]
                    queue.append(nb)
    return cloud.with_normals(normals)
