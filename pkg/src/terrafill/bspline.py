"""Tensor-product clamped B-spline surfaces.

Evaluation and derivatives, least-squares fitting with alternating
fit / parameter-correction rounds, and closest-point projection by
grid-seeded damped Newton iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import (
    DegenerateFootprint,
    InvalidParameter,
    ParseError,
    SingularSystem,
)
from .pointcloud import KdIndex, OrientedBoundingBox, PointCloud, footprint_box

logger = logging.getLogger(__name__)


def uniform_clamped_knots(n_ctrl: int, degree: int) -> np.ndarray:
    """Clamped knot vector on [0, 1] with uniformly spaced interior knots.

    Length is n_ctrl + degree + 1; the first and last knots repeat
    degree + 1 times.
    """
    if degree < 1:
        raise InvalidParameter(f"degree must be >= 1, got {degree}")
    if n_ctrl < degree + 1:
        raise InvalidParameter(
            f"need at least degree+1={degree + 1} control points, got {n_ctrl}"
        )
    interior = n_ctrl - degree - 1
    inner = np.arange(1, interior + 1) / (interior + 1)
    return np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)])


def basis(knots, degree: int, i: int, t: float) -> float:
    """Single Cox-de Boor basis value N_{i,degree}(t).

    The last nonempty span is treated as closed on the right so the final
    basis function evaluates to 1 at the end knot.
    """
    knots = np.asarray(knots, dtype=np.float64)
    n_basis = len(knots) - degree - 1
    if not 0 <= i < n_basis:
        raise InvalidParameter(f"basis index {i} outside 0..{n_basis - 1}")
    if t < knots[0] or t > knots[-1]:
        raise InvalidParameter(f"t={t} outside knot range [{knots[0]}, {knots[-1]}]")
    vals = np.zeros(len(knots) - 1)
    if t == knots[-1]:
        nonempty = np.nonzero(knots[:-1] < knots[1:])[0]
        vals[nonempty[-1]] = 1.0
    else:
        vals[(knots[:-1] <= t) & (t < knots[1:])] = 1.0
    for d in range(1, degree + 1):
        nxt = np.zeros(len(vals) - 1)
        for j in range(len(nxt)):
            left_den = knots[j + d] - knots[j]
            right_den = knots[j + d + 1] - knots[j + 1]
            acc = 0.0
            if left_den > 0:
                acc += (t - knots[j]) / left_den * vals[j]
            if right_den > 0:
                acc += (knots[j + d + 1] - t) / right_den * vals[j + 1]
            nxt[j] = acc
        vals = nxt
    return float(vals[i])


def _find_spans(knots, degree, t):
    n_basis = len(knots) - degree - 1
    spans = np.searchsorted(knots, t, side="right") - 1
    return np.clip(spans, degree, n_basis - 1)


def _basis_matrix(knots, degree, t):
    """Spans and the (len(t), degree+1) nonzero basis values at each t."""
    spans = _find_spans(knots, degree, t)
    n = len(t)
    out = np.zeros((n, degree + 1))
    out[:, 0] = 1.0
    left = np.zeros((n, degree + 1))
    right = np.zeros((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = t - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - t
        saved = np.zeros(n)
        for r in range(j):
            den = right[:, r + 1] + left[:, j - r]
            den = np.where(den == 0.0, 1.0, den)
            temp = out[:, r] / den
            out[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        out[:, j] = saved
    # the recurrence leaves ulp-level dust at the domain ends; clamp them
    # to the exact corner-interpolation rows
    at_start = t == knots[0]
    out[at_start] = 0.0
    out[at_start, 0] = 1.0
    at_end = t == knots[-1]
    out[at_end] = 0.0
    out[at_end, -1] = 1.0
    return spans, out


@dataclass(eq=False)
class BSplineSurface:
    """Clamped tensor-product B-spline patch with an (nu, nv, 3) control net.

    Immutable by convention; derivative surfaces are cached on first use.
    """

    degree_u: int
    degree_v: int
    knots_u: np.ndarray
    knots_v: np.ndarray
    control: np.ndarray

    def __post_init__(self):
        self.knots_u = np.asarray(self.knots_u, dtype=np.float64)
        self.knots_v = np.asarray(self.knots_v, dtype=np.float64)
        self.control = np.asarray(self.control, dtype=np.float64)
        if self.degree_u < 0 or self.degree_v < 0:
            raise InvalidParameter("degrees must be >= 0")
        if self.control.ndim != 3 or self.control.shape[2] != 3:
            raise InvalidParameter(
                f"control net must be (nu, nv, 3), got {self.control.shape}"
            )
        if not np.isfinite(self.control).all():
            raise InvalidParameter("control net contains NaN or Inf")
        for name, knots, degree, count in (
            ("u", self.knots_u, self.degree_u, self.control.shape[0]),
            ("v", self.knots_v, self.degree_v, self.control.shape[1]),
        ):
            if count < degree + 1:
                raise InvalidParameter(
                    f"{name}: need >= degree+1 control points, got {count}"
                )
            if len(knots) != count + degree + 1:
                raise InvalidParameter(
                    f"{name}: expected {count + degree + 1} knots, got {len(knots)}"
                )
            if (np.diff(knots) < 0).any():
                raise InvalidParameter(f"{name}: knots must be nondecreasing")
            if knots[0] >= knots[-1]:
                raise InvalidParameter(f"{name}: empty knot range")
            if (knots[: degree + 1] != knots[0]).any() or (
                knots[-(degree + 1):] != knots[-1]
            ).any():
                raise InvalidParameter(
                    f"{name}: knot vector is not clamped (end multiplicity "
                    f"{degree + 1})"
                )

    @property
    def shape(self):
        return self.control.shape[:2]

    @property
    def domain(self):
        return (
            (float(self.knots_u[0]), float(self.knots_u[-1])),
            (float(self.knots_v[0]), float(self.knots_v[-1])),
        )

    def _check_domain(self, uv):
        (u0, u1), (v0, v1) = self.domain
        u, v = uv[:, 0], uv[:, 1]
        if (u < u0).any() or (u > u1).any() or (v < v0).any() or (v > v1).any():
            raise InvalidParameter(
                f"parameter outside domain [{u0},{u1}]x[{v0},{v1}]"
            )

    def evaluate(self, uv):
        """S(u, v) for one (2,) parameter or a batch of (N, 2)."""
        uv = np.asarray(uv, dtype=np.float64)
        single = uv.ndim == 1
        pts = np.atleast_2d(uv)
        self._check_domain(pts)
        su, bu = _basis_matrix(self.knots_u, self.degree_u, pts[:, 0])
        sv, bv = _basis_matrix(self.knots_v, self.degree_v, pts[:, 1])
        iu = su[:, None] - self.degree_u + np.arange(self.degree_u + 1)
        iv = sv[:, None] - self.degree_v + np.arange(self.degree_v + 1)
        window = self.control[iu[:, :, None], iv[:, None, :]]
        out = np.einsum("na,nb,nabk->nk", bu, bv, window)
        return out[0] if single else out

    @cached_property
    def _du(self):
        return _derivative_surface(self, axis=0)

    @cached_property
    def _dv(self):
        return _derivative_surface(self, axis=1)

    def derivatives(self, uv, order: int = 1) -> "Partials":
        """First (and optionally second) partial derivatives at uv.

        Uses knot-differenced control nets; a second derivative of a
        degree-1 direction is identically zero.
        """
        if order not in (1, 2):
            raise InvalidParameter(f"order must be 1 or 2, got {order}")
        uv = np.asarray(uv, dtype=np.float64)
        single = uv.ndim == 1
        pts = np.atleast_2d(uv)
        self._check_domain(pts)

        def ev(surface):
            if surface is None:
                return np.zeros((len(pts), 3))
            return surface.evaluate(pts)

        s_u = ev(self._du)
        s_v = ev(self._dv)
        s_uu = s_uv = s_vv = None
        if order == 2:
            s_uu = ev(self._du._du if self.degree_u >= 2 else None)
            s_uv = ev(self._du._dv if self._du is not None else None)
            s_vv = ev(self._dv._dv if self.degree_v >= 2 else None)
        if single:
            take = lambda a: None if a is None else a[0]
            return Partials(s_u[0], s_v[0], take(s_uu), take(s_uv), take(s_vv))
        return Partials(s_u, s_v, s_uu, s_uv, s_vv)


@dataclass(frozen=True)
class Partials:
    """Surface partial derivatives; second-order fields are None for order 1."""

    s_u: np.ndarray
    s_v: np.ndarray
    s_uu: np.ndarray | None = None
    s_uv: np.ndarray | None = None
    s_vv: np.ndarray | None = None


def _derivative_surface(s: BSplineSurface, axis: int) -> BSplineSurface | None:
    """The exact derivative patch along one parameter direction."""
    degree = s.degree_u if axis == 0 else s.degree_v
    knots = s.knots_u if axis == 0 else s.knots_v
    if degree < 1:
        return None
    ctrl = s.control if axis == 0 else s.control.transpose(1, 0, 2)
    den = knots[degree + 1 : degree + ctrl.shape[0]] - knots[1 : ctrl.shape[0]]
    den = np.where(den == 0.0, 1.0, den)
    q = degree * (ctrl[1:] - ctrl[:-1]) / den[:, None, None]
    if axis == 1:
        q = q.transpose(1, 0, 2)
    new_knots = knots[1:-1]
    if axis == 0:
        return BSplineSurface(degree - 1, s.degree_v, new_knots, s.knots_v, q)
    return BSplineSurface(s.degree_u, degree - 1, s.knots_u, new_knots, q)


@dataclass(frozen=True)
class FitConfig:
    """Control-grid layout and optimization settings for surface fitting.

    ``m`` and ``n`` are the control counts minus one (an (m+1) x (n+1) net).
    ``regularization_weight`` of None picks 1e-4 times the mean squared
    point norm of the cloud being fit.
    """

    m: int = 19
    n: int = 19
    degree: int = 3
    iterations: int = 10
    regularization_weight: float | None = None

    def __post_init__(self):
        if self.degree < 1:
            raise InvalidParameter(f"degree must be >= 1, got {self.degree}")
        if self.m < self.degree or self.n < self.degree:
            raise InvalidParameter(
                f"m and n must be >= degree, got m={self.m} n={self.n} "
                f"degree={self.degree}"
            )
        if self.iterations < 1:
            raise InvalidParameter("iterations must be >= 1")
        lam = self.regularization_weight
        if lam is not None and not lam >= 0:
            raise InvalidParameter("regularization weight must be >= 0")


@dataclass(frozen=True)
class FitObjective:
    """One fit-step objective: data residual, smoothness penalty, their sum."""

    residual: float
    penalty: float
    total: float


@dataclass(frozen=True)
class FitResult:
    surface: BSplineSurface
    objectives: tuple[FitObjective, ...]


@dataclass(frozen=True)
class ProjectionResult:
    """Closest-point query answer for a single point."""

    param: np.ndarray
    foot: np.ndarray
    distance: float
    iterations_used: int
    converged: bool


@dataclass(frozen=True)
class ProjectionBatch:
    """Vectorized closest-point results, one row per query point."""

    params: np.ndarray
    feet: np.ndarray
    distances: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    def __len__(self):
        return len(self.params)

    def result(self, i: int) -> ProjectionResult:
        return ProjectionResult(
            self.params[i],
            self.feet[i],
            float(self.distances[i]),
            int(self.iterations[i]),
            bool(self.converged[i]),
        )


def _footprint_coords(points, obb: OrientedBoundingBox):
    """Coordinates along the two dominant OBB axes plus the height axis."""
    local = (points - obb.center) @ obb.axes.T
    return local[:, :2], local[:, 2]


def parameterize_uniform(cloud: PointCloud, obb: OrientedBoundingBox) -> np.ndarray:
    """(u, v) in [0,1]^2 from affine normalization of the OBB footprint.

    The min/max point along each footprint axis maps exactly to 0 / 1.
    """
    if len(cloud) == 0:
        raise DegenerateFootprint("empty cloud has no footprint")
    fp, _ = _footprint_coords(cloud.points, obb)
    lo = fp.min(axis=0)
    hi = fp.max(axis=0)
    span = hi - lo
    if (span <= 0).any():
        raise DegenerateFootprint(
            f"footprint extent is zero along an axis (spans {span})"
        )
    return (fp - lo) / span


def initialize_surface(cloud: PointCloud, cfg: FitConfig) -> BSplineSurface:
    """Initial control net: footprint grid lifted to per-cell mean heights.

    Control points form a regular (m+1) x (n+1) grid over the footprint in
    the plane of the two dominant OBB axes; each is raised along the third
    axis to the mean height of the points falling in its grid cell (empty
    cells use the global mean height).
    """
    obb = footprint_box(cloud)
    fp, heights = _footprint_coords(cloud.points, obb)
    lo = fp.min(axis=0)
    hi = fp.max(axis=0)
    span = hi - lo
    nu, nv = cfg.m + 1, cfg.n + 1

    def cell_index(coord, span_1d, count):
        if span_1d <= 0:
            return np.zeros(len(coord), dtype=np.intp)
        scaled = (coord - coord.min()) / span_1d * (count - 1)
        return np.clip(np.rint(scaled).astype(np.intp), 0, count - 1)

    ci = cell_index(fp[:, 0], span[0], nu)
    cj = cell_index(fp[:, 1], span[1], nv)
    flat = ci * nv + cj
    sums = np.zeros(nu * nv)
    np.add.at(sums, flat, heights)
    counts = np.bincount(flat, minlength=nu * nv)
    mean_h = np.full(nu * nv, heights.mean())
    filled = counts > 0
    mean_h[filled] = sums[filled] / counts[filled]

    gx = np.linspace(lo[0], hi[0], nu)
    gy = np.linspace(lo[1], hi[1], nv)
    ctrl = (
        obb.center
        + gx[:, None, None] * obb.axes[0]
        + gy[None, :, None] * obb.axes[1]
        + mean_h.reshape(nu, nv)[:, :, None] * obb.axes[2]
    )
    return BSplineSurface(
        cfg.degree,
        cfg.degree,
        uniform_clamped_knots(nu, cfg.degree),
        uniform_clamped_knots(nv, cfg.degree),
        ctrl,
    )


def _second_difference(count: int) -> sparse.csr_matrix:
    if count < 3:
        return sparse.csr_matrix((0, count))
    return sparse.diags(
        [np.ones(count - 2), -2 * np.ones(count - 2), np.ones(count - 2)],
        offsets=[0, 1, 2],
        shape=(count - 2, count),
    ).tocsr()


def _collocation(s: BSplineSurface, params) -> sparse.csr_matrix:
    n = len(params)
    du, dv = s.degree_u, s.degree_v
    nu, nv = s.shape
    su, bu = _basis_matrix(s.knots_u, du, params[:, 0])
    sv, bv = _basis_matrix(s.knots_v, dv, params[:, 1])
    iu = su[:, None] - du + np.arange(du + 1)
    iv = sv[:, None] - dv + np.arange(dv + 1)
    cols = (iu[:, :, None] * nv + iv[:, None, :]).reshape(n, -1)
    vals = (bu[:, :, None] * bv[:, None, :]).reshape(n, -1)
    rows = np.repeat(np.arange(n), (du + 1) * (dv + 1))
    mat = sparse.coo_matrix(
        (vals.ravel(), (rows, cols.ravel())), shape=(n, nu * nv)
    ).tocsr()
    mat.eliminate_zeros()
    return mat


def _resolve_lambda(cfg: FitConfig, cloud: PointCloud) -> float:
    if cfg.regularization_weight is not None:
        return float(cfg.regularization_weight)
    return 1e-4 * float(np.mean(np.sum(cloud.points**2, axis=1)))


def fit_step(
    cloud: PointCloud, params, cfg: FitConfig, s: BSplineSurface
):
    """One linear least-squares solve for the control net at fixed params.

    Minimizes sum |S(u_i, v_i) - p_i|^2 plus lambda times the squared
    second differences of the control net along both grid directions.

    Returns:
        (surface, FitObjective)
    """
    params = np.asarray(params, dtype=np.float64)
    if len(params) != len(cloud):
        raise InvalidParameter(
            f"params length {len(params)} != cloud length {len(cloud)}"
        )
    nu, nv = s.shape
    lam = _resolve_lambda(cfg, cloud)
    a = _collocation(s, params)
    if lam == 0.0 and (a.getnnz(axis=0) == 0).any():
        raise SingularSystem(
            "control points without basis support need regularization > 0"
        )
    normal = (a.T @ a).tocsc()
    d_u = sparse.kron(_second_difference(nu), sparse.eye(nv)).tocsr()
    d_v = sparse.kron(sparse.eye(nu), _second_difference(nv)).tocsr()
    if lam > 0.0:
        normal = (normal + lam * (d_u.T @ d_u + d_v.T @ d_v)).tocsc()
    rhs = a.T @ cloud.points
    try:
        solved = splu(normal).solve(rhs)
    except RuntimeError as exc:
        raise SingularSystem(f"normal equations are singular: {exc}") from None
    fitted = BSplineSurface(
        s.degree_u, s.degree_v, s.knots_u, s.knots_v, solved.reshape(nu, nv, 3)
    )
    residual = float(np.sum((a @ solved - cloud.points) ** 2))
    penalty = float(lam * (np.sum((d_u @ solved) ** 2) + np.sum((d_v @ solved) ** 2)))
    return fitted, FitObjective(residual, penalty, residual + penalty)


def project_points(
    s: BSplineSurface,
    points,
    init_grid=(64, 64),
    max_iter: int = 30,
    tol: float = 1e-10,
) -> ProjectionBatch:
    """Closest surface point for each query point.

    Seeds each query at the nearest sample of a uniform init_grid over the
    domain, then runs damped Newton on the squared distance with iterates
    clamped to the domain; only improving steps are accepted, so the final
    distance never exceeds the seed distance.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    zeta, eta = init_grid
    if zeta < 2 or eta < 2:
        raise InvalidParameter(f"init_grid must be >= 2 per axis, got {init_grid}")
    if tol <= 0 or max_iter < 1:
        raise InvalidParameter("tol must be > 0 and max_iter >= 1")
    (u0, u1), (v0, v1) = s.domain
    gu = np.linspace(u0, u1, zeta)
    gv = np.linspace(v0, v1, eta)
    grid_uv = np.column_stack(
        [np.repeat(gu, eta), np.tile(gv, zeta)]
    )
    grid_pts = s.evaluate(grid_uv)
    _, seed_idx = KdIndex(grid_pts).query_many(points, 1)
    uv = grid_uv[seed_idx[:, 0]].copy()
    f2 = np.sum((s.evaluate(uv) - points) ** 2, axis=1)

    n = len(points)
    iters = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    active = np.arange(n)
    lo = np.array([u0, v0])
    hi = np.array([u1, v1])
    for _ in range(max_iter):
        if len(active) == 0:
            break
        sub_uv = uv[active]
        sub_p = points[active]
        part = s.derivatives(sub_uv, order=2)
        err = s.evaluate(sub_uv) - sub_p
        gu_ = 2 * np.sum(err * part.s_u, axis=1)
        gv_ = 2 * np.sum(err * part.s_v, axis=1)
        huu = 2 * (np.sum(part.s_u**2, axis=1) + np.sum(err * part.s_uu, axis=1))
        hvv = 2 * (np.sum(part.s_v**2, axis=1) + np.sum(err * part.s_vv, axis=1))
        huv = 2 * (np.sum(part.s_u * part.s_v, axis=1) + np.sum(err * part.s_uv, axis=1))
        det = huu * hvv - huv**2
        safe = np.where(np.abs(det) < 1e-300, 1.0, det)
        du = -(hvv * gu_ - huv * gv_) / safe
        dv = -(huu * gv_ - huv * gu_) / safe
        descent = gu_ * du + gv_ * dv
        bad = (
            (det <= 0)
            | (descent >= 0)
            | ~np.isfinite(du)
            | ~np.isfinite(dv)
        )
        du[bad] = -gu_[bad]
        dv[bad] = -gv_[bad]
        # boundary handling: when a coordinate is pinned at the domain edge
        # with the gradient pushing outward, freeze it and take the 1D
        # Newton step along the other coordinate
        fix_u = ((sub_uv[:, 0] <= lo[0]) & (gu_ > 0)) | (
            (sub_uv[:, 0] >= hi[0]) & (gu_ < 0)
        )
        fix_v = ((sub_uv[:, 1] <= lo[1]) & (gv_ > 0)) | (
            (sub_uv[:, 1] >= hi[1]) & (gv_ < 0)
        )
        dv_1d = np.where(hvv > 1e-300, -gv_ / np.where(hvv > 0, hvv, 1.0), -gv_)
        du_1d = np.where(huu > 1e-300, -gu_ / np.where(huu > 0, huu, 1.0), -gu_)
        du = np.where(fix_u, 0.0, np.where(fix_v, du_1d, du))
        dv = np.where(fix_v, 0.0, np.where(fix_u, dv_1d, dv))
        step = np.column_stack([du, dv])

        f_old = f2[active]
        cand = np.clip(sub_uv + step, lo, hi)
        fc = np.sum((s.evaluate(cand) - sub_p) ** 2, axis=1)
        for _halving in range(20):
            worse = fc > f_old
            if not worse.any():
                break
            step[worse] *= 0.5
            cand[worse] = np.clip(sub_uv[worse] + step[worse], lo, hi)
            fc[worse] = np.sum(
                (s.evaluate(cand[worse]) - sub_p[worse]) ** 2, axis=1
            )
        improved = fc <= f_old
        moved = np.linalg.norm(cand - sub_uv, axis=1)
        acc = active[improved]
        uv[acc] = cand[improved]
        f2[acc] = fc[improved]
        iters[active] += 1
        done = ~improved | (moved < tol)
        converged[active[done]] = True
        active = active[~done]

    feet = s.evaluate(uv)
    dist = np.linalg.norm(points - feet, axis=1)
    return ProjectionBatch(uv, feet, dist, iters, converged)


def project_point(
    s: BSplineSurface,
    p,
    init_grid=(64, 64),
    max_iter: int = 30,
    tol: float = 1e-10,
) -> ProjectionResult:
    """Closest-point projection of a single point; see project_points."""
    batch = project_points(s, np.asarray(p, dtype=np.float64)[None, :],
                          init_grid=init_grid, max_iter=max_iter, tol=tol)
    return batch.result(0)


def fit_surface(cloud: PointCloud, cfg: FitConfig | None = None) -> FitResult:
    """Fit a B-spline surface by alternating LSQ fits and param correction.

    Each round solves the linear fit at the current parameters, then
    re-projects every point onto the new surface, keeping the projected
    parameter only when it reduces that point's residual. The combined
    objective (residual + smoothness penalty) is non-increasing.
    """
    if cfg is None:
        cfg = FitConfig()
    if len(cloud) == 0:
        raise DegenerateFootprint("cannot fit an empty cloud")
    obb = footprint_box(cloud)
    params = parameterize_uniform(cloud, obb)
    surface = initialize_surface(cloud, cfg)
    objectives = []
    for round_no in range(cfg.iterations):
        surface, objective = fit_step(cloud, params, cfg, surface)
        objectives.append(objective)
        logger.debug(
            "fit round %d: residual=%.6e penalty=%.6e total=%.6e",
            round_no, objective.residual, objective.penalty, objective.total,
        )
        batch = project_points(surface, cloud.points)
        old_d2 = np.sum((surface.evaluate(params) - cloud.points) ** 2, axis=1)
        better = batch.distances**2 < old_d2
        params[better] = batch.params[better]
    return FitResult(surface, tuple(objectives))


def write_surface(path, s: BSplineSurface):
    """Serialize a surface as text: header, degrees, knots, control grid."""
    nu, nv = s.shape
    lines = ["bspline 1", f"degree {s.degree_u} {s.degree_v}"]
    lines.append(
        f"knots_u {len(s.knots_u)} " + " ".join("%.9g" % k for k in s.knots_u)
    )
    lines.append(
        f"knots_v {len(s.knots_v)} " + " ".join("%.9g" % k for k in s.knots_v)
    )
    lines.append(f"control {nu} {nv}")
    flat = s.control.reshape(-1, 3)
    lines.extend("%.9g %.9g %.9g" % (p[0], p[1], p[2]) for p in flat)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_surface(path) -> BSplineSurface:
    """Parse the text format produced by write_surface."""
    path = str(path)
    with open(path, "r") as fh:
        raw = [ln.strip() for ln in fh]
    lines = [(i + 1, ln) for i, ln in enumerate(raw) if ln]
    if not lines or lines[0][1] != "bspline 1":
        raise ParseError("missing 'bspline 1' header", path=path, line=1)

    def expect(pos, keyword, n_values):
        if pos >= len(lines):
            raise ParseError(f"unexpected end of file, wanted '{keyword}'",
                             path=path)
        lineno, text = lines[pos]
        tokens = text.split()
        if tokens[0] != keyword:
            raise ParseError(f"expected '{keyword}', found '{tokens[0]}'",
                             path=path, line=lineno)
        if n_values is not None and len(tokens) != n_values + 1:
            raise ParseError(
                f"'{keyword}' needs {n_values} values", path=path, line=lineno
            )
        return lineno, tokens[1:]

    try:
        _, deg = expect(1, "degree", 2)
        degree_u, degree_v = int(deg[0]), int(deg[1])
        lineno, ku = expect(2, "knots_u", None)
        if len(ku) != int(ku[0]) + 1:
            raise ParseError("knots_u count mismatch", path=path, line=lineno)
        knots_u = np.array([float(x) for x in ku[1:]])
        lineno, kv = expect(3, "knots_v", None)
        if len(kv) != int(kv[0]) + 1:
            raise ParseError("knots_v count mismatch", path=path, line=lineno)
        knots_v = np.array([float(x) for x in kv[1:]])
        _, dims = expect(4, "control", 2)
        nu, nv = int(dims[0]), int(dims[1])
    except ValueError:
        raise ParseError("malformed numeric field", path=path) from None
    rows = lines[5:]
    if len(rows) != nu * nv:
        raise ParseError(
            f"expected {nu * nv} control rows, found {len(rows)}", path=path
        )
    ctrl = np.zeros((nu * nv, 3))
    for k, (lineno, text) in enumerate(rows):
        tokens = text.split()
        if len(tokens) != 3:
            raise ParseError("control row needs 3 values", path=path, line=lineno)
        try:
            ctrl[k] = [float(t) for t in tokens]
        except ValueError:
            raise ParseError("malformed control value", path=path,
                             line=lineno) from None
    try:
        return BSplineSurface(degree_u, degree_v, knots_u, knots_v,
                              ctrl.reshape(nu, nv, 3))
    except InvalidParameter as exc:
        raise ParseError(f"invalid surface: {exc}", path=path) from None
