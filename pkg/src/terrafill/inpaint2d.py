"""Gradient-domain hole filling for height rasters.

The filling strategy works on the two forward-difference gradient grids of
a :class:`~terrafill.heightfield.HeightField` rather than on raw heights.
For every patch that overlaps a hole, a Barnes-style patch match locates
the most similar fully-known patch; the matched patches then vote on the
missing gradient values, and a Poisson solve with Dirichlet boundary
values integrates the guidance field back into heights.  Restricting
sources to fully-known patches keeps hole content from contaminating the
votes, and the forward-difference / backward-divergence pairing makes the
discrete Laplacian exact on consistent fields.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import sparse
from scipy.sparse.linalg import cg, splu

from .errors import (
    InvalidParameter,
    NoValidSourcePatch,
    SolverDivergence,
    UncoveredHoleCell,
)
from .heightfield import HeightField, write_heightfield

__all__ = [
    "GradientField",
    "InpaintConfig",
    "NearestNeighborField",
    "aggregate_gradients",
    "compute_gradients",
    "dump_nnf",
    "inpaint",
    "patch_match",
    "solve_poisson",
    "write_gradient_fields",
]

# Direct factorization is preferred up to this many unknowns; beyond it the
# solve falls back to conjugate gradients.
_DIRECT_LIMIT = 200_000


@dataclass(frozen=True)
class GradientField:
    """Forward-difference gradient grids with per-cell defined masks.

    ``gx[x, y]`` approximates ``I(x+1, y) - I(x, y)`` and ``gy[x, y]``
    approximates ``I(x, y+1) - I(x, y)``.  A cell is undefined when either
    operand is missing: next to holes and on the trailing border of its
    axis.  Undefined cells hold 0.0.
    """

    gx: np.ndarray
    gy: np.ndarray
    gx_defined: np.ndarray
    gy_defined: np.ndarray

    def __post_init__(self):
        gx = np.asarray(self.gx, dtype=np.float64)
        gy = np.asarray(self.gy, dtype=np.float64)
        dx = np.asarray(self.gx_defined, dtype=bool)
        dy = np.asarray(self.gy_defined, dtype=bool)
        for name, value in (("gx", gx), ("gy", gy), ("gx_defined", dx),
                            ("gy_defined", dy)):
            object.__setattr__(self, name, value)
        r = gx.shape[0] if gx.ndim == 2 else 0
        if gx.ndim != 2 or gx.shape != (r, r) or r < 2:
            raise InvalidParameter(f"gx must be square with r >= 2, got {gx.shape}")
        for name, value in (("gy", gy), ("gx_defined", dx), ("gy_defined", dy)):
            if value.shape != gx.shape:
                raise InvalidParameter(f"{name} shape {value.shape} != {gx.shape}")
        if not np.isfinite(gx[dx]).all() or not np.isfinite(gy[dy]).all():
            raise InvalidParameter("defined gradient cells must be finite")

    @property
    def resolution(self) -> int:
        return self.gx.shape[0]


@dataclass(frozen=True)
class InpaintConfig:
    """Knobs for the patch-match stage and the Poisson solver."""

    patch_size: int = 11
    iterations: int = 10
    rng_seed: int = 0
    solver_tol: float = 1e-10
    solver_max_iter: int = 10_000

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise InvalidParameter(
                f"patch_size must be odd and >= 3, got {self.patch_size}"
            )
        if self.iterations < 0:
            raise InvalidParameter("iterations must be nonnegative")
        if not np.isfinite(self.solver_tol) or self.solver_tol <= 0:
            raise InvalidParameter("solver_tol must be positive")
        if self.solver_max_iter < 1:
            raise InvalidParameter("solver_max_iter must be >= 1")


@dataclass(frozen=True)
class NearestNeighborField:
    """One source-patch correspondence per hole-overlapping patch center.

    ``centers[k] + offsets[k]`` is the center of the matched fully-known
    patch; ``distances[k]`` is the SSD over both gradient channels.
    ``hole_mask`` records the holes the field was built against so that
    aggregation can re-derive which gradient cells need votes, and
    ``iteration_totals`` holds the summed distance after initialization
    and after each refinement sweep.
    """

    centers: np.ndarray
    offsets: np.ndarray
    distances: np.ndarray
    patch_size: int
    hole_mask: np.ndarray
    iteration_totals: np.ndarray

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.int64).reshape(-1, 2)
        offsets = np.asarray(self.offsets, dtype=np.int64).reshape(-1, 2)
        distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        hole = np.asarray(self.hole_mask, dtype=bool)
        totals = np.asarray(self.iteration_totals, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "distances", distances)
        object.__setattr__(self, "hole_mask", hole)
        object.__setattr__(self, "iteration_totals", totals)
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise InvalidParameter("patch_size must be odd and >= 3")
        if hole.ndim != 2 or hole.shape[0] != hole.shape[1]:
            raise InvalidParameter("hole_mask must be a square grid")
        n = len(centers)
        if len(offsets) != n or len(distances) != n:
            raise InvalidParameter("centers/offsets/distances lengths differ")
        if n and ((distances < 0) | ~np.isfinite(distances)).any():
            raise InvalidParameter("distances must be finite and nonnegative")
        half = self.patch_size // 2
        lo, hi = half, hole.shape[0] - 1 - half
        if n:
            src = centers + offsets
            inside = ((centers >= lo) & (centers <= hi)
                      & (src >= lo) & (src <= hi))
            if not inside.all():
                raise InvalidParameter("patch centers must keep patches in-grid")

    def __len__(self) -> int:
        return len(self.centers)


def compute_gradients(h: HeightField) -> GradientField:
    """Forward differences of the height grid with hole/border masking."""
    v = h.values
    r = h.resolution
    gx = np.zeros((r, r))
    gy = np.zeros((r, r))
    dx = np.zeros((r, r), dtype=bool)
    dy = np.zeros((r, r), dtype=bool)
    diff = v[1:, :] - v[:-1, :]
    dx[:-1, :] = np.isfinite(diff)
    gx[:-1, :][dx[:-1, :]] = diff[dx[:-1, :]]
    diff = v[:, 1:] - v[:, :-1]
    dy[:, :-1] = np.isfinite(diff)
    gy[:, :-1][dy[:, :-1]] = diff[dy[:, :-1]]
    return GradientField(gx, gy, dx, dy)


def _hole_fill_masks(hole: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient cells whose forward difference involves a hole cell."""
    fx = np.zeros_like(hole)
    fx[:-1, :] = hole[:-1, :] | hole[1:, :]
    fy = np.zeros_like(hole)
    fy[:, :-1] = hole[:, :-1] | hole[:, 1:]
    return fx, fy


def _window_counts(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """True-cell count of the patch window at each fully-inside center."""
    r = mask.shape[0]
    half = patch_size // 2
    out = np.zeros((r, r), dtype=np.int64)
    if r < patch_size:
        return out
    c = np.pad(np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1),
               ((1, 0), (1, 0)))
    p = patch_size
    out[half:r - half, half:r - half] = (
        c[p:, p:] - c[:-p, p:] - c[p:, :-p] + c[:-p, :-p]
    )
    return out


@njit(inline="always")
def _rng_next(state):
    state ^= state >> np.uint64(12)
    state ^= state << np.uint64(25)
    state ^= state >> np.uint64(27)
    return state


@njit(inline="always")
def _rng_unit(state):
    bits = (state * np.uint64(0x2545F4914F6CDD1D)) >> np.uint64(11)
    return float(bits) * (1.0 / 9007199254740992.0)


@njit(inline="always")
def _patch_ssd(wgx, wgy, tx, ty, sx, sy, half, best):
    d = 0.0
    for i in range(-half, half + 1):
        for j in range(-half, half + 1):
            ex = wgx[tx + i, ty + j] - wgx[sx + i, sy + j]
            ey = wgy[tx + i, ty + j] - wgy[sx + i, sy + j]
            d += ex * ex + ey * ey
        if d >= best:
            return d
    return d


@njit(cache=True)
def _pm_kernel(wgx, wgy, src_ok, tcx, tcy, scx, scy, half, iters, seed):
    r = wgx.shape[0]
    lo = half
    hi = r - 1 - half
    m = tcx.shape[0]
    k = scx.shape[0]
    f_dx = np.zeros((r, r), np.int64)
    f_dy = np.zeros((r, r), np.int64)
    f_d = np.zeros((r, r), np.float64)

    state = seed ^ np.uint64(0x9E3779B97F4A7C15)
    if state == np.uint64(0):
        state = np.uint64(0x106689D45497FDB5)

    for t in range(m):
        state = _rng_next(state)
        j = int(_rng_unit(state) * k)
        if j >= k:
            j = k - 1
        x = tcx[t]
        y = tcy[t]
        f_dx[x, y] = scx[j] - x
        f_dy[x, y] = scy[j] - y
        f_d[x, y] = _patch_ssd(wgx, wgy, x, y, scx[j], scy[j], half, np.inf)

    totals = np.empty(iters + 1, np.float64)
    tot = 0.0
    for t in range(m):
        tot += f_d[tcx[t], tcy[t]]
    totals[0] = tot

    for it in range(iters):
        forward = it % 2 == 0
        for tt in range(m):
            t = tt if forward else m - 1 - tt
            x = tcx[t]
            y = tcy[t]
            best = f_d[x, y]
            bdx = f_dx[x, y]
            bdy = f_dy[x, y]
            # propagation: reuse the offsets of the two already-visited
            # neighbors in the current scan direction
            for nn in range(2):
                if forward:
                    nx = x - 1 if nn == 0 else x
                    ny = y if nn == 0 else y - 1
                else:
                    nx = x + 1 if nn == 0 else x
                    ny = y if nn == 0 else y + 1
                if nx < lo or nx > hi or ny < lo or ny > hi:
                    continue
                dx = f_dx[nx, ny]
                dy = f_dy[nx, ny]
                if dx == bdx and dy == bdy:
                    continue
                sx = x + dx
                sy = y + dy
                if sx < lo or sx > hi or sy < lo or sy > hi:
                    continue
                if not src_ok[sx, sy]:
                    continue
                d = _patch_ssd(wgx, wgy, x, y, sx, sy, half, best)
                if d < best:
                    best = d
                    bdx = dx
                    bdy = dy
            # random search in windows halving from the full image width
            w = float(r)
            while w >= 1.0:
                state = _rng_next(state)
                u1 = _rng_unit(state)
                state = _rng_next(state)
                u2 = _rng_unit(state)
                sx = x + bdx + int(np.floor((2.0 * u1 - 1.0) * w + 0.5))
                sy = y + bdy + int(np.floor((2.0 * u2 - 1.0) * w + 0.5))
                w *= 0.5
                if sx < lo:
                    sx = lo
                elif sx > hi:
                    sx = hi
                if sy < lo:
                    sy = lo
                elif sy > hi:
                    sy = hi
                if not src_ok[sx, sy]:
                    continue
                if sx - x == bdx and sy - y == bdy:
                    continue
                d = _patch_ssd(wgx, wgy, x, y, sx, sy, half, best)
                if d < best:
                    best = d
                    bdx = sx - x
                    bdy = sy - y
            f_d[x, y] = best
            f_dx[x, y] = bdx
            f_dy[x, y] = bdy
        tot = 0.0
        for t in range(m):
            tot += f_d[tcx[t], tcy[t]]
        totals[it + 1] = tot

    offsets = np.empty((m, 2), np.int64)
    dists = np.empty(m, np.float64)
    for t in range(m):
        offsets[t, 0] = f_dx[tcx[t], tcy[t]]
        offsets[t, 1] = f_dy[tcx[t], tcy[t]]
        dists[t] = f_d[tcx[t], tcy[t]]
    return offsets, dists, totals


def patch_match(h: HeightField, g: GradientField,
                cfg: InpaintConfig | None = None) -> NearestNeighborField:
    """Match every hole-overlapping patch to a similar fully-known patch.

    Candidate sources are patch centers whose window contains neither a
    hole-influenced nor an undefined gradient cell.  Matching minimizes
    the SSD over both gradient channels jointly, with hole cells entering
    through their current working values (0 before any aggregation pass).
    """
    cfg = cfg if cfg is not None else InpaintConfig()
    if g.resolution != h.resolution:
        raise InvalidParameter("gradient grids do not match the height grid")
    p = cfg.patch_size
    half = p // 2
    hole = h.hole_mask
    fx, fy = _hole_fill_masks(hole)
    influence = hole | fx | fy

    src_cell_ok = g.gx_defined & g.gy_defined & ~influence
    src_ok = _window_counts(src_cell_ok, p) == p * p
    scx, scy = np.nonzero(src_ok)
    if len(scx) == 0:
        raise NoValidSourcePatch(
            f"no fully-known {p}x{p} patch in a {h.resolution}x{h.resolution} grid"
        )

    tcx, tcy = np.nonzero(_window_counts(hole, p) > 0)
    if len(tcx) == 0:
        empty = np.empty((0, 2), np.int64)
        return NearestNeighborField(empty, empty, np.empty(0), p, hole.copy(),
                                    np.empty(0))

    wgx = np.where(g.gx_defined, g.gx, 0.0)
    wgy = np.where(g.gy_defined, g.gy, 0.0)
    offsets, dists, totals = _pm_kernel(
        wgx, wgy, src_ok,
        tcx.astype(np.int64), tcy.astype(np.int64),
        scx.astype(np.int64), scy.astype(np.int64),
        half, cfg.iterations, np.uint64(cfg.rng_seed & 0xFFFFFFFFFFFFFFFF),
    )
    centers = np.column_stack([tcx, tcy])
    return NearestNeighborField(centers, offsets, dists, p, hole.copy(), totals)


def aggregate_gradients(nnf: NearestNeighborField, g: GradientField,
                        cfg: InpaintConfig | None = None) -> GradientField:
    """Replace hole-influenced gradient cells by the mean of patch votes.

    Every correspondence votes the source value at the matching relative
    position onto each cell its target patch covers; votes are averaged
    unweighted.  Cells outside the hole influence are copied unchanged.
    """
    if cfg is not None and cfg.patch_size != nnf.patch_size:
        raise InvalidParameter("cfg.patch_size differs from the field's")
    hole = nnf.hole_mask
    if g.resolution != hole.shape[0]:
        raise InvalidParameter("gradient grids do not match the hole mask")
    fx, fy = _hole_fill_masks(hole)
    r = g.resolution

    sum_x = np.zeros((r, r))
    sum_y = np.zeros((r, r))
    cnt_x = np.zeros((r, r), dtype=np.int64)
    cnt_y = np.zeros((r, r), dtype=np.int64)
    if len(nnf):
        half = nnf.patch_size // 2
        p = nnf.patch_size
        rel = np.arange(-half, half + 1)
        ti = (nnf.centers[:, 0][:, None, None] + rel[None, :, None])
        tj = (nnf.centers[:, 1][:, None, None] + rel[None, None, :])
        ti = np.broadcast_to(ti, (len(nnf), p, p)).ravel()
        tj = np.broadcast_to(tj, (len(nnf), p, p)).ravel()
        si = ti + np.repeat(nnf.offsets[:, 0], p * p)
        sj = tj + np.repeat(nnf.offsets[:, 1], p * p)
        sel = fx[ti, tj]
        np.add.at(cnt_x, (ti[sel], tj[sel]), 1)
        np.add.at(sum_x, (ti[sel], tj[sel]), g.gx[si[sel], sj[sel]])
        sel = fy[ti, tj]
        np.add.at(cnt_y, (ti[sel], tj[sel]), 1)
        np.add.at(sum_y, (ti[sel], tj[sel]), g.gy[si[sel], sj[sel]])

    for name, fill, cnt in (("gx", fx, cnt_x), ("gy", fy, cnt_y)):
        missing = fill & (cnt == 0)
        if missing.any():
            x, y = np.argwhere(missing)[0]
            raise UncoveredHoleCell(f"{name} cell ({x}, {y}) received no votes")

    gx = g.gx.copy()
    gy = g.gy.copy()
    gx[fx] = sum_x[fx] / cnt_x[fx]
    gy[fy] = sum_y[fy] / cnt_y[fy]
    return GradientField(gx, gy, g.gx_defined | fx, g.gy_defined | fy)


def _divergence(g: GradientField) -> np.ndarray:
    """Backward-difference divergence; undefined gradient terms drop out."""
    gx = np.where(g.gx_defined, g.gx, 0.0)
    gy = np.where(g.gy_defined, g.gy, 0.0)
    div = gx + gy
    div[1:, :] -= gx[:-1, :]
    div[:, 1:] -= gy[:, :-1]
    return div


def solve_poisson(h: HeightField, g: GradientField, solver_tol: float = 1e-10,
                  solver_max_iter: int = 10_000) -> HeightField:
    """Fill hole cells so the 5-point Laplacian matches the guidance field.

    Unknowns are the hole cells; known 4-neighbors enter as Dirichlet
    values and neighbors outside the grid drop from the stencil.  Small
    systems are factorized directly, large ones solved by conjugate
    gradients; either way the residual must reach
    ``solver_tol * |rhs|``.
    """
    if g.resolution != h.resolution:
        raise InvalidParameter("gradient grids do not match the height grid")
    if not np.isfinite(solver_tol) or solver_tol <= 0:
        raise InvalidParameter("solver_tol must be positive")
    if solver_max_iter < 1:
        raise InvalidParameter("solver_max_iter must be >= 1")
    hole = h.hole_mask
    n = int(hole.sum())
    if n == 0:
        return h
    r = h.resolution
    hx, hy = np.nonzero(hole)
    index = np.full((r, r), -1, dtype=np.int64)
    index[hx, hy] = np.arange(n)
    known_values = np.where(hole, 0.0, h.values)

    rhs = _divergence(g)[hx, hy]
    diag = np.zeros(n)
    rows = []
    cols = []
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nx = hx + dx
        ny = hy + dy
        ing = (nx >= 0) & (nx < r) & (ny >= 0) & (ny < r)
        diag -= ing
        row_ids = np.nonzero(ing)[0]
        nbr = index[nx[ing], ny[ing]]
        is_hole = nbr >= 0
        rows.append(row_ids[is_hole])
        cols.append(nbr[is_hole])
        dirichlet = row_ids[~is_hole]
        rhs[dirichlet] -= known_values[nx[dirichlet] , ny[dirichlet]]

    rows = np.concatenate(rows + [np.arange(n)])
    cols = np.concatenate(cols + [np.arange(n)])
    vals = np.concatenate([np.ones(len(rows) - n), diag])
    a = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()

    if n <= _DIRECT_LIMIT:
        try:
            x = splu(a).solve(rhs)
        except RuntimeError as exc:
            raise SolverDivergence(f"direct factorization failed: {exc}") from exc
        if _residual_excess(a, x, rhs, solver_tol):
            # one round of iterative refinement before giving up
            x = x + splu(a).solve(rhs - a @ x)
    else:
        x, info = cg(-a, -rhs, rtol=solver_tol, atol=0.0,
                     maxiter=solver_max_iter)
        if info != 0:
            raise SolverDivergence(
                f"conjugate gradients stopped with status {info} "
                f"after {solver_max_iter} iterations"
            )
    if _residual_excess(a, x, rhs, solver_tol):
        raise SolverDivergence("residual target not reached")

    values = h.values.copy()
    values[hx, hy] = x
    return h.with_values(values)


def _residual_excess(a, x, rhs, solver_tol) -> bool:
    return np.linalg.norm(a @ x - rhs) > solver_tol * np.linalg.norm(rhs)


def inpaint(h: HeightField, cfg: InpaintConfig | None = None) -> HeightField:
    """Fill all holes of a height raster; known cells are left bit-exact.

    Hole gradients start at 0 and two match-and-vote passes refresh them
    (the second pass re-matches against the first pass's estimates, with
    a shifted RNG stream); the refreshed guidance then drives the Poisson
    solve.
    """
    cfg = cfg if cfg is not None else InpaintConfig()
    if h.n_holes == 0:
        return h
    current = compute_gradients(h)
    for em_round in range(2):
        round_cfg = dataclasses.replace(cfg, rng_seed=cfg.rng_seed + em_round)
        nnf = patch_match(h, current, round_cfg)
        current = aggregate_gradients(nnf, current, round_cfg)
    return solve_poisson(h, current, cfg.solver_tol, cfg.solver_max_iter)


def dump_nnf(path, nnf: NearestNeighborField) -> None:
    """Write correspondences as text lines ``cx cy dx dy dist``."""
    with open(path, "w", encoding="ascii") as stream:
        for (cx, cy), (dx, dy), dist in zip(nnf.centers, nnf.offsets,
                                            nnf.distances):
            stream.write(f"{cx} {cy} {dx} {dy} {dist:.17g}\n")


def write_gradient_fields(base_path, g: GradientField) -> None:
    """Dump both gradient channels as ``<base>.gx.hf01`` / ``<base>.gy.hf01``."""
    for suffix, values, defined in (("gx", g.gx, g.gx_defined),
                                    ("gy", g.gy, g.gy_defined)):
        grid = HeightField(np.where(defined, values, np.nan),
                           defined.astype(np.int64))
        write_heightfield(f"{base_path}.{suffix}.hf01", grid)
