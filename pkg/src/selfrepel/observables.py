"""Closed-form observables of a field configuration and exact Gaussian
diagnostics of the free field.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import cdist

from selfrepel.lattice import FieldConfig, LatticeBox, laplacian_matrix
from selfrepel.spectral import eigendecompose


def _points(field) -> np.ndarray:
    if isinstance(field, FieldConfig):
        return field.values
    v = np.asarray(field, dtype=float)
    return v[:, None] if v.ndim == 1 else v


def _beta(params) -> float:
    return float(getattr(params, "beta", params))


# --- local-time penalty ---------------------------------------------------------------


@dataclass(frozen=True)
class PenaltyBreakdown:
    """∫ ℓ² split into the diagonal (one unit box per site) and the cross overlaps."""

    total: float
    diagonal: float
    off_diagonal: float
    pair_count: int


def overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Volume of the intersection of unit boxes centred at rows of ``a`` and ``b``."""
    return np.prod(np.clip(1.0 - np.abs(a - b), 0.0, None), axis=-1)


def _ravel_offsets(D: int, strides) -> np.ndarray:
    offs = np.array(list(itertools.product((-1, 0, 1), repeat=D)), dtype=np.int64)
    return offs @ np.asarray(strides, dtype=np.int64)


def near_pairs(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All pairs i < j whose unit-cell coordinates differ by at most one per axis.

    Pairs with L∞ distance < 1 are always included. Output is sorted
    lexicographically by (i, j).
    """
    points = _points(points)
    n, D = points.shape
    if n < 2:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    cells = np.floor(points).astype(np.int64)
    cells -= cells.min(axis=0)
    ext = [int(e) + 3 for e in cells.max(axis=0)]
    strides = [int(np.prod(ext[k + 1:], dtype=object)) for k in range(D)]
    if int(np.prod(ext, dtype=object)) >= 2**62:
        return _near_pairs_dict(cells)
    key = (cells + 1) @ np.asarray(strides, dtype=np.int64)
    order = np.argsort(key, kind="stable")
    sk = key[order]
    rows = np.arange(n)
    ii_all, jj_all = [], []
    for off in _ravel_offsets(D, strides):
        target = key + off
        lo = np.searchsorted(sk, target, "left")
        cnt = np.searchsorted(sk, target, "right") - lo
        total = int(cnt.sum())
        if total == 0:
            continue
        ii = np.repeat(rows, cnt)
        base = np.repeat(lo - (np.cumsum(cnt) - cnt), cnt)
        jj = order[base + np.arange(total)]
        keep = ii < jj
        ii_all.append(ii[keep])
        jj_all.append(jj[keep])
    if not ii_all:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    ii = np.concatenate(ii_all)
    jj = np.concatenate(jj_all)
    srt = np.lexsort((jj, ii))
    return ii[srt], jj[srt]


def _near_pairs_dict(cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    table: dict[tuple, list[int]] = {}
    for i, c in enumerate(map(tuple, cells)):
        table.setdefault(c, []).append(i)
    offs = list(itertools.product((-1, 0, 1), repeat=cells.shape[1]))
    ii, jj = [], []
    for i, c in enumerate(map(tuple, cells)):
        for o in offs:
            for j in table.get(tuple(a + b for a, b in zip(c, o)), ()):
                if i < j:
                    ii.append(i)
                    jj.append(j)
    ii = np.asarray(ii, dtype=np.int64)
    jj = np.asarray(jj, dtype=np.int64)
    srt = np.lexsort((jj, ii))
    return ii[srt], jj[srt]


def penalty_integral(field, method: str = "hash") -> PenaltyBreakdown:
    """∫ ℓ_N(y, u)² dy in closed form.

    Equals Σ_{x,x'} Π_i max(0, 1 - |u_i(x) - u_i(x')|). ``method="hash"``
    enumerates only cell-adjacent pairs; ``"naive"`` enumerates all pairs.
    Both sum the same sorted list of positive overlaps.
    """
    pts = _points(field)
    n = pts.shape[0]
    if method == "hash":
        i, j = near_pairs(pts)
    elif method == "naive":
        i, j = np.triu_indices(n, k=1)
    else:
        raise ValueError(f"unknown method {method!r}")
    ov = overlap(pts[i], pts[j])
    ov = ov[ov > 0.0]
    off = 2.0 * float(np.sum(ov))
    return PenaltyBreakdown(total=float(n) + off, diagonal=float(n), off_diagonal=off, pair_count=int(ov.size))


def dilation_penalty(N: int, d: int, a: float) -> float:
    """∫ℓ² of the dilation field u(x) = a x on [-N, N]^d, without pair enumeration.

    Pair differences are a k with k ∈ [-2N, 2N]^d, and k occurs
    Π_i (2N+1-|k_i|) times, so the double sum factorises over axes.
    """
    k = np.arange(-2 * N, 2 * N + 1, dtype=float)
    one_axis = np.sum((2 * N + 1 - np.abs(k)) * np.clip(1.0 - abs(a) * np.abs(k), 0.0, None))
    return float(one_axis**d)


@dataclass(frozen=True)
class JensenCheck:
    applicable: bool
    holds: bool | None
    lhs: float
    rhs: float
    radius: float
    reason: str = ""


def penalty_jensen_check(field: FieldConfig, eps: float) -> JensenCheck:
    """Compare ∫ℓ² with 2^D N^D / ε^D for a field confined to a small region.

    The comparison is only asserted when the effective radius is below εN;
    otherwise ``applicable`` is False. For a centred field every value is then
    within εN of zero, so all values lie in [-εN, εN]^D.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    N, D = field.box.N, field.D
    lhs = penalty_integral(field).total
    rhs = (2.0 * N / eps) ** D
    radius = effective_radius(field)
    if radius >= eps * N:
        return JensenCheck(False, None, lhs, rhs, radius, "radius >= eps*N")
    return JensenCheck(True, bool(lhs >= rhs), lhs, rhs, radius)


def cauchy_schwarz_bound(field: FieldConfig, eps: float) -> float:
    """n² / (2εN + 1)^D, a lower bound on ∫ℓ² whenever all values lie in [-εN, εN]^D."""
    n = field.box.n_sites
    return n**2 / (2.0 * eps * field.box.N + 1.0) ** field.D


# --- effective radius -----------------------------------------------------------------


def _diameter_brute(pts: np.ndarray, block: int = 512) -> float:
    best = 0.0
    for s in range(0, len(pts), block):
        best = max(best, float(cdist(pts[s:s + block], pts).max()))
    return best


def effective_radius(field, method: str = "auto", brute_limit: int = 4096) -> float:
    """Euclidean diameter max_{z,w} ||u(z) - u(w)|| of the image point set."""
    pts = _points(field)
    n, D = pts.shape
    if n < 2:
        return 0.0
    if method == "brute" or (method == "auto" and n <= brute_limit):
        return _diameter_brute(pts)
    if method not in ("hull", "auto"):
        raise ValueError(f"unknown method {method!r}")
    if D == 1:
        return float(pts.max() - pts.min())
    try:
        hull = ConvexHull(pts)
    except (QhullError, ValueError):
        return _diameter_brute(pts)
    return _diameter_brute(pts[hull.vertices])


# --- exact pairwise variances ---------------------------------------------------------


@dataclass(frozen=True)
class VarianceReport:
    """Var(u^(i)(z) - u^(i)(w)), identical for every component i."""

    z: int
    w: int
    variance: float
    per_component: tuple
    beta: float
    resistance: float


def _site(box: LatticeBox, s) -> int:
    if np.ndim(s) == 0:
        s = int(s)
        if not 0 <= s < box.n_sites:
            raise IndexError(f"site index {s} out of range")
        return s
    return box.index_of(s)


def _bordered_solve(box: LatticeBox, rhs: np.ndarray) -> np.ndarray:
    """Solve (-Δ) x = rhs with Σx = 0, for zero-sum right-hand sides (columns)."""
    n = box.n_sites
    neg_lap = -laplacian_matrix(box, sparse=True, cap=10**9)
    ones = sp.csr_matrix(np.ones((n, 1)))
    kkt = sp.bmat([[neg_lap, ones], [ones.T, None]], format="csc")
    rhs = np.atleast_2d(rhs.T).T
    full = np.vstack([rhs, np.zeros((1, rhs.shape[1]))])
    sol = spla.splu(kkt).solve(full)
    return sol[:n]


def variance_pair(box: LatticeBox, params, z, w, *, method: str = "solve", D: int | None = None) -> VarianceReport:
    """Exact variance (1/2β) <e_z - e_w, (-Δ)^+ (e_z - e_w)>.

    ``method="solve"`` solves the constrained linear system; ``"spectral"``
    sums over the eigensystem. ``z`` and ``w`` are site indices or coordinates.
    """
    beta = _beta(params)
    zi, wi = _site(box, z), _site(box, w)
    if zi == wi:
        raise ValueError("variance_pair needs two distinct sites")
    b = np.zeros(box.n_sites)
    b[zi], b[wi] = 1.0, -1.0
    if method == "solve":
        x = _bordered_solve(box, b)[:, 0]
        res = float(b @ x)
    elif method == "spectral":
        basis = eigendecompose(box)
        idx = basis.nonzero
        proj = basis.vectors[:, idx].T @ b
        res = float(np.sum(proj**2 / basis.eigenvalues[idx]))
    else:
        raise ValueError(f"unknown method {method!r}")
    var = res / (2.0 * beta)
    D = box.d if D is None else D
    return VarianceReport(zi, wi, var, (var,) * D, beta, res)


@dataclass(frozen=True)
class VarianceScan:
    min_variance: float
    max_variance: float
    argmin: tuple
    argmax: tuple
    exhaustive: bool
    beta: float


def _scan_sites(box: LatticeBox) -> list[int]:
    """Corners, centre and edge midpoints (coordinates in {-N, 0, N}^d)."""
    vals = (-box.N, 0, box.N)
    return sorted({box.index_of(c) for c in itertools.product(vals, repeat=box.d)})


def variance_bounds_scan(box: LatticeBox, params, *, cap: int = 6000, block: int = 256) -> VarianceScan:
    """Minimum and maximum of the pairwise variance over site pairs.

    Exhaustive over all pairs when n <= ``cap``; otherwise over every pair
    that contains a corner, the centre or an edge midpoint.
    """
    beta = _beta(params)
    n = box.n_sites
    diag = pseudo_inverse_diagonal(box)
    if n <= cap:
        # (-Δ + J/n)^{-1} = (-Δ)^+ + J/n
        g = np.linalg.inv(-laplacian_matrix(box, cap=cap) + 1.0 / n) - 1.0 / n
        sources = np.arange(n)
        exhaustive = True
    else:
        sources = np.asarray(_scan_sites(box))
        rhs = np.full((n, len(sources)), -1.0 / n)
        rhs[sources, np.arange(len(sources))] += 1.0
        g = _bordered_solve(box, rhs).T
        exhaustive = False
    best_min, best_max = np.inf, -np.inf
    arg_min = arg_max = (0, 0)
    for s in range(0, len(sources), block):
        rows = np.arange(s, min(s + block, len(sources)))
        sites = sources[rows]
        res = diag[sites][:, None] + diag[None, :] - 2.0 * g[rows]
        res[np.arange(len(rows)), sites] = np.nan
        kmin, kmax = np.nanargmin(res), np.nanargmax(res)
        if res.flat[kmin] < best_min:
            best_min = res.flat[kmin]
            arg_min = (int(sites[kmin // n]), int(kmin % n))
        if res.flat[kmax] > best_max:
            best_max = res.flat[kmax]
            arg_max = (int(sites[kmax // n]), int(kmax % n))
    return VarianceScan(
        float(best_min / (2 * beta)), float(best_max / (2 * beta)),
        tuple(sorted(arg_min)), tuple(sorted(arg_max)), exhaustive, beta,
    )


def pseudo_inverse_diagonal(box: LatticeBox) -> np.ndarray:
    """Diagonal of (-Δ)^+, using the product structure of the eigenbasis."""
    w, v = _eigh_1d_cached(box.N)
    lam = w
    for _ in range(box.d - 1):
        lam = np.add.outer(lam, w)
    lam = np.asarray(lam)
    inv = np.zeros_like(lam)
    np.divide(1.0, lam, out=inv, where=lam > 0)
    sq = v**2
    out = inv
    for axis in range(box.d):
        out = np.moveaxis(np.tensordot(sq, out, axes=(1, axis)), 0, axis)
    return np.asarray(out).ravel()


# --- reflected random walk ------------------------------------------------------------


@dataclass
class SemigroupTable:
    """Return probabilities P_z(Z_t = z) of the reflected walk on {-N..N}."""

    N: int
    z: int
    t: np.ndarray
    return_prob: np.ndarray

    @property
    def uniform(self) -> float:
        return 1.0 / (2 * self.N + 1)

    @property
    def excess(self) -> np.ndarray:
        return self.return_prob - self.uniform

    def rows(self):
        for t, p in zip(self.t, self.return_prob):
            yield {"N": self.N, "t": float(t), "return_prob": float(p)}


def return_probability(N: int, t, z: int = 0) -> np.ndarray:
    """P_z(Z_t = z) for the continuous-time walk generated by the 1-d Neumann Laplacian.

    Each edge is crossed at rate one; a jump that would leave the box is
    suppressed. Computed as Σ_k φ_k(z)² exp(-λ_k t).
    """
    w, v = _eigh_1d_cached(N)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise ValueError("times must be non-negative")
    weights = v[z + N] ** 2
    return np.exp(-np.outer(t, w)) @ weights


_EIG_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _eigh_1d_cached(N: int):
    if N not in _EIG_CACHE:
        basis = eigendecompose(LatticeBox(N, 1))
        _EIG_CACHE[N] = (basis.eigenvalues, basis.vectors)
    return _EIG_CACHE[N]


def semigroup_diagnostics(N: int, t_grid, z: int = 0) -> SemigroupTable:
    if N < 1:
        raise ValueError("N must be >= 1")
    if abs(z) > N:
        raise ValueError(f"z={z} outside {{-N..N}}")
    t = np.asarray(t_grid, dtype=float)
    if np.any(t <= 0):
        raise ValueError("time grid must be positive")
    return SemigroupTable(N, z, t, return_probability(N, t, z))


def middle_decade(t_lo: float, t_hi: float) -> tuple[float, float]:
    """The decade centred (geometrically) in [t_lo, t_hi]."""
    mid = np.sqrt(t_lo * t_hi)
    return mid / np.sqrt(10.0), mid * np.sqrt(10.0)


def loglog_slope(x, y) -> tuple[float, float]:
    """Least-squares slope and intercept of log y against log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept)
