"""Eigensystems of -Δ on the box, the sinusoidal 1-d basis and the
expansion coefficients of the coordinate function in that basis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path

import numpy as np

from selfrepel.lattice import DEFAULT_DENSE_CAP, CapExceeded, LatticeBox, apply_laplacian, laplacian_matrix


@dataclass
class SpectralBasis:
    """Orthonormal eigenpairs of -Δ, eigenvalues ascending.

    Column ``k`` of ``vectors`` is the eigenfield for ``eigenvalues[k]``.
    Column ``zero_index`` is the constant mode (2N+1)^(-d/2).
    """

    box: LatticeBox
    eigenvalues: np.ndarray
    vectors: np.ndarray
    zero_index: int = 0
    modes: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    @property
    def nonzero(self) -> np.ndarray:
        """Indices of the non-constant modes."""
        keep = np.ones(self.n, dtype=bool)
        keep[self.zero_index] = False
        return np.flatnonzero(keep)

    def gram_deviation(self) -> float:
        g = self.vectors.T @ self.vectors
        return float(np.max(np.abs(g - np.eye(self.n))))

    def residuals(self) -> np.ndarray:
        """||(-Δ)φ_k - λ_k φ_k||_2 for every mode."""
        r = -apply_laplacian(self.vectors, self.box) - self.vectors * self.eigenvalues
        return np.linalg.norm(r, axis=0)

    def covariance(self, beta: float) -> np.ndarray:
        """Covariance of one free-field component: Σ_k φ_k φ_kᵀ / (2βλ_k)."""
        idx = self.nonzero
        phi = self.vectors[:, idx]
        return (phi / (2.0 * beta * self.eigenvalues[idx])) @ phi.T

    def pseudo_inverse(self) -> np.ndarray:
        """(-Δ)^+ on the zero-mean subspace."""
        idx = self.nonzero
        phi = self.vectors[:, idx]
        return (phi / self.eigenvalues[idx]) @ phi.T


def _eigh_1d(N: int) -> tuple[np.ndarray, np.ndarray]:
    lap = laplacian_matrix(LatticeBox(N, 1))
    w, v = np.linalg.eigh(-lap)
    # The kernel is exactly the constants; pin it so that sign and rounding are canonical.
    w[0] = 0.0
    v[:, 0] = (2 * N + 1) ** -0.5
    return w, v


def eigendecompose(box: LatticeBox, *, method: str = "tensor", cap: int = DEFAULT_DENSE_CAP) -> SpectralBasis:
    """Full orthonormal eigensystem of -Δ on ``box``.

    ``method="tensor"`` diagonalises the 1-d operator and forms products of its
    eigenvectors, which diagonalise the d-dimensional operator exactly because
    Δ is a Kronecker sum. ``method="dense"`` diagonalises the materialised
    n x n matrix directly.
    """
    n = box.n_sites
    if n > cap:
        raise CapExceeded(f"{box} has {n} sites, above the cap {cap}")
    if method == "tensor":
        w, v = _eigh_1d(box.N)
        lam = reduce(np.add.outer, [w] * box.d).ravel()
        vecs = reduce(np.kron, [v] * box.d)
        modes = np.indices((box.side,) * box.d).reshape(box.d, -1).T
        order = np.argsort(lam, kind="stable")
        lam, vecs, modes = lam[order], vecs[:, order], modes[order]
        # the all-zero multi-index sorts first; its eigenvalue is an exact 0.0
        return SpectralBasis(box, lam, np.ascontiguousarray(vecs), 0, modes)
    if method == "dense":
        a = -laplacian_matrix(box, cap=cap)
        if not np.array_equal(a, a.T):
            raise ValueError("Laplacian matrix is not symmetric")
        w, v = np.linalg.eigh(a)
        w[0] = 0.0
        v[:, 0] = n**-0.5
        return SpectralBasis(box, w, v, 0, None)
    raise ValueError(f"unknown method {method!r}")


def write_spectrum_csv(basis: SpectralBasis, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "mode", "eigenvalue"])
        for k, lam in enumerate(basis.eigenvalues):
            mode = "" if basis.modes is None else ":".join(str(int(m)) for m in basis.modes[k])
            w.writerow([k, mode, repr(float(lam))])
    return path


# --- closed-form sinusoids on {-N, ..., N} ------------------------------------------


@dataclass
class SineBasis1D:
    """The sine/cosine family on {-N..N} with its closed-form eigenvalue claims.

    ``labels[c]`` is the signed index j of column c: j = 0 is the constant,
    j = k > 0 is sin((2k-1)πn/(2N+1)), j = -k is cos(2kπn/(2N+1)).
    ``claimed`` holds ((2k-1)π/(2N+1))^2 for sines and (2kπ/(2N+1))^2 for
    cosines; ``exact`` holds the Rayleigh quotient of each function under the
    discrete operator, and ``residuals`` the norm ||-Δφ - claimed·φ||.
    """

    N: int
    labels: np.ndarray
    functions: np.ndarray
    claimed: np.ndarray
    exact: np.ndarray
    residuals: np.ndarray
    nearest_true: np.ndarray

    @property
    def relative_gap(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            gap = np.abs(self.claimed - self.nearest_true) / self.nearest_true
        return np.where(self.nearest_true == 0, np.abs(self.claimed), gap)

    def column(self, j: int) -> np.ndarray:
        return self.functions[:, int(np.flatnonzero(self.labels == j)[0])]


def paper_basis_1d(N: int) -> SineBasis1D:
    if N < 1:
        raise ValueError("N must be >= 1")
    n = np.arange(-N, N + 1, dtype=float)
    M = 2 * N + 1
    k = np.arange(1, N + 1)
    labels = np.concatenate([[0], k, -k])
    cols = [np.full(M, M**-0.5)]
    claimed = [0.0]
    norm = (N + 0.5) ** 0.5
    for kk in k:
        y = (2 * kk - 1) * np.pi / M
        cols.append(np.sin(y * n) / norm)
        claimed.append(y**2)
    for kk in k:
        y = 2 * kk * np.pi / M
        cols.append(np.cos(y * n) / norm)
        claimed.append(y**2)
    funcs = np.stack(cols, axis=1)
    claimed = np.asarray(claimed)
    box = LatticeBox(N, 1)
    neg_lap = -apply_laplacian(funcs, box)
    residuals = np.linalg.norm(neg_lap - funcs * claimed, axis=0)
    exact = np.sum(funcs * neg_lap, axis=0) / np.sum(funcs * funcs, axis=0)
    true_w = np.linalg.eigvalsh(-laplacian_matrix(box))
    nearest = true_w[np.argmin(np.abs(true_w[None, :] - claimed[:, None]), axis=1)]
    return SineBasis1D(N, labels, funcs, claimed, exact, residuals, nearest)


# --- expansion of the coordinate function -------------------------------------------


@dataclass
class DriftCoefficients:
    """Coefficients α_j with n = φ0^(d-1) Σ_{j≠0} α_j φ_j(n) on {-N..N}."""

    N: int
    d: int
    labels: np.ndarray
    values: np.ndarray
    closed_form: np.ndarray
    eigenvalues: np.ndarray
    functions: np.ndarray = field(repr=False)

    @property
    def phi0(self) -> float:
        return (2 * self.N + 1) ** -0.5

    def value(self, j: int) -> float:
        return float(self.values[np.flatnonzero(self.labels == j)[0]])

    def reconstruct(self) -> np.ndarray:
        return self.phi0 ** (self.d - 1) * (self.functions @ self.values)


def alpha_closed_form(N: int, d: int, k) -> np.ndarray:
    """√2 (2N+1)^((d-2)/2) sin(NY) / (2 sin²(Y/2)) with Y = (2k-1)π/(2N+1)."""
    y = (2 * np.asarray(k, dtype=float) - 1) * np.pi / (2 * N + 1)
    return np.sqrt(2.0) * (2 * N + 1) ** ((d - 2) / 2) * np.sin(N * y) / (2 * np.sin(y / 2) ** 2)


def alpha_coefficients(N: int, d: int) -> DriftCoefficients:
    pb = paper_basis_1d(N)
    keep = pb.labels != 0
    labels = pb.labels[keep]
    funcs = pb.functions[:, keep]
    phi0 = (2 * N + 1) ** -0.5
    # Σ_n n φ(n) folded as Σ_{n>0} n (φ(n) - φ(-n)); even functions then cancel exactly
    pos = np.arange(1, N + 1, dtype=float)
    odd = funcs[N + 1:] - funcs[N - 1::-1]
    values = phi0 ** (1 - d) * (pos @ odd)
    closed = np.where(labels > 0, alpha_closed_form(N, d, np.maximum(labels, 1)), 0.0)
    return DriftCoefficients(N, d, labels, values, closed, pb.claimed[keep], funcs)


def drift_energy_check(N: int, d: int, a: float, *, eigenvalues: str = "closed_form") -> float:
    """d a² Σ_{ℓ≠0} α_ℓ² λ_ℓ  (the drift cost at β = 1).

    ``eigenvalues="closed_form"`` uses the closed-form ((2k-1)π/(2N+1))²;
    ``"exact"`` uses the Rayleigh quotients of the same functions under the
    discrete operator, for which the sum equals H(x_1) = 2N(2N+1)^(d-1).
    """
    coef = alpha_coefficients(N, d)
    if eigenvalues == "closed_form":
        lam = coef.eigenvalues
    elif eigenvalues == "exact":
        pb = paper_basis_1d(N)
        lam = pb.exact[pb.labels != 0]
    else:
        raise ValueError(f"unknown eigenvalue source {eigenvalues!r}")
    return float(d * a**2 * np.sum(coef.values**2 * lam))
