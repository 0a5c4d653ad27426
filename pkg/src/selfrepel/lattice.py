"""The box [-N, N]^d of Z^d, its nearest-neighbour structure and the
reflecting (Neumann) graph Laplacian.

Sites are enumerated lexicographically by coordinates, first axis most
significant; every array indexed by sites in this package uses that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

DEFAULT_DENSE_CAP = 20000


class DimensionMismatch(ValueError):
    """A field does not have one value per site of the box."""


class CapExceeded(ValueError):
    """Materialising an n x n operator was refused because n is too large."""


@dataclass(frozen=True)
class LatticeBox:
    """Cube S = [-N, N]^d ∩ Z^d with free (reflecting) boundary."""

    N: int
    d: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"half-width N must be a positive integer, got {self.N!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension d must be an integer >= 1, got {self.d!r}")

    @property
    def side(self) -> int:
        return 2 * self.N + 1

    @property
    def n_sites(self) -> int:
        return self.side**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    @cached_property
    def sites(self) -> np.ndarray:
        """Integer coordinates, shape (n, d), lexicographic order."""
        grid = np.indices(self.shape).reshape(self.d, -1).T
        return grid - self.N

    @cached_property
    def pairs(self) -> np.ndarray:
        """Unordered nearest-neighbour pairs (i, j) with i < j, shape (m, 2)."""
        idx = np.arange(self.n_sites).reshape(self.shape)
        blocks = []
        for axis in range(self.d):
            lo = np.take(idx, np.arange(self.side - 1), axis=axis).ravel()
            hi = np.take(idx, np.arange(1, self.side), axis=axis).ravel()
            blocks.append(np.stack([lo, hi], axis=1))
        out = np.concatenate(blocks)
        return out[np.lexsort((out[:, 1], out[:, 0]))]

    @property
    def n_pairs(self) -> int:
        return self.d * (2 * self.N) * self.side ** (self.d - 1)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        i, j = self.pairs[:, 0], self.pairs[:, 1]
        n = self.n_sites
        ones = np.ones(len(i))
        a = sp.coo_matrix((np.r_[ones, ones], (np.r_[i, j], np.r_[j, i])), shape=(n, n))
        return a.tocsr()

    @cached_property
    def degree(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel().astype(np.int64)

    @cached_property
    def neighbor_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """(indptr, indices) adjacency lists, neighbours sorted per site."""
        a = self.adjacency
        a.sort_indices()
        return a.indptr.astype(np.int64), a.indices.astype(np.int64)

    def index_of(self, x) -> int:
        """Site index of integer coordinates ``x`` (length d)."""
        x = np.asarray(x, dtype=np.int64)
        if x.shape != (self.d,) or np.any(np.abs(x) > self.N):
            raise ValueError(f"{x.tolist()} is not a site of {self}")
        return int(np.ravel_multi_index(tuple(x + self.N), self.shape))

    def coordinate(self, i: int) -> np.ndarray:
        return self.sites[i].copy()

    def coordinate_field(self, axis: int) -> np.ndarray:
        """The function x -> x_axis on the box."""
        return self.sites[:, axis].astype(float)

    def to_dict(self) -> dict:
        return {"N": int(self.N), "d": int(self.d)}


def _check_field(f, box: LatticeBox) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim not in (1, 2) or f.shape[0] != box.n_sites:
        raise DimensionMismatch(
            f"field of shape {f.shape} does not match {box.n_sites} sites of {box}"
        )
    return f


def inner_product(f, g) -> float:
    """Site-wise inner product, summed over components for vector fields."""
    return float(np.sum(np.asarray(f, dtype=float) * np.asarray(g, dtype=float)))


def dirichlet_energy(f, g, box: LatticeBox) -> float:
    """H(f, g): sum over neighbour pairs of (f(x) - f(y)) . (g(x) - g(y)).

    Works for scalar fields (shape (n,)) and vector fields (shape (n, D)).
    """
    f = _check_field(f, box)
    g = _check_field(g, box)
    if f.shape != g.shape:
        raise DimensionMismatch(f"fields have different shapes {f.shape} and {g.shape}")
    i, j = box.pairs[:, 0], box.pairs[:, 1]
    return float(np.sum((f[i] - f[j]) * (g[i] - g[j])))


def apply_laplacian(f, box: LatticeBox) -> np.ndarray:
    """(Δf)(x) = sum over neighbours y inside the box of f(y) - f(x).

    This is the operator characterised by H(f, g) = -(f, Δg).
    """
    f = _check_field(f, box)
    deg = box.degree if f.ndim == 1 else box.degree[:, None]
    return box.adjacency @ f - deg * f


def laplacian_matrix(box: LatticeBox, *, sparse: bool = False, cap: int = DEFAULT_DENSE_CAP):
    """Matrix of Δ in site order (dense by default, CSR when ``sparse``)."""
    n = box.n_sites
    if n > cap:
        raise CapExceeded(f"{box} has {n} sites, above the materialisation cap {cap}")
    lap = box.adjacency - sp.diags(box.degree.astype(float))
    if sparse:
        return lap.tocsr()
    return lap.toarray()


@dataclass
class FieldConfig:
    """A map from the sites of ``box`` into R^D with every component summing to zero.

    ``values`` has shape (n_sites, D); column i is the component u^(i).
    """

    box: LatticeBox
    values: np.ndarray
    tol: float = field(default=1e-9, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.box.n_sites:
            raise DimensionMismatch(
                f"values of shape {v.shape} do not match {self.box.n_sites} sites"
            )
        scale = max(1.0, float(np.max(np.abs(v))) if v.size else 1.0)
        means = v.mean(axis=0)
        if np.any(np.abs(means) > self.tol * scale):
            raise ValueError(f"field components are not zero-mean: means={means}")
        self.values = v

    @classmethod
    def centered(cls, box: LatticeBox, values) -> "FieldConfig":
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        return cls(box, v - v.mean(axis=0))

    @classmethod
    def zeros(cls, box: LatticeBox, D: int | None = None) -> "FieldConfig":
        return cls(box, np.zeros((box.n_sites, box.d if D is None else D)))

    @classmethod
    def dilation(cls, box: LatticeBox, a: float) -> "FieldConfig":
        """u(x) = a x (the identity embedding scaled by ``a``)."""
        return cls.centered(box, a * box.sites.astype(float))

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def component(self, i: int) -> np.ndarray:
        return self.values[:, i]

    def energy(self) -> float:
        """Elastic energy H(u) summed over components."""
        return dirichlet_energy(self.values, self.values, self.box)
