"""Release checks: every module's invariants at small, fast sizes.

Each check is a function ``ctx -> CheckResult``. ``ctx`` carries the
callables under test (currently the eigensolver), so a check can be rerun
against a deliberately broken implementation to confirm it catches faults.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from selfrepel.lattice import FieldConfig, LatticeBox, apply_laplacian, dirichlet_energy, inner_product
from selfrepel.observables import (
    dilation_penalty,
    loglog_slope,
    middle_decade,
    penalty_integral,
    penalty_jensen_check,
    return_probability,
    semigroup_diagnostics,
    variance_bounds_scan,
    variance_pair,
)
from selfrepel.sampling import GibbsParams, make_rng, sample_free_field
from selfrepel.spectral import alpha_coefficients, eigendecompose


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class ValidationReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        return [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<20s} {r.detail}  ({r.seconds:.1f}s)" for r in self.results]


def default_context() -> dict:
    return {"eigendecompose": eigendecompose, "seed": 20240601}


def check_spectral(ctx) -> CheckResult:
    worst_gram = worst_res = 0.0
    for N, d in [(1, 1), (4, 1), (8, 1), (1, 2), (4, 2), (8, 2), (2, 3)]:
        b = ctx["eigendecompose"](LatticeBox(N, d))
        worst_gram = max(worst_gram, b.gram_deviation())
        worst_res = max(worst_res, float(b.residuals().max()))
    ok = worst_gram < 1e-9 and worst_res < 1e-8
    return CheckResult("spectral", ok, f"gram {worst_gram:.1e}, residual {worst_res:.1e}")


def check_laplacian(ctx) -> CheckResult:
    rng = np.random.default_rng(ctx["seed"])
    worst = 0.0
    for N, d in [(1, 1), (3, 1), (2, 2), (3, 2), (2, 3)]:
        box = LatticeBox(N, d)
        for _ in range(5):
            f, g = rng.standard_normal((2, box.n_sites))
            h = dirichlet_energy(f, g, box)
            worst = max(worst, abs(h + inner_product(f, apply_laplacian(g, box))) / max(1.0, abs(h)))
    return CheckResult("laplacian_identity", worst < 1e-10, f"max rel. error {worst:.1e}")


def check_covariance(ctx) -> CheckResult:
    box = LatticeBox(2, 2)
    basis = ctx["eigendecompose"](box)
    beta = 1.0
    m = 20000
    u = sample_free_field(basis, GibbsParams(beta), make_rng(ctx["seed"]), size=m)[:, :, 0]
    cov = basis.covariance(beta)
    pairs = [(0, 24), (12, 13), (3, 17), (6, 6), (0, 1)]
    worst = 0.0
    for i, j in pairs:
        prod = u[:, i] * u[:, j]
        se = prod.std(ddof=1) / np.sqrt(m)
        worst = max(worst, abs(prod.mean() - cov[i, j]) / se)
    return CheckResult("covariance", worst < 4.0, f"max |z| {worst:.2f} over {len(pairs)} pairs")


def _grid_penalty(points: np.ndarray, h: float) -> float:
    """∫ℓ² by midpoint sampling on a 2-d grid of spacing h."""
    lo = points.min(axis=0) - 1.0
    hi = points.max(axis=0) + 1.0
    y1 = np.arange(lo[0] + h / 2, hi[0], h)
    y2 = np.arange(lo[1] + h / 2, hi[1], h)
    a1 = (np.abs(y1[:, None] - points[None, :, 0]) < 0.5).astype(float)
    a2 = (np.abs(y2[:, None] - points[None, :, 1]) < 0.5).astype(float)
    ell = a1 @ a2.T
    return float(np.sum(ell**2) * h * h)


def check_penalty(ctx) -> CheckResult:
    rng = np.random.default_rng(ctx["seed"])
    h = 1.0 / 64
    worst = 0.0
    for _ in range(5):
        # values on the grid h Z, so box edges fall on cell boundaries
        pts = np.round(rng.uniform(-1.5, 1.5, size=(12, 2)) / h) * h
        worst = max(worst, abs(penalty_integral(pts).total - _grid_penalty(pts, h)))
    n = 9
    coincident = penalty_integral(np.zeros((n, 2))).total
    fam = abs(dilation_penalty(3, 2, 0.3) - penalty_integral(FieldConfig.dilation(LatticeBox(3, 2), 0.3)).total)
    ok = worst < 1e-9 and coincident == n * n and fam < 1e-9
    return CheckResult("penalty_oracle", ok, f"grid error {worst:.1e}, coincident {coincident:g}, dilation {fam:.1e}")


def check_variance(ctx) -> CheckResult:
    box = LatticeBox(1, 1)
    a = variance_pair(box, 1.0, 0, 1).variance
    b = variance_pair(box, 1.0, 0, 1, method="spectral").variance
    mins = [variance_bounds_scan(LatticeBox(N, 2), 1.0).min_variance for N in (2, 4, 8)]
    ok = abs(a - b) < 1e-10 and min(mins) > 0.2
    return CheckResult("variance_bounds", ok, f"solve/spectral {abs(a - b):.1e}, min variances {np.round(mins, 4).tolist()}")


def check_jensen(ctx) -> CheckResult:
    rng = np.random.default_rng(ctx["seed"])
    bad = applicable = 0
    for N in (4, 8):
        box = LatticeBox(N, 2)
        for eps in (0.25, 0.5, 0.75):
            for scale in (0.1, 0.3, 0.49):
                u = rng.uniform(-1, 1, size=(box.n_sites, 2)) * scale * eps * N / np.sqrt(2)
                c = penalty_jensen_check(FieldConfig.centered(box, u), eps)
                applicable += c.applicable
                bad += c.applicable and not c.holds
    return CheckResult("jensen", bad == 0 and applicable > 0, f"{applicable} applicable fields, {bad} violations")


def check_drift(ctx) -> CheckResult:
    worst_rec = worst_cos = 0.0
    for N in (4, 8, 16):
        c = alpha_coefficients(N, 2)
        worst_rec = max(worst_rec, float(np.abs(c.reconstruct() - np.arange(-N, N + 1)).max()))
        worst_cos = max(worst_cos, float(np.abs(c.values[c.labels < 0]).max()))
    ok = worst_rec < 1e-8 and worst_cos == 0.0
    return CheckResult("drift_coefficients", ok, f"reconstruction {worst_rec:.1e}, cosine max {worst_cos:g}")


def check_semigroup(ctx) -> CheckResult:
    N = 16
    lo, hi = middle_decade(1.0, N**2)
    t = np.geomspace(lo, hi, 15)
    slope, _ = loglog_slope(t, semigroup_diagnostics(N, t).return_prob)
    late = abs(float(return_probability(N, 50 * N**2 * np.log(N))[0]) - 1 / (2 * N + 1))
    ok = -0.6 <= slope <= -0.4 and late < 1e-8
    return CheckResult("semigroup", ok, f"slope {slope:.3f}, late-time gap {late:.1e}")


CHECKS: dict[str, Callable] = {
    "spectral": check_spectral,
    "laplacian_identity": check_laplacian,
    "covariance": check_covariance,
    "penalty_oracle": check_penalty,
    "variance_bounds": check_variance,
    "jensen": check_jensen,
    "drift_coefficients": check_drift,
    "semigroup": check_semigroup,
}


def run_validation_suite(only=None, **overrides) -> ValidationReport:
    """Run the named checks (all by default); keyword overrides replace context entries."""
    ctx = {**default_context(), **overrides}
    names = list(CHECKS) if only is None else list(only)
    rep = ValidationReport()
    for name in names:
        if name not in CHECKS:
            raise KeyError(f"unknown check {name!r}")
        t0 = time.perf_counter()
        try:
            res = CHECKS[name](ctx)
        except Exception as exc:  # a crashing check is a failed check
            res = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        rep.results.append(CheckResult(res.name, res.passed, res.detail, time.perf_counter() - t0))
    return rep
