"""Experiment runners: radius scaling under Q_N, the γ = 0 contrast, the
dilation-family energy balance, variance scans and semigroup tables.

Every runner returns a ``RunReport``. Its JSON-lines form has one record per
measurement; wall times, timestamps and the git hash sit under ``"meta"`` and
are left out of ``payload_digest`` so that reruns hash identically.
"""

from __future__ import annotations

import csv
import datetime as _dt
import functools
import hashlib
import json
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from selfrepel.harness.config import ExperimentConfig
from selfrepel.lattice import FieldConfig, LatticeBox
from selfrepel.observables import (
    dilation_penalty,
    effective_radius,
    middle_decade,
    semigroup_diagnostics,
    variance_bounds_scan,
)
from selfrepel.sampling import (
    ChainState,
    GibbsParams,
    batch_penalties,
    extend_chain,
    make_rng,
    run_chain,
    sample_drifted_field,
    sample_free_field,
)
from selfrepel.spectral import eigendecompose
from selfrepel.stats import batch_means_stderr, effective_sample_size


class FitError(ValueError):
    """Too few usable points for a scaling fit."""


@functools.lru_cache(maxsize=1)
def git_hash() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _meta(wall: float | None = None) -> dict:
    m = {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(), "git": git_hash()}
    if wall is not None:
        m["wall_time"] = wall
    return m


# --- fits -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingFit:
    exponent: float
    stderr: float
    intercept: float
    r_squared: float
    n_points: int
    residuals: tuple[float, ...]
    reliable: bool
    ci95: tuple[float, float]


def fit_exponent(N, R, min_points: int = 3, min_r2: float = 0.9) -> ScalingFit:
    """Least squares for log R = ν log N + c."""
    N = np.asarray(N, dtype=float)
    R = np.asarray(R, dtype=float)
    ok = np.isfinite(R) & (R > 0)
    if ok.sum() < min_points:
        raise FitError(f"need at least {min_points} valid points, got {int(ok.sum())}")
    x, y = np.log(N[ok]), np.log(R[ok])
    res = stats.linregress(x, y)
    resid = y - (res.intercept + res.slope * x)
    r2 = float(res.rvalue**2)
    dof = len(x) - 2
    half = float(stats.t.ppf(0.975, dof) * res.stderr) if dof > 0 else float("inf")
    return ScalingFit(
        float(res.slope), float(res.stderr), float(res.intercept), r2, len(x),
        tuple(float(r) for r in resid), r2 >= min_r2, (float(res.slope) - half, float(res.slope) + half),
    )


# --- dilation family ------------------------------------------------------------------


def dilation_energy(N: int, d: int, a: float) -> float:
    """H(a x) summed over components: a² d 2N (2N+1)^(d-1)."""
    return a * a * LatticeBox(N, d).n_pairs


@dataclass(frozen=True)
class FloryRow:
    N: int
    d: int
    beta: float
    gamma: float
    a_star: float
    energy: float
    penalty: float
    radius: float
    radius_over_N: float


def flory_minimizer(N: int, d: int, beta: float, gamma: float, grid: int = 48) -> tuple[float, list[tuple[float, float, float]]]:
    """a* minimising β H(a x) + γ ∫ℓ²(a x) by a grid bracket then golden section.

    Returns a* and the scanned (a, energy, penalty) samples.
    """
    def total(a):
        return beta * dilation_energy(N, d, a) + gamma * dilation_penalty(N, d, a)

    if gamma == 0:
        return 0.0, []
    a_grid = np.geomspace(1e-3, 2.0, grid)
    scan = [(float(a), dilation_energy(N, d, a), dilation_penalty(N, d, a)) for a in a_grid]
    vals = np.array([beta * e + gamma * p for _, e, p in scan])
    k = int(np.argmin(vals))
    if k == 0 or k == grid - 1:
        return float(a_grid[k]), scan
    res = optimize.minimize_scalar(total, bracket=(a_grid[k - 1], a_grid[k], a_grid[k + 1]), method="golden", tol=1e-6)
    return float(res.x), scan


def run_flory_balance(N_grid, d: int, beta: float, gamma: float) -> "RunReport":
    rows, curve = [], []
    t0 = time.perf_counter()
    for N in N_grid:
        a, scan = flory_minimizer(N, d, beta, gamma)
        box = LatticeBox(N, d)
        u = FieldConfig.dilation(box, a)
        R = effective_radius(u)
        rows.append(asdict(FloryRow(N, d, beta, gamma, a, dilation_energy(N, d, a), dilation_penalty(N, d, a), R, R / N)))
        curve += [{"N": N, "a": s[0], "energy": s[1], "penalty": s[2]} for s in scan]
    cfg = {"experiment": "flory", "N_grid": list(N_grid), "d": d, "beta": beta, "gamma": gamma}
    return RunReport("flory", cfg, tables={"flory": rows, "dilation_curve": curve}, wall_time=time.perf_counter() - t0)


# --- radius scaling -------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    N: int
    d: int
    beta: float
    gamma: float
    replicate: int
    chain: int
    seed: int
    mcmc: dict
    min_ess: float = 0.0
    max_sweeps: int = 0


def _median_ci(x: np.ndarray, n_batches: int = 20) -> tuple[float, float]:
    n_batches = min(n_batches, len(x))
    size = len(x) // n_batches
    if size < 1 or n_batches < 2:
        return float("nan"), float("nan")
    med = np.median(x[: size * n_batches].reshape(n_batches, size), axis=1)
    se = med.std(ddof=1) / math.sqrt(n_batches)
    m = float(np.median(x))
    return m - 1.96 * se, m + 1.96 * se


def run_cell(cell: Cell) -> dict:
    """One (N, replicate) measurement; exact sampling when γ = 0, MCMC otherwise."""
    from selfrepel.sampling import MCMCConfig

    t0 = time.perf_counter()
    box = LatticeBox(cell.N, cell.d)
    basis = eigendecompose(box)
    params = GibbsParams(cell.beta, cell.gamma)
    cfg = MCMCConfig(**cell.mcmc)
    out = {"N": cell.N, "d": cell.d, "beta": cell.beta, "gamma": cell.gamma,
           "replicate": cell.replicate, "seed": cell.seed, "chain": cell.chain}
    if cell.gamma == 0:
        rng = make_rng(cell.seed, cell.chain)
        m = max(cfg.sweeps // cfg.thin, 10)
        u = sample_free_field(basis, params, rng, size=m)
        r = np.array([effective_radius(f) for f in u])
        pen = batch_penalties(u)
        out.update(method="exact", step_range=[0, m], acceptance_local=None, acceptance_dilation=None,
                   ess=float(m), converged=True)
    else:
        a_star, _ = flory_minimizer(cell.N, cell.d, cell.beta, cell.gamma)
        start = sample_drifted_field(basis, params, a_star, make_rng(cell.seed, cell.chain, purpose=1))
        state = ChainState.from_field(start, params, cfg, chain=cell.chain)
        run = run_chain(state)
        ess = effective_sample_size(run.samples["radius"])
        # double the measurement phase until the ESS gate is met or max_sweeps is reached
        done = cfg.sweeps
        while ess < cell.min_ess and done < cell.max_sweeps:
            more = min(done, cell.max_sweeps - done)
            run = extend_chain(state, run, more)
            done += more
            ess = effective_sample_size(run.samples["radius"])
        r = np.asarray(run.samples["radius"])
        pen = np.asarray(run.samples["penalty"])
        out.update(method="mcmc", step_range=list(run.step_range), acceptance_local=run.acceptance_local,
                   acceptance_dilation=run.acceptance_dilation, sigma=run.sigma, eta=run.eta,
                   warm_start_a=a_star, sweeps=done, ess=ess, converged=bool(run.cache_ok and ess >= cell.min_ess))
    lo, hi = _median_ci(r)
    out.update(
        mean_R=float(r.mean()), se_R=batch_means_stderr(r), median_R=float(np.median(r)),
        median_ci=[lo, hi], penalty_mean=float(pen.mean()), penalty_sd=float(pen.std()), samples=int(len(r)),
    )
    out["_wall"] = time.perf_counter() - t0
    return out


@dataclass
class RunReport:
    """Measurements, fits and tables of one experiment."""

    experiment: str
    config: dict
    cells: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def records(self) -> list[dict]:
        recs = [{"kind": "config", "experiment": self.experiment, "config": self.config, "meta": _meta()}]
        for c in self.cells:
            c = dict(c)
            wall = c.pop("_wall", None)
            recs.append({"kind": "cell", **c, "meta": _meta(wall)})
        for name, fit in self.fits.items():
            recs.append({"kind": "fit", "name": name, **fit, "meta": _meta()})
        for name, rows in self.tables.items():
            for row in rows:
                recs.append({"kind": "row", "table": name, **row, "meta": _meta()})
        recs.append({"kind": "summary", "experiment": self.experiment, "meta": _meta(self.wall_time)})
        return recs

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, allow_nan=True) + "\n" for r in self.records())

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def read(cls, path) -> "RunReport":
        rep = None
        with Path(path).open() as fh:
            for line in fh:
                rec = json.loads(line)
                rec.pop("meta", None)
                kind = rec.pop("kind")
                if kind == "config":
                    rep = cls(rec["experiment"], rec["config"])
                elif rep is None:
                    raise ValueError(f"{path}: first record must be the config")
                elif kind == "cell":
                    rep.cells.append(rec)
                elif kind == "fit":
                    rep.fits[rec.pop("name")] = rec
                elif kind == "row":
                    rep.tables.setdefault(rec.pop("table"), []).append(rec)
        if rep is None:
            raise ValueError(f"{path}: empty report")
        return rep


def payload_lines(jsonl: str) -> list[str]:
    """JSON-lines with the ``meta`` field removed, in canonical form."""
    out = []
    for line in jsonl.splitlines():
        rec = json.loads(line)
        rec.pop("meta", None)
        out.append(json.dumps(rec, sort_keys=True))
    return out


def payload_digest(jsonl: str) -> str:
    return hashlib.sha256("\n".join(payload_lines(jsonl)).encode()).hexdigest()


def _cells(cfg: ExperimentConfig, gamma: float, chain0: int = 0) -> list[Cell]:
    mc = cfg.to_dict()["mcmc"]
    cells, chain = [], chain0
    for N in cfg.N_grid:
        for rep in range(cfg.replicates):
            cells.append(Cell(N, cfg.d, cfg.beta, gamma, rep, chain, cfg.seed, mc, cfg.min_ess, cfg.max_sweeps))
            chain += 1
    return cells


def _run_cells(cells: list[Cell], workers: int) -> list[dict]:
    if workers <= 1:
        return [run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, cells))


def _fit_cells(cells: list[dict], key: str = "median_R") -> dict:
    by_N: dict[int, list[float]] = {}
    for c in cells:
        if c["converged"]:
            by_N.setdefault(c["N"], []).append(c[key])
    N = sorted(by_N)
    R = [float(np.median(by_N[n])) for n in N]
    try:
        fit = asdict(fit_exponent(N, R))
        fit["status"] = "ok" if fit["reliable"] else "unreliable"
    except FitError as exc:
        fit = {"status": "refused", "reason": str(exc)}
    fit.update(N=N, R=R, observable=key)
    return fit


def run_scaling_study(cfg: ExperimentConfig) -> RunReport:
    """Median effective radius under Q_N across ``cfg.N_grid``, with a log-log fit.

    When ``cfg.gamma > 0`` the γ = 0 contrast is run on the same grid.
    A non-empty ``gamma_grid`` adds a γ sweep at the smallest N.
    """
    t0 = time.perf_counter()
    cells = _run_cells(_cells(cfg, cfg.gamma), cfg.workers)
    fits = {"radius": _fit_cells(cells)}
    chain0 = len(cells)
    tables = {}
    if cfg.gamma > 0:
        control = _run_cells(_cells(cfg, 0.0, chain0), cfg.workers)
        chain0 += len(control)
        cells += control
        fits["control"] = _fit_cells(control)
    ctrl = [c for c in cells if c["gamma"] == 0]
    if ctrl:
        tables["gamma0_normalizations"] = [
            {
                "N": c["N"],
                "median_R": c["median_R"],
                "R_over_sqrt_beta_logN": c["median_R"] / (math.sqrt(c["beta"]) * math.log(c["N"])),
                "R_sqrt_beta_over_logN": c["median_R"] * math.sqrt(c["beta"]) / math.log(c["N"]),
            }
            for c in ctrl if c["N"] > 1
        ]
    if cfg.gamma_grid:
        N0 = cfg.N_grid[0]
        trend = []
        for g in cfg.gamma_grid:
            sub = ExperimentConfig(**{**_plain(cfg), "N_grid": (N0,), "gamma": g, "gamma_grid": ()})
            res = _run_cells(_cells(sub, g, chain0), cfg.workers)
            chain0 += len(res)
            trend.append({"N": N0, "gamma": g, "median_R": float(np.median([c["median_R"] for c in res]))})
        meds = [t["median_R"] for t in trend]
        tables["gamma_trend"] = trend
        fits["gamma_trend"] = {"monotone_nondecreasing": bool(all(b >= a for a, b in zip(meds, meds[1:])))}
    return RunReport("scaling", cfg.to_dict(), cells, fits, tables, time.perf_counter() - t0)


def _plain(cfg: ExperimentConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


# --- variance and semigroup tables ----------------------------------------------------


def run_variance_scan(N_grid, d: int, beta: float = 1.0) -> RunReport:
    t0 = time.perf_counter()
    rows = []
    for N in N_grid:
        box = LatticeBox(N, d)
        s = variance_bounds_scan(box, beta)
        rows.append({
            "N": N, "d": d, "beta": beta, "min_variance": s.min_variance, "max_variance": s.max_variance,
            "argmin": [int(i) for i in s.argmin], "argmax": [int(i) for i in s.argmax],
            "max_over_log2": s.max_variance / math.log(N) ** 2 if N > 1 else None, "exhaustive": s.exhaustive,
        })
    cfg = {"experiment": "variance", "N_grid": list(N_grid), "d": d, "beta": beta}
    return RunReport("variance", cfg, tables={"variance": rows}, wall_time=time.perf_counter() - t0)


def run_semigroup(N: int, t_grid, z: int = 0) -> RunReport:
    t0 = time.perf_counter()
    t_grid = np.asarray(t_grid, dtype=float)
    tab = semigroup_diagnostics(N, t_grid, z)
    lo, hi = middle_decade(1.0, float(N) ** 2)
    mid = (t_grid >= lo) & (t_grid <= hi)
    fits = {}
    if mid.sum() >= 3:
        lt = np.log(t_grid[mid])
        raw = stats.linregress(lt, np.log(tab.return_prob[mid]))
        exc = stats.linregress(lt, np.log(tab.excess[mid]))
        fits["decay"] = {"t_lo": lo, "t_hi": hi, "slope": float(raw.slope), "stderr": float(raw.stderr),
                         "excess_slope": float(exc.slope), "excess_stderr": float(exc.stderr)}
    cfg = {"experiment": "semigroup", "N": N, "z": z}
    return RunReport("semigroup", cfg, fits=fits, tables={"semigroup": list(tab.rows())}, wall_time=time.perf_counter() - t0)


# --- plot data ------------------------------------------------------------------------

PLOT_SERIES = {
    "radius.csv": ("cells", ["N", "gamma", "replicate", "median_R", "ci_lo", "ci_hi"]),
    "variance.csv": ("variance", ["N", "d", "min_variance", "max_variance"]),
    "flory.csv": ("dilation_curve", ["N", "a", "energy", "penalty"]),
    "semigroup.csv": ("semigroup", ["N", "t", "return_prob"]),
}


def emit_plot_data(report: RunReport, out_dir) -> list[Path]:
    """Write the CSV series that ``report`` supports; returns the paths written."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    written = []
    for fname, (source, cols) in PLOT_SERIES.items():
        if source == "cells":
            rows = [
                {**c, "ci_lo": c["median_ci"][0], "ci_hi": c["median_ci"][1]}
                for c in report.cells
            ]
        else:
            rows = report.tables.get(source, [])
        if not rows:
            continue
        path = out_dir / fname
        try:
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                for r in rows:
                    w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written
