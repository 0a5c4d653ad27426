"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the slow scaling probe is
marked ``slow`` and can be skipped with ``-m 'not slow'``.
"""

import math

import numpy as np
import pytest
from scipy import stats

from selfrepel.harness.config import ExperimentConfig
from selfrepel.harness.experiments import payload_digest, payload_lines, run_flory_balance, run_scaling_study
from selfrepel.lattice import FieldConfig, LatticeBox
from selfrepel.observables import (
    effective_radius,
    loglog_slope,
    middle_decade,
    penalty_integral,
    penalty_jensen_check,
    return_probability,
    semigroup_diagnostics,
    variance_bounds_scan,
    variance_pair,
)
from selfrepel.sampling import (
    ChainState,
    GibbsParams,
    MCMCConfig,
    SMCSettings,
    estimate_tilted_expectation,
    make_rng,
    run_chain,
    sample_free_field,
)
from selfrepel.spectral import alpha_coefficients, drift_energy_check, eigendecompose
from selfrepel.stats import mean_stderr

SEED = 20240601


# --- 1 ---------------------------------------------------------------------------------


def test_criterion_1_spectral(criterion):
    cases = [(N, d) for d in (1, 2) for N in range(1, 17)] + [(N, 3) for N in range(1, 5)]
    gram = res = 0.0
    for N, d in cases:
        b = eigendecompose(LatticeBox(N, d))
        gram = max(gram, b.gram_deviation())
        res = max(res, float(b.residuals().max()))
    small = eigendecompose(LatticeBox(1, 1)).eigenvalues.tolist()
    ok = gram < 1e-9 and res < 1e-8 and small == [0.0, 1.0, 3.0]
    criterion(1, ok, f"{len(cases)} boxes: max Gram deviation {gram:.1e}, max residual {res:.1e}; N=1 spectrum {small}")
    assert ok


# --- 2 ---------------------------------------------------------------------------------


def _empirical_products(basis, beta, pairs, m, rng, batch=10_000):
    """Mean and standard error of u(z) u(w) over ``m`` exact single-component draws."""
    z, w = pairs[:, 0], pairs[:, 1]
    s = np.zeros(len(pairs))
    s2 = np.zeros(len(pairs))
    for lo in range(0, m, batch):
        u = sample_free_field(basis, GibbsParams(beta), rng, D=1, size=min(batch, m - lo))[:, :, 0]
        p = u[:, z] * u[:, w]
        s += p.sum(axis=0)
        s2 += (p**2).sum(axis=0)
    mean = s / m
    se = np.sqrt((s2 / m - mean**2) / (m - 1))
    return mean, se


def test_criterion_2_covariance(criterion):
    box = LatticeBox(4, 2)
    basis = eigendecompose(box)
    pairs = np.random.default_rng(SEED).integers(0, box.n_sites, size=(20, 2))
    cov = basis.covariance(1.0)
    exact = cov[pairs[:, 0], pairs[:, 1]]
    m = 100_000
    e1, se1 = _empirical_products(basis, 1.0, pairs, m, make_rng(SEED, 0))
    e2, se2 = _empirical_products(basis, 2.0, pairs, m, make_rng(SEED, 1))
    z1 = np.abs(e1 - exact) / se1
    z2 = np.abs(e2 - exact / 2) / se2
    ok = bool(z1.max() < 3 and z2.max() < 3)
    criterion(2, ok, f"20 pairs, 1e5 draws: max |z| {z1.max():.2f} at beta=1, {z2.max():.2f} at beta=2 vs half")
    assert ok


# --- 3 ---------------------------------------------------------------------------------


def grid_penalty(points, h, block=512):
    """∫ℓ² by the midpoint rule on a square grid of spacing h (2-d values)."""
    lo = np.floor((points.min(axis=0) - 1.0) / h) * h
    hi = points.max(axis=0) + 1.0
    y1 = lo[0] + h * (np.arange(int(np.ceil((hi[0] - lo[0]) / h))) + 0.5)
    y2 = lo[1] + h * (np.arange(int(np.ceil((hi[1] - lo[1]) / h))) + 0.5)
    a2 = (np.abs(y2[:, None] - points[None, :, 1]) < 0.5).astype(float)
    total = 0.0
    for s in range(0, len(y1), block):
        a1 = (np.abs(y1[s:s + block, None] - points[None, :, 0]) < 0.5).astype(float)
        ell = a1 @ a2.T
        total += float(np.sum(ell * ell))
    return total * h * h


def test_criterion_3_penalty(criterion):
    h = 1e-3
    rng = np.random.default_rng(SEED)
    fields = []
    for k in range(19):
        n = int(rng.integers(5, 101))
        spread = rng.uniform(0.3, 2.0)
        fields.append(rng.uniform(-spread, spread, size=(n, 2)))
    fields.append(sample_free_field(eigendecompose(LatticeBox(4, 2)), GibbsParams(1.0), make_rng(SEED)).values)
    # values on the grid hZ², so the grid sum has no edge-discretisation error
    fields = [np.round(f / h) * h for f in fields]
    worst = max(abs(penalty_integral(f).total - grid_penalty(f, h)) for f in fields)
    coincident = [penalty_integral(np.zeros((n, 2))).total == n * n for n in (1, 7, 50, 100)]
    ok = worst <= 1e-3 and all(coincident)
    criterion(3, ok, f"20 fields (n <= 100), max |closed form - grid| {worst:.1e}; coincident n^2 exact: {all(coincident)}")
    assert ok


# --- 4 ---------------------------------------------------------------------------------


def test_criterion_4_variance_bounds(criterion):
    Ns2 = [4, 8, 16, 32]
    scans = [variance_bounds_scan(LatticeBox(N, 2), 1.0) for N in Ns2]
    mins = np.array([s.min_variance for s in scans])
    maxs = np.array([s.max_variance for s in scans])
    slope = stats.linregress(np.log(Ns2), mins).slope
    # any two distinct sites are separated by the <= 2d edges at one of them: R_eff >= 1/(2d)
    floor = 1.0 / (2 * 2 * 2 * 1.0)
    normed = maxs / np.log(Ns2) ** 2
    tail = normed[1:]
    d2_ok = bool(mins.min() > floor and slope >= -0.01 and np.all(np.diff(tail) <= 0))
    Ns3 = [2, 4, 8]
    max3 = np.array([variance_bounds_scan(LatticeBox(N, 3), 1.0).max_variance for N in Ns3])
    spread3 = (max3.max() - max3.min()) / max3.min()
    d3_ok = bool(spread3 < 0.10)
    ok = d2_ok and d3_ok
    criterion(
        4, ok,
        f"d=2 {'ok' if d2_ok else 'FAIL'}: min {np.round(mins, 4).tolist()} (floor {floor}, slope {slope:+.4f}), "
        f"max/log^2 {np.round(normed, 3).tolist()}; "
        f"d=3 {'ok' if d3_ok else 'FAIL'}: max {np.round(max3, 4).tolist()}, spread {spread3:.1%} (limit 10%)",
    )
    assert d2_ok, "d=2 part"
    assert d3_ok, f"d=3 max variance spread {spread3:.1%} exceeds 10%"


# --- 5 ---------------------------------------------------------------------------------


def test_criterion_5_drift_coefficients(criterion):
    Ns = [8, 16, 32, 64]
    bound, energy = [], []
    cos_zero = recon_ok = True
    for N in Ns:
        c = alpha_coefficients(N, 2)
        k = c.labels[c.labels > 0]
        bound.append(float(np.max(np.abs(c.values[c.labels > 0]) * k**2) * N ** (-(2 + 2) / 2)))
        energy.append(drift_energy_check(N, 2, 1.0) / N**2)
        cos_zero &= bool(np.all(c.values[c.labels < 0] == 0.0))
        recon_ok &= bool(np.abs(c.reconstruct() - np.arange(-N, N + 1)).max() <= 1e-8)
    vb = (max(bound) - min(bound)) / min(bound)
    ve = (max(energy) - min(energy)) / min(energy)
    ok = vb < 0.25 and ve < 0.25 and cos_zero and recon_ok
    criterion(
        5, ok,
        f"bound ratio {np.round(bound, 3).tolist()} (spread {vb:.1%}), "
        f"sum a^2 lambda / N^2 {np.round(energy, 3).tolist()} (spread {ve:.1%}); cosines zero {cos_zero}, reconstruction {recon_ok}",
    )
    assert ok


# --- 6 ---------------------------------------------------------------------------------


def jensen_fields():
    """Fields with diameter below εN; all (N, ε) have εN ≥ 1."""
    rng = np.random.default_rng(SEED)
    for N, eps in [(4, 0.3), (4, 0.6), (4, 0.9), (8, 0.25), (8, 0.5), (8, 0.75), (12, 0.2), (12, 0.5), (16, 0.3), (16, 0.6)]:
        box = LatticeBox(N, 2)
        n, r = box.n_sites, 0.45 * eps * N
        ang = rng.uniform(0, 2 * np.pi, n)
        yield N, eps, FieldConfig.dilation(box, 0.95 * eps / (2 * np.sqrt(2)))
        yield N, eps, FieldConfig.centered(box, r * np.c_[np.cos(ang), np.sin(ang)])
        rad = r * np.sqrt(rng.uniform(0, 1, n))
        yield N, eps, FieldConfig.centered(box, rad[:, None] * np.c_[np.cos(ang), np.sin(ang)])
        side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        yield N, eps, FieldConfig.centered(box, np.c_[0.8 * r * side, np.zeros(n)] + rng.normal(0, 0.02 * r, (n, 2)))
        free = sample_free_field(eigendecompose(box), GibbsParams(1.0), make_rng(SEED, N, int(eps * 100))).values
        yield N, eps, FieldConfig.centered(box, free * (0.9 * eps * N / effective_radius(free)))


def test_criterion_6_jensen(criterion):
    checks = [penalty_jensen_check(f, eps) for N, eps, f in jensen_fields()]
    applicable = sum(c.applicable for c in checks)
    violations = sum(c.applicable and not c.holds for c in checks)
    margin = min(c.lhs / c.rhs for c in checks if c.applicable)
    ok = len(checks) == 50 and applicable == 50 and violations == 0
    criterion(6, ok, f"{len(checks)} fields, {applicable} meet the radius precondition, {violations} violations, min lhs/rhs {margin:.2f}")
    assert ok


# --- 7 ---------------------------------------------------------------------------------


def test_criterion_7_semigroup(criterion):
    N = 32
    lo, hi = middle_decade(1.0, float(N * N))
    t = np.geomspace(lo, hi, 41)
    slope, _ = loglog_slope(t, semigroup_diagnostics(N, t).return_prob)
    t_late = 20.0 * N * N
    gap = abs(float(return_probability(N, t_late)[0]) - 1 / (2 * N + 1))
    ok = -0.6 <= slope <= -0.4 and gap <= 1e-8
    criterion(7, ok, f"N=32 slope {slope:.4f} on t in [{lo:.1f}, {hi:.1f}]; |p(t={t_late:.0f}) - 1/(2N+1)| = {gap:.1e}")
    assert ok


# --- 8 ---------------------------------------------------------------------------------


def test_criterion_8_sampler_cross_validation(criterion):
    box = LatticeBox(3, 2)
    params = GibbsParams(1.0, 0.5)
    basis = eigendecompose(box)
    radius = lambda f: effective_radius(f)

    cfg = MCMCConfig(sweeps=40_000, burn_in=2000, seed=SEED)
    start = sample_free_field(basis, GibbsParams(1.0), make_rng(SEED, 0, purpose=1))
    run = run_chain(ChainState.from_field(start, params, cfg))
    r = np.asarray(run.samples["radius"])
    mc, mc_se = float(r.mean()), mean_stderr(r)

    smc = SMCSettings(particles=200, runs=10, sweeps=5)
    isr = estimate_tilted_expectation(basis, params, radius, 2000, make_rng(SEED, 1), smc=smc)
    z = abs(mc - isr.estimate) / math.hypot(mc_se, isr.stderr)
    part1 = bool(z < 3 and run.cache_ok and isr.reliable)

    # γ = 0: pairwise variances from the chain against the exact pseudo-inverse
    box4 = LatticeBox(4, 2)
    pairs = [((-4, -4), (4, 4)), ((0, 0), (1, 0)), ((0, 0), (4, 4)), ((-4, 0), (4, 0)), ((-2, 3), (1, -1))]
    idx = [(box4.index_of(a), box4.index_of(b)) for a, b in pairs]
    obs = {f"p{k}": (lambda s, i=i, j=j: (s.pos[i, 0] - s.pos[j, 0]) ** 2) for k, (i, j) in enumerate(idx)}
    cfg0 = MCMCConfig(sweeps=80_000, burn_in=1000, seed=SEED, track_penalty=False)
    run0 = run_chain(ChainState.from_field(FieldConfig.zeros(box4), GibbsParams(1.0, 0.0), cfg0), obs)
    zs = []
    for k, (i, j) in enumerate(idx):
        x = np.asarray(run0.samples[f"p{k}"])
        zs.append(abs(x.mean() - variance_pair(box4, 1.0, i, j).variance) / mean_stderr(x))
    part2 = bool(max(zs) < 3 and run0.cache_ok)
    ok = part1 and part2
    criterion(
        8, ok,
        f"E_Q[R] MCMC {mc:.4f} +/- {mc_se:.4f}, SMC-IS {isr.estimate:.4f} +/- {isr.stderr:.4f} (|z| {z:.2f}); "
        f"gamma=0 variances max |z| {max(zs):.2f} over 5 pairs",
    )
    assert ok


# --- 9 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_scaling_probe(criterion):
    cfg = ExperimentConfig().with_overrides({
        "N_grid": "4, 6, 8, 12, 16, 24, 32", "gamma": "0.5", "seed": "2024",
        "sweeps": "2000", "burn_in": "1000", "max_sweeps": "32000", "min_ess": "50", "dilation_prob": "0.002",
    })
    rep = run_scaling_study(cfg)
    fit, ctrl = rep.fits["radius"], rep.fits["control"]
    full_grid = fit.get("N") == list(cfg.N_grid) and ctrl.get("N") == list(cfg.N_grid)
    nu, nu0 = fit.get("exponent", float("nan")), ctrl.get("exponent", float("nan"))
    flory = run_flory_balance(cfg.N_grid, cfg.d, cfg.beta, cfg.gamma).tables["flory"]
    ratios = [row["radius_over_N"] for row in flory]
    flory_ok = all(0.25 <= x <= 4 for x in ratios)
    ok = bool(full_grid and 0.7 <= nu <= 1.3 and nu0 < 0.35 and flory_ok)
    criterion(
        9, ok,
        f"nu = {nu:.3f} +/- {fit.get('stderr', float('nan')):.3f} over N={fit.get('N')}, "
        f"gamma=0 control {nu0:.3f} +/- {ctrl.get('stderr', float('nan')):.3f}; "
        f"Flory R/N in [{min(ratios):.3f}, {max(ratios):.3f}]",
    )
    assert ok


# --- 10 --------------------------------------------------------------------------------


def test_criterion_10_reproducibility(criterion, tmp_path):
    cfg = ExperimentConfig().with_overrides({
        "N_grid": "3, 4, 6", "gamma": "0.5", "seed": "77", "sweeps": "200", "burn_in": "100",
        "min_ess": "0", "gamma_grid": "0.25, 1.0",
    })
    a = run_scaling_study(cfg).write(tmp_path / "a.jsonl").read_text()
    b = run_scaling_study(cfg).write(tmp_path / "b.jsonl").read_text()
    same = "\n".join(payload_lines(a)).encode() == "\n".join(payload_lines(b)).encode()
    ok = same and payload_digest(a) == payload_digest(b) and len(payload_lines(a)) > 10
    criterion(10, ok, f"{len(payload_lines(a))} records, payload sha256 {payload_digest(a)[:16]} on both runs")
    assert ok
