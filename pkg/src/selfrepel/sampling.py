"""Exact free-field sampling, a Metropolis chain for the self-repelling
measure, and importance-sampling estimates under it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from selfrepel import _kernels as K
from selfrepel.lattice import FieldConfig, LatticeBox, dirichlet_energy
from selfrepel.observables import effective_radius, penalty_integral
from selfrepel.spectral import SpectralBasis
from selfrepel.stats import integrated_time, normalized_weights, weights_ess

log = logging.getLogger(__name__)

# single-site moves leave the mean free to wander; re-centre this often (in steps)
RECENTER_EVERY = 4096


@dataclass(frozen=True)
class GibbsParams:
    """Inverse temperature ``beta`` and repulsion strength ``gamma``."""

    beta: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class MCMCConfig:
    sigma: float = 0.5
    dilation_prob: float = 0.05
    dilation_width: float = 0.05
    sweeps: int = 1000
    burn_in: int = 200
    thin: int = 1
    seed: int = 0
    adapt: bool = True
    check_every: int = 10_000
    track_penalty: bool = True

    def __post_init__(self):
        if not self.sigma > 0 or not self.dilation_width > 0:
            raise ValueError("proposal widths must be positive")
        if not 0.0 <= self.dilation_prob <= 1.0:
            raise ValueError("dilation_prob must lie in [0, 1]")
        if self.sweeps < 1 or self.thin < 1 or self.burn_in < 0 or self.check_every < 1:
            raise ValueError("sweeps and thin must be positive, burn_in non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def make_rng(seed: int, stream: int = 0, purpose: int = 0) -> np.random.Generator:
    """Counter-based generator for the independent stream (seed, stream[, purpose])."""
    key = [int(seed), int(stream)] + ([int(purpose)] if purpose else [])
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# --- exact free field -----------------------------------------------------------------


def _free_coefficients(basis: SpectralBasis, params: GibbsParams, rng, n_cols: int) -> np.ndarray:
    idx = basis.nonzero
    lam = basis.eigenvalues[idx]
    if np.any(lam <= 0):
        raise ValueError("a zero eigenvalue would enter the free-field expansion")
    scale = 1.0 / np.sqrt(2.0 * params.beta * lam)
    return scale[:, None] * rng.standard_normal((len(idx), n_cols))


def sample_free_field(basis: SpectralBasis, params: GibbsParams, rng, D: int | None = None, size: int | None = None):
    """u^(i) = Σ_{k≠0} X_k^(i) φ_k with X_k^(i) ~ N(0, (2βλ_k)^-1), independent over i and k.

    Returns a FieldConfig, or an array of shape (size, n, D) when ``size`` is given.
    """
    box = basis.box
    D = box.d if D is None else D
    m = 1 if size is None else size
    coef = _free_coefficients(basis, params, rng, m * D)
    u = basis.vectors[:, basis.nonzero] @ coef
    u = u.reshape(box.n_sites, m, D).transpose(1, 0, 2)
    if size is None:
        return FieldConfig.centered(box, u[0])
    return u - u.mean(axis=1, keepdims=True)


def drift_field(box: LatticeBox, a: float, D: int | None = None) -> np.ndarray:
    """The deterministic field x -> a x (component i gets a x_i), centred."""
    D = box.d if D is None else D
    if D != box.d:
        raise ValueError("a linear drift needs D == d")
    x = a * box.sites.astype(float)
    return x - x.mean(axis=0)


def sample_drifted_field(basis: SpectralBasis, params: GibbsParams, a: float, rng, size: int | None = None):
    """Free field plus a x_i in component i, re-centred."""
    u = sample_free_field(basis, params, rng, size=size)
    if a == 0:
        return u
    shift = drift_field(basis.box, a)
    if size is None:
        return FieldConfig.centered(basis.box, u.values + shift)
    u = u + shift
    return u - u.mean(axis=1, keepdims=True)


# --- Markov chain for the tilted measure ----------------------------------------------


@dataclass
class ChainState:
    """Field, cached energy/penalty, value-space hash and RNG of one chain.

    ``pos`` holds un-centred positions; single-site moves shift one value and
    leave the re-centring implicit, which is exact because both terms of the
    target are translation invariant. ``field`` returns the centred view.
    """

    box: LatticeBox
    params: GibbsParams
    cfg: MCMCConfig
    pos: np.ndarray
    rng: np.random.Generator
    chain: int = 0
    step: int = 0
    energy: float = 0.0
    penalty: float = 0.0
    sigma: float = 0.0
    eta: float = 0.0
    stats: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.int64))

    def __post_init__(self):
        self.pos = np.ascontiguousarray(self.pos, dtype=float)
        n, D = self.pos.shape
        if n != self.box.n_sites:
            raise ValueError("position array does not match the box")
        self.sigma = self.sigma or self.cfg.sigma
        self.eta = self.eta or self.cfg.dilation_width
        self._M = K.table_width(n, D)
        self._offsets = K.neighbor_offsets(D)
        T = self._M**D
        self._head = np.empty(T, dtype=np.int64)
        self._nxt = np.empty(n, dtype=np.int64)
        self._prv = np.empty(n, dtype=np.int64)
        self._bkt = np.empty(n, dtype=np.int64)
        self._s_head = np.empty(T, dtype=np.int64)
        self._s_nxt = np.empty(n, dtype=np.int64)
        self._s_prv = np.empty(n, dtype=np.int64)
        self._s_bkt = np.empty(n, dtype=np.int64)
        self._scratch = np.empty_like(self.pos)
        self._nbr_ptr, self._nbr_idx = self.box.neighbor_csr
        self.recompute()

    @classmethod
    def from_field(cls, field: FieldConfig, params: GibbsParams, cfg: MCMCConfig, chain: int = 0) -> "ChainState":
        return cls(field.box, params, cfg, field.values.copy(), make_rng(cfg.seed, chain), chain)

    @property
    def n(self) -> int:
        return self.pos.shape[0]

    @property
    def D(self) -> int:
        return self.pos.shape[1]

    @property
    def tracks_penalty(self) -> bool:
        return self.params.gamma != 0 or self.cfg.track_penalty

    @property
    def field(self) -> FieldConfig:
        return FieldConfig.centered(self.box, self.pos)

    def recompute(self) -> tuple[float, float]:
        """Rebuild energy, penalty and hash table from the positions."""
        self.pos -= self.pos.mean(axis=0)
        self.energy = dirichlet_energy(self.pos, self.pos, self.box)
        self.penalty = K.full_penalty(self.pos, self._M, self._offsets, self._head, self._nxt, self._prv, self._bkt)
        return self.energy, self.penalty

    def load(self, values) -> None:
        """Replace the field (keeping RNG, widths and counters) and rebuild caches."""
        values = np.asarray(values, dtype=float)
        if values.shape != self.pos.shape:
            raise ValueError(f"expected shape {self.pos.shape}, got {values.shape}")
        self.pos[:] = values
        self.recompute()

    def check_caches(self, rtol: float = 1e-6) -> bool:
        """Compare caches to a full recomputation; resync and warn on drift."""
        e = dirichlet_energy(self.pos, self.pos, self.box)
        p = penalty_integral(self.pos).total
        ok = math.isclose(e, self.energy, rel_tol=rtol, abs_tol=1e-12)
        if self.tracks_penalty:
            ok = ok and math.isclose(p, self.penalty, rel_tol=rtol)
        if not ok:
            log.warning(
                "chain %d step %d: cache drift (energy %r vs %r, penalty %r vs %r); recomputing",
                self.chain, self.step, self.energy, e, self.penalty, p,
            )
            self.recompute()
        return ok

    def log_target(self) -> float:
        return log_target(self, self.params)

    def advance(self, n_steps: int) -> None:
        """Run ``n_steps`` Metropolis steps with the current proposal widths."""
        done = 0
        while done < n_steps:
            # stop at absolute multiples of the recentring and check periods
            k = min(
                n_steps - done,
                RECENTER_EVERY - self.step % RECENTER_EVERY,
                self.cfg.check_every - self.step % self.cfg.check_every,
            )
            u = self.rng.random((k, K.U_PER_STEP))
            self.energy, self.penalty = K.run_steps(
                self.pos, self._nbr_ptr, self._nbr_idx, self._head, self._nxt, self._prv, self._bkt,
                self._M, self._offsets, float(self.params.beta), float(self.params.gamma),
                float(self.sigma), float(self.eta), float(self.cfg.dilation_prob),
                float(self.energy), float(self.penalty), self.tracks_penalty, u,
                self._scratch, self._s_head, self._s_nxt, self._s_prv, self._s_bkt, self.stats,
            )
            done += k
            self.step += k
            if self.step % RECENTER_EVERY == 0:
                self._recenter()
            if self.step % self.cfg.check_every == 0:
                self.check_caches()

    def _recenter(self) -> None:
        # the target is translation invariant, so only rounding changes here
        self.pos -= self.pos.mean(axis=0)
        self.energy = dirichlet_energy(self.pos, self.pos, self.box)
        K.build_table(self.pos, self._M, self._head, self._nxt, self._prv, self._bkt)

    def sweep(self, n_sweeps: int = 1) -> None:
        """One sweep is n * D proposals."""
        self.advance(n_sweeps * self.n * self.D)

    def acceptance(self) -> tuple[float, float]:
        s = self.stats
        local = s[1] / s[0] if s[0] else float("nan")
        dil = s[3] / s[2] if s[2] else float("nan")
        return float(local), float(dil)

    def reset_stats(self) -> None:
        self.stats[:] = 0

    # --- checkpoints ---

    def to_record(self) -> dict:
        st = self.rng.bit_generator.state
        return {
            "format": "selfrepel-chain/1",
            "box": self.box.to_dict(),
            "params": asdict(self.params),
            "config": asdict(self.cfg),
            "chain": int(self.chain),
            "step": int(self.step),
            "sigma": float(self.sigma),
            "eta": float(self.eta),
            "stats": [int(s) for s in self.stats],
            "field": self.pos.tolist(),
            "energy": float(self.energy),
            "penalty": float(self.penalty),
            "rng": _jsonable(st),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ChainState":
        if rec.get("format") != "selfrepel-chain/1":
            raise ValueError(f"not a chain checkpoint: format={rec.get('format')!r}")
        box = LatticeBox(**rec["box"])
        params = GibbsParams(**rec["params"])
        cfg = MCMCConfig(**rec["config"])
        bitgen = np.random.Philox()
        bitgen.state = _from_jsonable(rec["rng"])
        state = cls(
            box, params, cfg, np.asarray(rec["field"], dtype=float), np.random.Generator(bitgen),
            chain=rec["chain"], step=rec["step"], sigma=rec["sigma"], eta=rec["eta"],
            stats=np.asarray(rec["stats"], dtype=np.int64),
        )
        # restore the raw positions and caches rather than re-centred recomputations
        state.pos[:] = np.asarray(rec["field"], dtype=float)
        state.energy, state.penalty = float(rec["energy"]), float(rec["penalty"])
        K.build_table(state.pos, state._M, state._head, state._nxt, state._prv, state._bkt)
        return state


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": [int(x) for x in obj.ravel()], "dtype": str(obj.dtype), "shape": list(obj.shape)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.asarray(obj["__array__"], dtype=obj["dtype"]).reshape(obj["shape"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def log_target(state: ChainState, params: GibbsParams) -> float:
    """-β H(u) - γ ∫ℓ², the unnormalised log density on zero-mean fields."""
    return -params.beta * state.energy - params.gamma * state.penalty


def mcmc_step(state: ChainState, params: GibbsParams | None = None, cfg: MCMCConfig | None = None) -> ChainState:
    """One Metropolis step (single-site Gaussian move or global dilation), in place."""
    if params is not None and params != state.params:
        raise ValueError("state was built for different Gibbs parameters")
    if cfg is not None and cfg is not state.cfg:
        state.cfg = cfg
    state.advance(1)
    return state


@dataclass
class ChainRun:
    """Measurements from one chain after burn-in."""

    chain: int
    seed: int
    samples: dict
    acceptance_local: float
    acceptance_dilation: float
    sigma: float
    eta: float
    step_range: tuple
    cache_ok: bool

    def ess(self, name: str) -> float:
        x = np.asarray(self.samples[name])
        return float(len(x) / integrated_time(x))


def adapt_widths(state: ChainState, sweeps: int, block: int = 10, target: float = 0.35) -> None:
    """Tune σ (and the dilation width) toward ``target`` acceptance during burn-in."""
    done = 0
    while done < sweeps:
        k = min(block, sweeps - done)
        state.reset_stats()
        state.sweep(k)
        done += k
        local, dil = state.acceptance()
        if not math.isnan(local):
            state.sigma *= math.exp(1.0 * (local - target))
        if state.stats[2] >= 5 and not math.isnan(dil):
            state.eta = min(state.eta * math.exp(1.0 * (dil - target)), 1.0)


def _default_observables() -> dict[str, Callable]:
    return {"radius": lambda s: effective_radius(s.pos, method="hull")}


def _record(state: ChainState, observables: dict[str, Callable], out: dict, sweeps: int) -> None:
    for s in range(sweeps):
        state.sweep(1)
        if (s + 1) % state.cfg.thin == 0:
            for name, f in observables.items():
                out[name].append(float(f(state)))
            out["energy"].append(float(state.energy))
            out["penalty"].append(float(state.penalty))


def run_chain(state: ChainState, observables: dict[str, Callable] | None = None) -> ChainRun:
    """Burn in (adapting widths if configured), then record observables every ``thin`` sweeps."""
    cfg = state.cfg
    observables = observables or _default_observables()
    if cfg.adapt:
        adapt_widths(state, cfg.burn_in)
    else:
        state.sweep(cfg.burn_in)
    state.reset_stats()
    start = state.step
    out = {name: [] for name in observables}
    out["energy"] = []
    out["penalty"] = []
    _record(state, observables, out, cfg.sweeps)
    ok = state.check_caches()
    local, dil = state.acceptance()
    return ChainRun(state.chain, cfg.seed, out, local, dil, state.sigma, state.eta, (start, state.step), ok)


def extend_chain(state: ChainState, run: ChainRun, sweeps: int, observables: dict[str, Callable] | None = None) -> ChainRun:
    """Continue a measured chain for ``sweeps`` more sweeps with frozen widths.

    ``observables`` must be the set used for ``run``. Acceptance rates are
    cumulative over the whole measurement phase.
    """
    observables = observables or _default_observables()
    if set(observables) | {"energy", "penalty"} != set(run.samples):
        raise ValueError("observables differ from those of the run being extended")
    out = {k: list(v) for k, v in run.samples.items()}
    _record(state, observables, out, sweeps)
    ok = run.cache_ok and state.check_caches()
    local, dil = state.acceptance()
    return ChainRun(run.chain, run.seed, out, local, dil, state.sigma, state.eta, (run.step_range[0], state.step), ok)


# --- importance sampling from the free field ------------------------------------------


@dataclass(frozen=True)
class SMCSettings:
    """Adaptive-tempering SMC: each rung lowers the population ESS to
    ``ess_fraction`` of the particle count, then particles are resampled and
    moved by ``sweeps`` Metropolis sweeps at the new γ.
    ``runs`` independent populations supply the error bar."""

    particles: int = 200
    runs: int = 8
    sweeps: int = 5
    ess_fraction: float = 0.5
    sigma: float = 1.0
    dilation_prob: float = 0.1
    dilation_width: float = 0.2
    max_stages: int = 10_000


@dataclass(frozen=True)
class PartitionEstimate:
    log_z: float
    stderr: float
    ess: float
    samples: int
    method: str = "is"
    diagnostic: str = ""


@dataclass(frozen=True)
class TiltedEstimate:
    estimate: float
    stderr: float
    ess: float
    reliable: bool
    samples: int
    method: str = "is"


@dataclass(frozen=True)
class SMCRun:
    log_z: float
    estimate: float
    ladder: np.ndarray
    ess_fractions: np.ndarray
    acceptance: float


def batch_penalties(fields: np.ndarray) -> np.ndarray:
    """∫ℓ² for each field in a (m, n, D) stack, via the compiled hash kernel."""
    m, n, D = fields.shape
    M = K.table_width(n, D)
    offsets = K.neighbor_offsets(D)
    head = np.empty(M**D, dtype=np.int64)
    nxt, prv, bkt = (np.empty(n, dtype=np.int64) for _ in range(3))
    out = np.empty(m)
    for r in range(m):
        out[r] = K.full_penalty(np.ascontiguousarray(fields[r]), M, offsets, head, nxt, prv, bkt)
    return out


def importance_draws(basis: SpectralBasis, params: GibbsParams, samples: int, rng, observable=None, batch: int = 256):
    """Exact P_N draws with log-weights -γ ∫ℓ², and optional observable values."""
    box = basis.box
    lw = np.zeros(samples)
    obs = np.empty(samples) if observable is not None else None
    for lo in range(0, samples, batch):
        u = sample_free_field(basis, params, rng, size=min(batch, samples - lo))
        sl = slice(lo, lo + len(u))
        if params.gamma:
            lw[sl] = -params.gamma * batch_penalties(u)
        if observable is not None:
            obs[sl] = [observable(FieldConfig(box, f, tol=1e-8)) for f in u]
    return lw, obs


def _next_gamma(pen: np.ndarray, g0: float, g1: float, target: float) -> float:
    def ess_frac(g):
        return weights_ess(-(g - g0) * pen) / len(pen)

    if ess_frac(g1) >= target:
        return g1
    lo, hi = g0, g1
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ess_frac(mid) >= target else (lo, mid)
    return max(lo, g0 + 1e-12 * max(1.0, g1))


def smc_run(basis: SpectralBasis, params: GibbsParams, rng, settings: SMCSettings = SMCSettings(), observable=None) -> SMCRun:
    """One adaptive-tempering SMC population from P_N (γ = 0) to Q_N.

    Particles start as exact free-field draws. Each rung multiplies weights by
    exp(-Δγ ∫ℓ²), accumulates log of the mean incremental weight into log Z,
    resamples systematically and moves every particle with the Metropolis
    kernel of the Q at the new γ (Del Moral, Doucet and Jasra, 2006).
    """
    box = basis.box
    m = settings.particles
    u = sample_free_field(basis, params, rng, size=m)
    pen = batch_penalties(u)
    cfg = MCMCConfig(
        sigma=settings.sigma, dilation_prob=settings.dilation_prob, dilation_width=settings.dilation_width,
        sweeps=1, burn_in=0, adapt=False, check_every=10**9,
    )
    state = ChainState(box, params, cfg, u[0], make_rng(int(rng.integers(2**63)), 0))
    ladder, fracs = [0.0], []
    log_z = 0.0
    g = 0.0
    while g < params.gamma:
        if len(ladder) > settings.max_stages:
            raise RuntimeError("SMC ladder did not reach the target gamma")
        g_new = _next_gamma(pen, g, params.gamma, settings.ess_fraction)
        lw = -(g_new - g) * pen
        log_z += float(logsumexp(lw) - np.log(m))
        fracs.append(weights_ess(lw) / m)
        w = normalized_weights(lw)
        idx = np.searchsorted(np.cumsum(w), (rng.random() + np.arange(m)) / m)
        idx = np.minimum(idx, m - 1)
        u, pen = u[idx], pen[idx]
        state.params = GibbsParams(params.beta, float(g_new))
        for r in range(m):
            state.load(u[r])
            state.sweep(settings.sweeps)
            u[r] = state.pos
            pen[r] = state.penalty
        g = g_new
        ladder.append(g)
    if observable is not None:
        vals = np.array([observable(FieldConfig.centered(box, f)) for f in u])
        est = float(vals.mean())
    else:
        est = float("nan")
    acc = state.acceptance()[0]
    return SMCRun(log_z, est, np.asarray(ladder), np.asarray(fracs), acc)


def _smc_runs(basis, params, rng, settings, observable=None) -> list[SMCRun]:
    return [smc_run(basis, params, rng, settings, observable) for _ in range(settings.runs)]


def estimate_partition(
    basis: SpectralBasis, params: GibbsParams, samples: int, rng, *, smc: SMCSettings | None = None,
) -> PartitionEstimate:
    """log Z_N = log E_P[exp(-γ ∫ℓ²)].

    Plain importance sampling from P_N by default: log of the mean weight with a
    delta-method error bar. With ``smc`` settings, ``smc.runs`` independent SMC
    populations are averaged on the Z scale and the error bar comes from their
    spread; ``samples`` is then ignored in favour of runs x particles.
    """
    if samples < 100:
        raise ValueError("estimate_partition needs at least 100 samples")
    if params.gamma == 0:
        return PartitionEstimate(0.0, 0.0, float(samples), samples)
    if smc is not None:
        runs = _smc_runs(basis, params, rng, smc)
        lz = np.array([r.log_z for r in runs])
        log_z = float(logsumexp(lz) - np.log(len(lz)))
        se = float(lz.std(ddof=1) / np.sqrt(len(lz))) if len(lz) > 1 else float("nan")
        ess = float(sum(r.ess_fractions.min() for r in runs) * smc.particles)
        return PartitionEstimate(log_z, se, ess, smc.runs * smc.particles, "smc")
    lw, _ = importance_draws(basis, params, samples, rng)
    if not np.any(np.isfinite(lw)):
        return PartitionEstimate(-np.inf, np.nan, 0.0, samples, "is", "all weights underflow")
    log_z = float(logsumexp(lw) - np.log(samples))
    w = np.exp(lw - lw.max())
    se = float(w.std(ddof=1) / (np.sqrt(samples) * w.mean()))
    return PartitionEstimate(log_z, se, weights_ess(lw), samples)


def estimate_tilted_expectation(
    basis: SpectralBasis, params: GibbsParams, observable: Callable[[FieldConfig], float],
    samples: int, rng, *, smc: SMCSettings | None = None, min_ess: float = 10.0,
) -> TiltedEstimate:
    """Self-normalised importance-sampling estimate of E_Q[observable].

    Default: weights exp(-γ ∫ℓ²) on exact P_N draws, delta-method error
    (Σ w̃² (O - Ô)²)^(1/2) and Kish effective sample size. With ``smc``
    settings: mean over independent SMC populations, error from their spread.
    """
    if samples < 100:
        raise ValueError("estimate_tilted_expectation needs at least 100 samples")
    if smc is not None and params.gamma > 0:
        runs = _smc_runs(basis, params, rng, smc, observable)
        est = np.array([r.estimate for r in runs])
        se = float(est.std(ddof=1) / np.sqrt(len(est))) if len(est) > 1 else float("nan")
        ess = float(sum(r.ess_fractions.min() for r in runs) * smc.particles)
        return TiltedEstimate(float(est.mean()), se, ess, ess >= min_ess and len(est) > 1, smc.runs * smc.particles, "smc")
    lw, obs = importance_draws(basis, params, samples, rng, observable)
    w = normalized_weights(lw)
    est = float(np.sum(w * obs))
    se = float(np.sqrt(np.sum(w**2 * (obs - est) ** 2)))
    ess = float(1.0 / np.sum(w**2))
    return TiltedEstimate(est, se, ess, ess >= min_ess, samples)
