import json

import numpy as np
import pytest

from selfrepel.lattice import FieldConfig, LatticeBox, dirichlet_energy, laplacian_matrix
from selfrepel.observables import penalty_integral
from selfrepel.sampling import (
    RECENTER_EVERY,
    ChainState,
    GibbsParams,
    MCMCConfig,
    SMCSettings,
    batch_penalties,
    drift_field,
    estimate_partition,
    estimate_tilted_expectation,
    extend_chain,
    log_target,
    make_rng,
    mcmc_step,
    run_chain,
    sample_drifted_field,
    sample_free_field,
)
from selfrepel.spectral import eigendecompose


def three_site_mean_radius(beta, gamma, half_width=6.0, h=0.004):
    """E_Q[diameter] for N=1, d=1, D=1 by a 2-d Riemann sum in the increments (s, t)."""
    g = np.arange(-half_width, half_width + h / 2, h)
    s, t = np.meshgrid(g, g, indexing="ij")
    tri = lambda x: np.clip(1 - np.abs(x), 0, None)
    pen = 3 + 2 * (tri(s) + tri(t) + tri(s + t))
    logp = -beta * (s**2 + t**2) - gamma * pen
    w = np.exp(logp - logp.max())
    diam = np.maximum(np.maximum(np.abs(s), np.abs(t)), np.abs(s + t))
    return float(np.sum(w * diam) / np.sum(w))


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            GibbsParams(0.0, 1.0)
        with pytest.raises(ValueError):
            GibbsParams(1.0, -0.1)
        with pytest.raises(ValueError):
            MCMCConfig(sigma=0)
        with pytest.raises(ValueError):
            MCMCConfig(dilation_prob=1.5)
        with pytest.raises(ValueError):
            MCMCConfig(thin=0)

    def test_rng_streams(self):
        a = make_rng(5, 0).random(4)
        np.testing.assert_array_equal(a, make_rng(5, 0).random(4))
        assert not np.allclose(a, make_rng(5, 1).random(4))
        assert not np.allclose(a, make_rng(5, 0, purpose=1).random(4))


class TestFreeField:
    def test_zero_mean_and_shape(self):
        basis = eigendecompose(LatticeBox(3, 2))
        u = sample_free_field(basis, GibbsParams(1.0), make_rng(0), size=7)
        assert u.shape == (7, 49, 2)
        assert np.abs(u.mean(axis=1)).max() < 1e-12
        f = sample_free_field(basis, GibbsParams(1.0), make_rng(0))
        assert isinstance(f, FieldConfig) and f.D == 2

    def test_coefficient_variance(self):
        box = LatticeBox(2, 2)
        basis = eigendecompose(box)
        beta = 0.7
        u = sample_free_field(basis, GibbsParams(beta), make_rng(1), D=1, size=20000)[:, :, 0]
        coef = u @ basis.vectors[:, basis.nonzero]
        expect = 1 / (2 * beta * basis.eigenvalues[basis.nonzero])
        # sample variance of 20000 normals has relative sd about 1%
        np.testing.assert_allclose(coef.var(axis=0), expect, rtol=0.05)

    def test_covariance_against_pinv(self):
        box = LatticeBox(2, 2)
        basis = eigendecompose(box)
        u = sample_free_field(basis, GibbsParams(1.0), make_rng(2), D=1, size=40000)[:, :, 0]
        oracle = np.linalg.pinv(-laplacian_matrix(box)) / 2
        np.testing.assert_allclose(basis.covariance(1.0), oracle, atol=1e-12)
        emp = u.T @ u / len(u)
        assert np.abs(emp - oracle).max() < 0.03

    def test_beta_scaling_is_exact(self):
        basis = eigendecompose(LatticeBox(3, 2))
        a = sample_free_field(basis, GibbsParams(1.0), make_rng(3), size=3)
        b = sample_free_field(basis, GibbsParams(4.0), make_rng(3), size=3)
        np.testing.assert_allclose(b, a / 2, atol=1e-14)

    def test_drift(self):
        box = LatticeBox(3, 2)
        basis = eigendecompose(box)
        p = GibbsParams(1.0)
        free = sample_free_field(basis, p, make_rng(4), size=5)
        drifted = sample_drifted_field(basis, p, 0.8, make_rng(4), size=5)
        np.testing.assert_allclose(drifted - free, np.broadcast_to(0.8 * box.sites, free.shape), atol=1e-12)
        same = sample_drifted_field(basis, p, 0.0, make_rng(4), size=5)
        np.testing.assert_array_equal(same, free)
        with pytest.raises(ValueError):
            drift_field(box, 1.0, D=3)


class TestChain:
    def make(self, N=3, d=2, gamma=0.5, seed=0, **kw):
        box = LatticeBox(N, d)
        f = sample_free_field(eigendecompose(box), GibbsParams(1.0), make_rng(seed, 0, purpose=1))
        return ChainState.from_field(f, GibbsParams(1.0, gamma), MCMCConfig(seed=seed, **kw))

    def test_log_target_of_collapsed_field(self):
        box = LatticeBox(4, 2)
        s = ChainState.from_field(FieldConfig.zeros(box), GibbsParams(1.0, 0.5), MCMCConfig())
        assert s.energy == 0.0
        assert s.penalty == 81.0**2
        assert log_target(s, s.params) == -0.5 * 81.0**2

    def test_caches_stay_coherent(self):
        s = self.make(N=4, dilation_prob=0.1)
        s.sweep(300)
        e, p = s.energy, s.penalty
        field = s.field
        assert dirichlet_energy(field.values, field.values, s.box) == pytest.approx(e, rel=1e-9)
        assert penalty_integral(field).total == pytest.approx(p, rel=1e-9, abs=1e-9)
        assert s.check_caches()
        assert s.step == 300 * s.n * s.D

    def test_zero_move_is_always_accepted(self):
        s = self.make(sigma=1e-300, dilation_prob=0.0)
        before = s.pos.copy()
        s.advance(2000)
        assert s.acceptance()[0] == 1.0
        np.testing.assert_allclose(s.pos - s.pos.mean(0), before - before.mean(0), atol=1e-12)

    def test_block_size_does_not_matter(self):
        a, b = self.make(seed=9), self.make(seed=9)
        a.advance(10_000)
        for k in (1, 333, 4095, 5571):
            b.advance(k)
        np.testing.assert_array_equal(a.pos, b.pos)
        assert a.energy == b.energy and a.penalty == b.penalty

    def test_checkpoint_round_trip(self):
        # at a recentring boundary the hash table is freshly built, so the resume is bit-identical
        a = self.make(seed=11)
        a.advance(2 * RECENTER_EVERY)
        b = ChainState.from_record(json.loads(json.dumps(a.to_record())))
        assert (b.energy, b.penalty) == (a.energy, a.penalty)
        a.advance(7000)
        b.advance(7000)
        np.testing.assert_array_equal(a.pos, b.pos)
        assert (a.step, a.sigma, a.eta, a.energy) == (b.step, b.sigma, b.eta, b.energy)

    def test_checkpoint_mid_block(self):
        # elsewhere bucket order may differ, which only reorders floating-point sums
        a = self.make(seed=12)
        a.advance(5000)
        b = ChainState.from_record(json.loads(json.dumps(a.to_record())))
        a.advance(7000)
        b.advance(7000)
        np.testing.assert_allclose(a.pos, b.pos, atol=1e-9)

    def test_checkpoint_format_checked(self):
        with pytest.raises(ValueError):
            ChainState.from_record({"format": "other"})

    def test_mcmc_step_guards_params(self):
        s = self.make()
        mcmc_step(s)
        assert s.step == 1
        with pytest.raises(ValueError):
            mcmc_step(s, GibbsParams(2.0, 0.5))

    def test_load_rejects_bad_shape(self):
        s = self.make()
        with pytest.raises(ValueError):
            s.load(np.zeros((3, 2)))

    def test_extend_equals_longer_run(self):
        a, b = self.make(seed=21, sweeps=30, burn_in=5), self.make(seed=21, sweeps=10, burn_in=5)
        long = run_chain(a)
        ext = extend_chain(b, run_chain(b), 20)
        assert ext.samples["radius"] == long.samples["radius"]
        assert ext.step_range == long.step_range
        assert ext.acceptance_local == long.acceptance_local
        with pytest.raises(ValueError):
            extend_chain(b, ext, 1, {"other": lambda s: 0.0})

    @pytest.mark.parametrize("beta,gamma", [(1.0, 2.0), (0.5, 1.0)])
    def test_three_site_quadrature(self, beta, gamma):
        box = LatticeBox(1, 1)
        cfg = MCMCConfig(sweeps=60_000, burn_in=2000, seed=3, dilation_prob=0.05)
        s = ChainState.from_field(FieldConfig.zeros(box), GibbsParams(beta, gamma), cfg)
        run = run_chain(s)
        r = np.asarray(run.samples["radius"])
        se = r.std() / np.sqrt(run.ess("radius"))
        exact = three_site_mean_radius(beta, gamma)
        assert run.cache_ok
        assert abs(r.mean() - exact) < 4 * se, (r.mean(), exact, se)

    def test_free_chain_matches_exact_variance(self):
        # γ = 0: the chain targets the free field, whose variances are known exactly
        box = LatticeBox(2, 1)
        cfg = MCMCConfig(sweeps=40_000, burn_in=1000, seed=5, track_penalty=False)
        s = ChainState.from_field(FieldConfig.zeros(box, D=1), GibbsParams(1.0, 0.0), cfg)
        run = run_chain(s, {"end": lambda st: st.field.values[-1, 0] - st.field.values[0, 0]})
        x = np.asarray(run.samples["end"])
        exact = 4 / 2  # effective resistance across a 4-edge path, times 1/(2β)
        se = np.sqrt(2 / run.ess("end")) * exact
        assert abs(np.mean(x**2) - exact) < 4 * se


class TestImportance:
    basis = eigendecompose(LatticeBox(1, 2))

    def test_gamma_zero(self):
        est = estimate_partition(self.basis, GibbsParams(1.0, 0.0), 100, make_rng(0))
        assert est.log_z == 0.0 and est.stderr == 0.0

    def test_constant_observable(self):
        est = estimate_tilted_expectation(self.basis, GibbsParams(1.0, 0.3), lambda f: 1.0, 500, make_rng(1))
        assert est.estimate == pytest.approx(1.0, abs=1e-12)
        assert est.stderr < 1e-12

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            estimate_partition(self.basis, GibbsParams(1.0, 0.3), 10, make_rng(0))

    def test_log_z_decreases_in_gamma(self):
        vals = [estimate_partition(self.basis, GibbsParams(1.0, g), 4000, make_rng(2)).log_z for g in (0.1, 0.2, 0.4)]
        assert vals[0] > vals[1] > vals[2]
        # ∫ℓ² ≥ n, so log Z ≤ -γ n; and ∫ℓ² ≤ n², so log Z ≥ -γ n²
        assert all(-g * 81 <= v <= -g * 9 for g, v in zip((0.1, 0.2, 0.4), vals))

    def test_batch_penalties_match_reference(self):
        u = sample_free_field(self.basis, GibbsParams(1.0), make_rng(3), size=6)
        ref = [penalty_integral(FieldConfig(self.basis.box, f, tol=1e-8), method="naive").total for f in u]
        np.testing.assert_allclose(batch_penalties(u), ref, rtol=1e-12)

    def test_smc_agrees_with_plain_is(self):
        # a 9-site box is small enough for plain importance sampling to be reliable
        p = GibbsParams(1.0, 0.3)
        plain = estimate_partition(self.basis, p, 20000, make_rng(4))
        smc = estimate_partition(self.basis, p, 100, make_rng(5), smc=SMCSettings(particles=200, runs=6, sweeps=3))
        assert smc.method == "smc"
        assert abs(plain.log_z - smc.log_z) < 4 * np.hypot(plain.stderr, smc.stderr)
        obs = lambda f: float(np.abs(f.values).max())
        a = estimate_tilted_expectation(self.basis, p, obs, 20000, make_rng(6))
        b = estimate_tilted_expectation(self.basis, p, obs, 100, make_rng(7), smc=SMCSettings(particles=200, runs=6, sweeps=3))
        assert a.reliable and b.reliable
        assert abs(a.estimate - b.estimate) < 4 * np.hypot(a.stderr, b.stderr)
