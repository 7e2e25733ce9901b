"""Pair traces, the Gronwall audit, ensemble statistics, squeezing and conjugacy."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_coeffs
from detfunc.ensemble import simulate_ball_ensemble
from detfunc.functionals import FunctionalSet, c_delta_L, completeness_defect
from detfunc.noise import CovarianceSpec, NoisePath
from detfunc.rds import NSEParams, NumericalFailure
from detfunc.spectral import ConfigurationError, SpectralField, SpectralGrid
from detfunc.verifier import (
    check_gronwall,
    conjugacy_transfer,
    convergence_in_probability,
    empirical_condition4,
    ergodic_ledger,
    exceedance_fractions,
    geometric_limit,
    pair_ensemble,
    run_pair,
    run_pairs,
    squeeze_estimate,
    squeeze_recursion,
)


@pytest.fixture(scope="module")
def g4():
    return SpectralGrid(4)


@pytest.fixture(scope="module")
def model(g4):
    """Admissible, mildly forced and noisy model on the 9×9 lattice."""
    p = NSEParams(1.0, 3.0, SpectralField.from_modes(g4, {(1, 0): 0.3, (1, 1): 0.2}))
    cov = CovarianceSpec.power_law(g4, 0.004, 2.5)
    L = FunctionalSet.modes(g4, 4)
    return p, cov, L


@pytest.fixture(scope="module")
def ensemble(model):
    p, cov, L = model
    return pair_ensemble(p, cov, L, list(range(16)), 6.0, 1e-2, ic_seed=3, t_burn=10.0,
                         save_every=10, p_cutoff=4, keep_trajectories=True)


def quiet(g, nu=1.0):
    return NSEParams(nu, 0.0, SpectralField.zeros(g)), CovarianceSpec.zero(g)


class TestRunPair:
    def test_identical_data_give_zero_difference(self, model, rng):
        p, cov, L = model
        x = 0.3 * random_coeffs(p.grid, rng)
        tr = run_pair(x, x, 5, L, p, cov, 2.0, 1e-2)
        assert np.all(tr.w_h == 0) and np.all(tr.eta == 0)
        assert tr.window(0.0) == 0.0 and tr.window(1.0) == 0.0

    def test_pure_dissipation_contracts(self, g4, rng):
        p, cov = quiet(g4, nu=0.5)
        L = FunctionalSet.modes(g4, 2)
        x1 = 1e-3 * random_coeffs(g4, rng)
        x2 = 1e-3 * random_coeffs(g4, rng)
        tr = run_pair(x1, x2, 0, L, p, cov, 3.0, 1e-2)
        # energy estimate of the linearised difference: ‖w(t)‖ <= ‖w(0)‖ e^{-νλ₁t}
        bound = tr.w_h[0] * np.exp(-p.nu * p.lambda1 * tr.times)
        assert np.all(tr.w_h <= bound * (1 + 1e-3))
        rate = -math.log(tr.w_h[-1] / tr.w_h[0]) / tr.times[-1]
        assert rate > p.nu * p.lambda1 * 0.99

    def test_swapping_data_leaves_statistics(self, model, rng):
        p, cov, L = model
        x1 = 0.5 * random_coeffs(p.grid, rng)
        x2 = 0.5 * random_coeffs(p.grid, rng)
        a = run_pair(x1, x2, 9, L, p, cov, 2.0, 1e-2)
        b = run_pair(x2, x1, 9, L, p, cov, 2.0, 1e-2)
        assert np.array_equal(a.w_h, b.w_h)
        assert np.array_equal(a.w_v, b.w_v)
        assert np.array_equal(a.eta, b.eta)
        assert np.array_equal(a.swapped().l, b.l)

    def test_difference_recomputable_from_trajectories(self, model, rng):
        p, cov, L = model
        x1, x2 = (0.4 * random_coeffs(p.grid, rng) for _ in range(2))
        tr = run_pair(x1, x2, 2, L, p, cov, 2.0, 1e-2, save_every=50)
        w = tr.traj1.coeffs - tr.traj2.coeffs
        h = np.sqrt(4 * math.pi**2 * np.sum(np.abs(w) ** 2, axis=(1, 2)))
        assert np.allclose(h, tr.w_h[::50], rtol=1e-12)

    def test_preconditions(self, model, rng):
        p, cov, L = model
        x = random_coeffs(p.grid, rng)
        with pytest.raises(ConfigurationError):
            run_pair(x, x, 0, L, p, cov, 1.0, 1e-2)
        with pytest.raises(ConfigurationError):
            run_pairs(x[None], x[None], [0, 1], L, p, cov, 2.0, 1e-2)
        with pytest.raises(ConfigurationError):
            run_pair(x, x, 0, FunctionalSet.modes(SpectralGrid(5), 1), p, cov, 2.0, 1e-2)

    def test_failure_keeps_partial_traces(self, g4, rng):
        p, cov = quiet(g4)
        L = FunctionalSet.modes(g4, 1)
        x = 1e3 * random_coeffs(g4, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(NumericalFailure) as info:
                run_pair(x, -x, 0, L, p, cov, 50.0, 0.1)
        partial = info.value.partial
        assert len(partial) == 1 and not partial[0].complete

    def test_windowed_integral_is_additive(self, ensemble):
        tr = ensemble[0]
        whole = tr.window(1.0, 2.0)
        parts = tr.window(1.0, 0.5) + tr.window(1.5, 1.0) + tr.window(2.5, 0.5)
        assert whole == pytest.approx(parts, rel=1e-12)
        assert np.all(tr.eta >= 0)
        assert np.all(tr.windowed_eta(np.arange(0.0, 5.0, 0.25)) >= 0)


class TestGronwall:
    def test_zero_difference(self, model, rng):
        p, cov, L = model
        x = random_coeffs(p.grid, rng)
        res = check_gronwall(run_pair(x, x, 1, L, p, cov, 2.0, 1e-2), 0.5, 0.5, 0.1, 1.0)
        assert np.all(res.ok)
        assert np.all(res.lhs == 0) and np.all(res.rhs == 0)

    def test_sampled_pairs_have_no_violations(self, model):
        p, cov, L = model
        eps = completeness_defect(L).eps
        C = c_delta_L(L, eps, 0.1)
        pairs = pair_ensemble(p, cov, L, [40, 41, 42, 43], 4.0, 1e-3, ic_seed=1, t_burn=10.0)
        for tr in pairs:
            res = check_gronwall(tr, eps, p.nu / 2, 0.1, C)
            assert res.n_violations == 0
            assert res.kernel_constant == pytest.approx(p.nu * C)

    def test_doubling_eta_only_loosens(self, ensemble, model):
        p, _, L = model
        eps = completeness_defect(L).eps
        C = c_delta_L(L, eps, 0.1)
        a = check_gronwall(ensemble[1], eps, p.nu / 2, 0.1, C)
        b = check_gronwall(ensemble[1], eps, p.nu / 2, 0.1, C, eta_scale=2.0)
        assert np.all(b.rhs >= a.rhs)
        assert b.n_violations <= a.n_violations

    def test_overstated_dissipation_is_caught(self, ensemble, model):
        p, _, L = model
        # claiming a far finer family with no defect constant must break the bound
        res = check_gronwall(ensemble[2], 0.05, p.nu / 2, 0.1, 0.0)
        assert res.n_violations > 0
        assert res.violation_times[0] > 0


class TestExpectationCondition:
    def test_refuses_small_ensembles(self, model):
        p, cov, _ = model
        ens = simulate_ball_ensemble(p, cov, list(range(8)), 4, 1.0, 1e-2, t_burn=5.0)
        with pytest.raises(ConfigurationError):
            empirical_condition4(ens, 1.0, 0.5, 0.5)
        ens = simulate_ball_ensemble(p, cov, list(range(16)), 2, 1.0, 1e-2, t_burn=5.0)
        with pytest.raises(ConfigurationError):
            empirical_condition4(ens, 1.0, 0.5, 0.5)

    def test_rest_state(self, g4):
        p, cov = quiet(g4)
        ens = simulate_ball_ensemble(p, cov, list(range(16)), 4, 1.0, 1e-2, t_burn=5.0)
        rep = empirical_condition4(ens, 1.0, 0.5, 1e6)
        assert rep.lhs == 0.0 and rep.holds

    def test_verdict_flips_at_predicted_threshold(self, model):
        p, cov, _ = model
        ens = simulate_ball_ensemble(p, cov, list(range(16)), 4, 1.0, 1e-2, t_burn=10.0)
        c = p.nu / 2
        lhs = empirical_condition4(ens, 1.0, c, 1.0).lhs
        eps_star = math.sqrt(c / lhs)
        assert empirical_condition4(ens, 1.0, c, eps_star / 1.4).holds
        assert not empirical_condition4(ens, 1.0, c, eps_star * 1.4).holds
        rep = empirical_condition4(ens, 1.0, c, eps_star / 4)
        assert rep.eq_negative and rep.margin > 0


class TestErgodicLedger:
    def test_partial_sums_and_rest_state(self, g4):
        p, cov = quiet(g4)
        ens = simulate_ball_ensemble(p, cov, [0], 4, 5.0, 1e-2, t_burn=5.0)
        led = ergodic_ledger(ens, 0.5, 0.5, 0.1)
        base = 2 * 0.5 / (1.1 * 0.25)
        assert np.allclose(led.increments, -base)
        assert np.array_equal(led.partial_sums, np.cumsum(led.increments))
        assert led.slope() == pytest.approx(-base, rel=1e-12)

    def test_linear_decrease_over_long_run(self, model):
        p, cov, L = model
        ens = simulate_ball_ensemble(p, cov, [11], 4, 60.0, 1e-2, t_burn=10.0)
        eps = completeness_defect(L).eps
        led = ergodic_ledger(ens, eps, p.nu / 2, 0.1)
        assert led.mean < 0
        assert np.all(led.partial_sums[5:] < 0)
        assert led.slope(10) == pytest.approx(led.mean, rel=0.3)
        assert led.running_means()[-1] == pytest.approx(led.mean, rel=1e-12)


class TestConvergenceInProbability:
    def test_identical_data(self, model, rng):
        p, cov, L = model
        x = random_coeffs(p.grid, rng)
        pairs = run_pairs(np.stack([x, x]), np.stack([x, x]), [0, 1], L, p, cov, 2.0, 1e-2)
        rep = convergence_in_probability(pairs, 1e-3, relative=False)
        assert np.all(rep.fractions == 0) and rep.sync_time == 0.0

    def test_admissible_ensemble_synchronises(self, ensemble):
        rep = convergence_in_probability(ensemble, 1e-2)
        assert rep.sync_time is not None
        assert rep.fractions[-1] <= 0.05
        assert np.all(rep.fractions[rep.times >= rep.sync_time] <= 0.05)
        assert rep.spearman_late < 0 and rep.consistent

    def test_nondecreasing_as_level_shrinks(self, ensemble):
        coarse = exceedance_fractions(ensemble, 1e-2)
        fine = exceedance_fractions(ensemble, 1e-4)
        assert np.all(fine >= coarse)

    def test_rejects_bad_input(self, ensemble, model, rng):
        with pytest.raises(ConfigurationError):
            convergence_in_probability([], 1e-3)
        p, cov, L = model
        x = random_coeffs(p.grid, rng)
        other = run_pair(x, -x, 0, L, p, cov, 3.0, 1e-2)
        with pytest.raises(ConfigurationError):
            convergence_in_probability([ensemble[0], other], 1e-3)


class TestSqueeze:
    def test_identical_data_tie_goes_to_projection(self, model, rng):
        p, cov, L = model
        x = random_coeffs(p.grid, rng)
        tr = run_pair(x, x, 0, L, p, cov, 3.0, 1e-2, p_cutoff=2)
        rep = squeeze_estimate([tr], 2, 1.0, 0.1)
        assert rep.projection_fraction == 1.0 and len(rep.branches) == 3

    def test_linear_decay_exponent(self, g4):
        p, cov = quiet(g4, nu=0.7)
        L = FunctionalSet.modes(g4, 1)
        x1 = SpectralField.from_modes(g4, {(1, 0): 1e-3}).coeffs
        tr = run_pair(x1, np.zeros_like(x1), 0, L, p, cov, 3.0, 1e-2, p_cutoff=0)
        rep = squeeze_estimate([tr], 0, 1.0, 0.1)
        assert np.all(rep.branches == "contraction")
        assert np.allclose(rep.r_samples, -p.nu * p.lambda1, rtol=1e-3)
        assert np.all(np.isfinite(rep.m_samples)) and np.all(rep.m_samples >= 1.0)

    def test_larger_projector_never_lowers_projection_frequency(self, model):
        p, cov, L = model
        fracs = []
        for cut in (1, 2, 4, 8):
            pairs = pair_ensemble(p, cov, L, [0, 1, 2, 3], 4.0, 1e-2, ic_seed=3, t_burn=10.0,
                                  p_cutoff=cut)
            fracs.append(squeeze_estimate(pairs, cut, 1.0, 0.1).projection_fraction)
        assert all(b >= a for a, b in zip(fracs, fracs[1:]))

    def test_threshold_and_combined_condition(self, g4, ensemble):
        p, cov = quiet(g4)
        x1 = SpectralField.from_modes(g4, {(1, 1): 1e-3}).coeffs
        tr = run_pair(x1, np.zeros_like(x1), 0, FunctionalSet.modes(g4, 1), p, cov, 2.0, 1e-2,
                      p_cutoff=1)
        ok = squeeze_estimate([tr], 1, 1.0, 0.2)
        assert ok.threshold_ok
        assert ok.mean_r == pytest.approx(-2.0, rel=1e-3)
        assert ok.combined == pytest.approx(ok.mean_r + math.log(1 / 0.6), rel=1e-14)
        assert ok.combined_ok
        bad = squeeze_estimate(ensemble, 4, 2.5, 0.2)
        assert not bad.threshold_ok and bad.combined == math.inf and not bad.combined_ok

    def test_requires_projected_norms(self, model, rng):
        p, cov, L = model
        x = random_coeffs(p.grid, rng)
        with pytest.raises(ConfigurationError):
            squeeze_estimate([run_pair(x, -x, 0, L, p, cov, 2.0, 1e-2)], 2, 1.0, 0.1)


class TestRecursion:
    def test_geometric_decay(self):
        rec, closed = squeeze_recursion(2.0, np.zeros(10), np.full(10, -0.3))
        assert np.allclose(rec, 2.0 * np.exp(-0.3 * np.arange(11)), rtol=1e-14)
        assert np.allclose(closed, rec, rtol=1e-14)

    def test_geometric_series_limit(self):
        rec, _ = squeeze_recursion(0.0, np.full(400, 0.5), np.full(400, -0.2))
        assert rec[-1] == pytest.approx(0.5 / (1 - math.exp(-0.2)), rel=1e-12)
        assert geometric_limit(0.5, -0.2) == pytest.approx(rec[-1], rel=1e-12)
        with pytest.raises(ConfigurationError):
            geometric_limit(0.5, 0.0)

    def test_misaligned_sequences(self):
        with pytest.raises(ConfigurationError):
            squeeze_recursion(1.0, [1.0, 2.0], [0.1])

    @settings(max_examples=100, deadline=None)
    @given(d0=st.floats(0, 10), data=st.lists(st.tuples(st.floats(0, 5), st.floats(-2, 1)),
                                              min_size=1, max_size=30))
    def test_recursion_matches_closed_form(self, d0, data):
        N, r = zip(*data)
        rec, closed = squeeze_recursion(d0, N, r)
        assert np.allclose(rec, closed, rtol=1e-12, atol=0)


class TestConjugacy:
    def test_identity_is_bit_exact(self, ensemble, model):
        p, cov, L = model
        for tr in ensemble[:4]:
            path = NoisePath(tr.seed, cov, p.ou, 1e-2)
            rep = conjugacy_transfer(tr, path, L)
            assert rep.identical and rep.max_abs_gap == 0.0
            assert rep.eta_identical and rep.statistics_transfer
            assert rep.n_snapshots == 61

    def test_nonlinear_control_breaks_identity(self, ensemble, model):
        p, cov, L = model
        tr = ensemble[0]
        rep = conjugacy_transfer(tr, NoisePath(tr.seed, cov, p.ou, 1e-2), L, transform="nonlinear")
        assert not rep.identical and rep.max_abs_gap > 0
        assert not rep.statistics_transfer

    def test_rejects_foreign_path_or_unknown_transform(self, ensemble, model):
        p, cov, _ = model
        tr = ensemble[0]
        with pytest.raises(ConfigurationError):
            conjugacy_transfer(tr, NoisePath(tr.seed + 1, cov, p.ou, 1e-2))
        with pytest.raises(ConfigurationError):
            conjugacy_transfer(tr, NoisePath(tr.seed, cov, p.ou, 1e-2), transform="affine")


class TestEnsembleDeterminism:
    def test_workers_and_chunks_do_not_change_results(self, model):
        p, cov, L = model
        kw = dict(ic_seed=3, t_burn=10.0)
        a = pair_ensemble(p, cov, L, list(range(6)), 2.0, 1e-2, chunk=6, **kw)
        b = pair_ensemble(p, cov, L, list(range(6)), 2.0, 1e-2, chunk=2, workers=2, **kw)
        for x, y in zip(a, b):
            assert x.seed == y.seed
            assert np.array_equal(x.w_h, y.w_h) and np.array_equal(x.eta, y.eta)
