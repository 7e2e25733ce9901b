"""Random PDE integrator, conjugation, direct SPDE scheme and the absorbing radius."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_coeffs
from detfunc.noise import CovarianceSpec, NoisePath
from detfunc.rds import (
    NSEParams,
    NumericalFailure,
    Trajectory,
    conjugate,
    integrate_batch,
    integrate_sns_direct,
    integrate_transformed,
    lipschitz_l,
    radius_path,
    rhs_transformed,
)
from detfunc.spectral import (
    ConfigurationError,
    SpectralField,
    SpectralGrid,
    hs_sq_arr,
    nonlinear_term,
    norms,
    v_sq_arr,
)


@pytest.fixture(scope="module")
def g6():
    return SpectralGrid(6)


def params(grid, nu=1.0, kappa=0.0, modes=None):
    return NSEParams(nu, kappa, SpectralField.from_modes(grid, modes or {}))


def quiet_path(p, dt=1e-3, seed=0):
    return NoisePath(seed, CovarianceSpec.zero(p.grid), p.ou, dt)


class TestRightHandSide:
    def test_single_mode_heat_term(self, g6):
        p = params(g6)
        u = SpectralField.from_modes(g6, {(1, 0): 1.0})
        out = rhs_transformed(u, SpectralField.zeros(g6), p)
        assert np.allclose(out.coeffs, -u.coeffs, atol=1e-15)

    def test_pure_noise_part(self, g6, rng):
        p = params(g6, nu=0.7, kappa=2.0)
        z = SpectralField(g6, random_coeffs(g6, rng))
        out = rhs_transformed(SpectralField.zeros(g6), z, p)
        expected = -nonlinear_term(z, z).coeffs + 2 * 0.7 * 2.0 * g6.eig_power(1.0) * z.coeffs
        assert np.allclose(out.coeffs, expected, atol=1e-13)

    def test_forcing_only(self, g6):
        p = params(g6, modes={(2, 1): 0.4})
        zero = SpectralField.zeros(g6)
        assert np.array_equal(rhs_transformed(zero, zero, p).coeffs, p.forcing.coeffs)

    def test_grid_mismatch(self, g6):
        with pytest.raises(ConfigurationError):
            rhs_transformed(SpectralField.zeros(SpectralGrid(4)), SpectralField.zeros(g6), params(g6))


class TestLipschitzFunction:
    def test_examples(self, g6):
        zero = SpectralField.zeros(g6)
        assert lipschitz_l(zero, zero, 1.0) == 0.0
        u = SpectralField.from_modes(g6, {(1, 0): 1.0})
        assert lipschitz_l(u, zero, 2.0) == pytest.approx(1.0, abs=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(0, 5), b=st.floats(0, 5), da=st.floats(0, 1), db=st.floats(0, 1))
    def test_monotone(self, a, b, da, db):
        g = SpectralGrid(3)
        u = SpectralField.from_modes(g, {(1, 1): 1.0})
        z = SpectralField.from_modes(g, {(2, 0): 1.0})
        assert lipschitz_l(u * (a + da), z * (b + db), 1.3) >= lipschitz_l(u * a, z * b, 1.3)


class TestTransformedIntegrator:
    def test_heat_decay_oracle(self, g6):
        p = params(g6)
        x0 = SpectralField.from_modes(g6, {(1, 0): 1.0})
        traj = integrate_transformed(x0, quiet_path(p), p, 1.0, 1e-3)
        assert norms(traj.final()).h == pytest.approx(math.exp(-1.0), abs=1e-6)

    def test_zero_stays_zero(self, g6):
        p = params(g6)
        traj = integrate_transformed(SpectralField.zeros(g6), quiet_path(p), p, 0.5, 1e-2)
        assert np.all(traj.coeffs == 0)

    def test_cocycle_restart_is_bit_exact(self, g6, rng):
        p = params(g6, kappa=1.0, modes={(1, 0): 0.5})
        path = NoisePath(4, CovarianceSpec.power_law(g6, 0.05, 2.0), p.ou, 1e-3)
        x0 = SpectralField(g6, 0.1 * random_coeffs(g6, rng))
        full = integrate_transformed(x0, path, p, 0.2, 1e-3)
        half = integrate_transformed(x0, path, p, 0.1, 1e-3)
        rest = integrate_transformed(half.final(), path.shift(100), p, 0.1, 1e-3)
        assert np.array_equal(full.final().coeffs, rest.final().coeffs)

    def test_energy_dissipation_law(self, g6, rng):
        p = params(g6, nu=0.5)
        x0 = SpectralField(g6, 0.05 * random_coeffs(g6, rng, band_only=True))
        errs = []
        for dt in (2e-3, 1e-3):
            tr = integrate_transformed(x0, quiet_path(p, dt), p, 0.1, dt, save_every=1)
            h2 = hs_sq_arr(tr.coeffs, 0.0, g6)
            v2 = v_sq_arr(tr.coeffs, g6)
            rate = np.diff(h2) / dt
            target = -2 * p.nu * 0.5 * (v2[1:] + v2[:-1])
            errs.append(np.max(np.abs(rate - target)))
        assert errs[1] < 0.6 * errs[0]
        assert errs[1] < 1e-2 * np.max(np.abs(target))

    def test_snapshot_invariants(self, g6, rng):
        p = params(g6, modes={(1, 1): 0.3})
        path = NoisePath(1, CovarianceSpec.power_law(g6, 0.1, 2.0), p.ou, 1e-2)
        tr = integrate_transformed(SpectralField.zeros(g6), path, p, 0.5, 1e-2, save_every=5)
        assert np.all(np.diff(tr.times) > 0)
        assert len(tr) == 11
        for i in range(len(tr)):
            raw = tr.field_at(i).velocity_hat()
            div = g6.k1 * raw[0] + g6.k2 * raw[1]
            assert np.max(np.abs(div)) < 1e-14
        table = tr.norm_table()
        assert np.array_equal(table["h"], np.sqrt(hs_sq_arr(tr.coeffs, 0.0, g6)))

    def test_unsorted_times_rejected(self, g6):
        with pytest.raises(ConfigurationError):
            Trajectory(g6, np.array([0.0, 0.0]), np.zeros((2, 13, 13), complex), 0.1, "transformed")

    def test_dt_must_divide_horizon(self, g6):
        p = params(g6)
        with pytest.raises(ConfigurationError):
            integrate_transformed(SpectralField.zeros(g6), quiet_path(p), p, 0.0105, 1e-3)

    def test_blow_up_reports_numerical_failure(self, g6, rng):
        p = params(g6)
        x0 = SpectralField(g6, 1e3 * random_coeffs(g6, rng))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(NumericalFailure) as info:
                integrate_transformed(x0, quiet_path(p, 0.1), p, 50.0, 0.1, save_every=1)
        assert info.value.partial is not None
        assert info.value.last_valid_time >= 0.0


class TestDirectSchemeAndConjugation:
    def test_deterministic_limit_agrees(self, g6, rng):
        p = params(g6, modes={(1, 0): 0.4, (2, 1): 0.2})
        x0 = SpectralField(g6, 0.2 * random_coeffs(g6, rng))
        path = quiet_path(p)
        a = integrate_transformed(x0, path, p, 1.0, 1e-3)
        b = integrate_sns_direct(x0, path, p, 1.0, 1e-3)
        assert norms(a.final() - b.final()).h < 1e-8

    def test_zero_data_direct(self, g6):
        p = params(g6)
        tr = integrate_sns_direct(SpectralField.zeros(g6), quiet_path(p), p, 0.2, 1e-2)
        assert np.all(tr.coeffs == 0)

    def test_conjugate_identity_without_noise(self, g6, rng):
        p = params(g6, modes={(1, 0): 0.3})
        path = quiet_path(p, 1e-2)
        tr = integrate_transformed(SpectralField(g6, random_coeffs(g6, rng)), path, p, 0.2, 1e-2)
        v = conjugate(tr, path)
        assert np.array_equal(v.coeffs, tr.coeffs)
        assert np.all(v.lo == 0)

    def test_conjugate_adds_z_exactly(self, g6, rng):
        p = params(g6, kappa=2.0)
        path = NoisePath(8, CovarianceSpec.power_law(g6, 0.3, 2.0), p.ou, 1e-2)
        tr = integrate_transformed(SpectralField(g6, random_coeffs(g6, rng)), path, p, 0.3, 1e-2,
                                   save_every=3)
        v = conjugate(tr, path)
        zs = path.materialize(30)[2][::3]
        assert np.array_equal(v.z, zs)
        for n in range(len(v)):
            for part in (np.real, np.imag):
                hi, lo, u, z = (part(x[n]) for x in (v.coeffs, v.lo, tr.coeffs, zs))
                flat = zip(hi.ravel(), lo.ravel(), u.ravel(), z.ravel())
                assert all(math.fsum([a, b, -c, -d]) == 0.0 for a, b, c, d in flat)

    def test_conjugate_requires_matching_path(self, g6):
        p = params(g6)
        tr = integrate_transformed(SpectralField.zeros(g6), quiet_path(p, 1e-2, seed=1), p, 0.1, 1e-2)
        with pytest.raises(ConfigurationError):
            conjugate(tr, quiet_path(p, 1e-2, seed=2))

    def test_strong_convergence_of_the_gap(self):
        g = SpectralGrid(4)
        p = params(g, kappa=1.0, modes={(1, 0): 0.3})
        cov = CovarianceSpec.power_law(g, 0.5, 2.0)
        base = 1e-4
        gaps = []
        for dt in (4e-3, 2e-3, 1e-3):
            g_sum = 0.0
            for seed in range(4):
                path = NoisePath(seed, cov, p.ou, base)
                x0 = SpectralField.from_modes(g, {(1, 1): 0.5})
                v = conjugate(integrate_transformed(x0, path, p, 1.0, dt), path)
                d = integrate_sns_direct(SpectralField(g, x0.coeffs + path.z0), path, p, 1.0, dt)
                g_sum += norms(v.final() - d.final()).h ** 2
            gaps.append(math.sqrt(g_sum / 4))
        assert gaps[0] / gaps[1] >= 1.3 and gaps[1] / gaps[2] >= 1.3


class TestRadius:
    def test_noise_free_fixed_point(self, g6):
        p = params(g6, modes={(1, 0): 0.3, (1, 1): 0.2})
        path = quiet_path(p)
        rp = radius_path(path, p, eps=0.1)
        target = 1.1 * 4 * p.f_vdual_sq / (p.nu**2 * p.lambda1)
        assert rp.r2[0] == pytest.approx(target, abs=1e-6)

    def test_zero_everything(self, g6):
        p = params(g6)
        assert radius_path(quiet_path(p), p, t_end=0.5, dt=1e-2).r2.max() == 0.0

    def test_pullback_converges(self, g6):
        p = params(g6, kappa=1.0, modes={(1, 0): 0.3})
        path = NoisePath(2, CovarianceSpec.power_law(g6, 0.01, 2.0), p.ou, 1e-3)
        a = radius_path(path, p, t_burn=10.0).r2[0]
        b = radius_path(path, p, t_burn=20.0).r2[0]
        assert abs(a - b) < 0.01 * b

    def test_forward_part_is_continuous(self, g6):
        p = params(g6, kappa=1.0, modes={(1, 0): 0.3})
        path = NoisePath(2, CovarianceSpec.power_law(g6, 0.01, 2.0), p.ou, 1e-3)
        rp = radius_path(path, p, t_end=1.0, dt=1e-3)
        assert len(rp.times) == 1001 and np.all(rp.r2 >= 0)
        assert np.max(np.abs(np.diff(rp.r2))) < 0.05 * rp.r2.max()

    def test_invalid_margin(self, g6):
        p = params(g6)
        with pytest.raises(ConfigurationError):
            radius_path(quiet_path(p), p, eps=0.0)

    def test_absorption_in_probability(self):
        g = SpectralGrid(4)
        p = params(g, kappa=3.0, modes={(1, 0): 0.3, (1, 1): 0.2})
        cov = CovarianceSpec.power_law(g, 0.004, 2.5)
        dt, horizon, n_paths = 5e-3, 8.0, 200
        paths = [NoisePath(s, cov, p.ou, dt) for s in range(n_paths)]
        rads = [radius_path(path, p, t_end=horizon, dt=dt, dt_back=5e-2) for path in paths]
        rng = np.random.default_rng(5)
        x0 = random_coeffs(g, rng, size=n_paths)
        scale = 10 * np.sqrt(np.array([r.r2[0] for r in rads]) / hs_sq_arr(x0, 0.0, g))
        x0 *= scale[:, None, None]
        h2 = []
        integrate_batch(x0, paths, p, horizon, dt,
                        observer=lambda n, t, s, z: h2.append(hs_sq_arr(s, 0.0, g)))
        h2 = np.array(h2).T
        good = 0
        for j in range(n_paths):
            inside = h2[j] <= rads[j].r2
            entry = np.argmax(inside) if inside.any() else None
            good += entry is not None and bool(inside[entry:].all())
        assert good >= 0.95 * n_paths
