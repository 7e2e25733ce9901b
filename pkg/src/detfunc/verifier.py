"""
Pathwise and Monte Carlo checks of the determining property.

Pairs of trajectories are driven by one shared noise realisation.  Along a
pair the difference w = u₁ - u₂ is monitored together with

* η_L(t) = max_j |l_j(w(t))|²,
* l(t) = (2/ν)(‖u₁(t)‖²_V + ‖z(θ_t ω)‖²_V),
* q(t) = 2 l(t) - 2c(1+δ)⁻¹ ε_L⁻².

:func:`check_gronwall` audits the integrated inequality

    ‖w(t)‖²_H <= ‖w(0)‖²_H e^{∫₀ᵗ q} + 2c·C_{δ,L} ∫₀ᵗ e^{∫ₛᵗ q} η_L(s) ds

on the integrator grid (trapezoid quadrature).  The factor 2c multiplies the
constant of the defect inequality ‖w‖²_V >= (1+δ)⁻¹ε_L⁻²‖w‖²_H - C_{δ,L}η_L
when the latter is inserted into d‖w‖²/dt + 2c‖w‖²_V <= 2l‖w‖²_H.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .ensemble import EnsembleSeries, ball_initial_data, window_integral
from .functionals import FunctionalSet
from .noise import CovarianceSpec, NoisePath
from .rds import NSEParams, NumericalFailure, Trajectory, conjugate, integrate_batch
from .spectral import ConfigurationError, coeffs_to_coords, hs_sq_arr, v_sq_arr


# ---------------------------------------------------------------------------
# pair traces
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PairTrace:
    """Diagnostics of two trajectories sharing the noise path ``seed``."""

    seed: int
    times: np.ndarray
    w_h: np.ndarray
    w_v: np.ndarray
    eta: np.ndarray
    l: np.ndarray
    u1_v_sq: np.ndarray
    u2_v_sq: np.ndarray
    z_v_sq: np.ndarray
    nu: float
    w_p_sq: np.ndarray | None = None
    traj1: Trajectory | None = None
    traj2: Trajectory | None = None
    complete: bool = True

    def q(self, eps_L: float, c: float, delta: float) -> np.ndarray:
        return 2.0 * self.l - 2.0 * c / ((1.0 + delta) * eps_L**2)

    def window(self, t0: float, length: float = 1.0) -> float:
        """∫_{t0}^{t0+length} η_L dτ (trapezoid on the integrator grid)."""
        return float(window_integral(self.eta, self.times, t0, t0 + length))

    def windowed_eta(self, starts: np.ndarray, length: float = 1.0) -> np.ndarray:
        return np.array([self.window(t, length) for t in starts])

    def swapped(self) -> "PairTrace":
        """The same pair with (x₁, x₂) exchanged."""
        l_swapped = (2.0 / self.nu) * (self.u2_v_sq + self.z_v_sq)
        return PairTrace(self.seed, self.times, self.w_h, self.w_v, self.eta, l_swapped,
                         self.u2_v_sq, self.u1_v_sq, self.z_v_sq, self.nu, self.w_p_sq,
                         self.traj2, self.traj1, self.complete)


def run_pairs(x1: np.ndarray, x2: np.ndarray, seeds: list[int], L: FunctionalSet,
              p: NSEParams, cov: CovarianceSpec, horizon: float, dt: float,
              save_every: int | None = None, p_cutoff: float | None = None,
              keep_trajectories: bool = True) -> list[PairTrace]:
    """Integrate P pairs in one batch; pair j uses noise path ``seeds[j]``.

    ``x1`` and ``x2`` hold coefficient arrays of shape (P, N, N).  When
    ``p_cutoff`` is given, ‖P w‖²_H for the spectral projector onto
    |k|² <= p_cutoff is recorded as well.
    """
    g = p.grid
    x1 = np.asarray(x1, complex).reshape((-1, g.size, g.size))
    x2 = np.asarray(x2, complex).reshape((-1, g.size, g.size))
    n_pairs = len(seeds)
    if x1.shape[0] != n_pairs or x2.shape[0] != n_pairs:
        raise ConfigurationError("one seed per pair is required")
    if L.grid != g:
        raise ConfigurationError("grid mismatch between functionals and model")
    if horizon < 2:
        raise ConfigurationError("pair horizon must be at least 2")
    paths = [NoisePath(int(s), cov, p.ou, dt) for s in seeds]
    proj = None if p_cutoff is None else (g.ksq <= p_cutoff) & g.nonzero
    rec = {k: [] for k in ("t", "wh", "wv", "eta", "v1", "v2", "zv", "wp")}

    def observe(n, t, state, z):
        u1, u2 = state[:n_pairs], state[n_pairs:]
        w = u1 - u2
        rec["t"].append(t)
        rec["wh"].append(hs_sq_arr(w, 0.0, g))
        rec["wv"].append(v_sq_arr(w, g))
        lw = coeffs_to_coords(w, g) @ L.matrix.T
        rec["eta"].append(np.max(lw**2, axis=1) if L.matrix.shape[0] else np.zeros(n_pairs))
        rec["v1"].append(v_sq_arr(u1, g))
        rec["v2"].append(v_sq_arr(u2, g))
        rec["zv"].append(v_sq_arr(z[:n_pairs], g))
        if proj is not None:
            rec["wp"].append(hs_sq_arr(w * proj, 0.0, g))

    def build(complete: bool, trajs=None) -> list[PairTrace]:
        t = np.array(rec["t"])
        arr = {k: np.array(v).T for k, v in rec.items() if k != "t" and v}
        out = []
        for j in range(n_pairs):
            zv = arr["zv"][j]
            v1 = arr["v1"][j]
            out.append(PairTrace(
                int(seeds[j]), t, np.sqrt(arr["wh"][j]), np.sqrt(arr["wv"][j]), arr["eta"][j],
                (2.0 / p.nu) * (v1 + zv), v1, arr["v2"][j], zv, p.nu,
                arr["wp"][j] if "wp" in arr else None,
                trajs[j] if trajs else None, trajs[n_pairs + j] if trajs else None, complete,
            ))
        return out

    try:
        trajs = integrate_batch(np.concatenate([x1, x2]), paths + paths, p, horizon, dt,
                                save_every=save_every, observer=observe)
    except NumericalFailure as exc:
        exc.partial = build(False)
        raise
    return build(True, trajs if keep_trajectories else None)


def run_pair(x1, x2, seed: int, L: FunctionalSet, p: NSEParams, cov: CovarianceSpec,
             horizon: float, dt: float, save_every: int | None = None,
             p_cutoff: float | None = None) -> PairTrace:
    """Single same-noise pair; see :func:`run_pairs`."""
    c1 = getattr(x1, "coeffs", x1)
    c2 = getattr(x2, "coeffs", x2)
    return run_pairs(np.asarray(c1)[None], np.asarray(c2)[None], [seed], L, p, cov, horizon, dt,
                     save_every, p_cutoff)[0]


def _pairs_task(args):
    x1, x2, seeds, L, p, cov, horizon, dt, save_every, p_cutoff, keep = args
    return run_pairs(x1, x2, seeds, L, p, cov, horizon, dt, save_every, p_cutoff, keep)


def pair_ensemble(p: NSEParams, cov: CovarianceSpec, L: FunctionalSet, seeds: list[int],
                  horizon: float, dt: float, ic_seed: int = 0, eps: float = 0.1,
                  t_burn: float | None = None, save_every: int | None = None,
                  p_cutoff: float | None = None, workers: int = 1, chunk: int = 32,
                  keep_trajectories: bool = False) -> list[PairTrace]:
    """Same-noise pairs started at two random points of the absorbing sphere.

    Pairs are processed in chunks of ``chunk`` seeds, optionally on
    ``workers`` processes; results are returned in seed order and do not
    depend on the number of workers.
    """
    paths = [NoisePath(int(s), cov, p.ou, dt) for s in seeds]
    x0, _ = ball_initial_data(paths, p, 2, ic_seed, eps, t_burn)
    tasks = []
    for i in range(0, len(seeds), chunk):
        sl = slice(i, i + chunk)
        tasks.append((x0[sl, 0], x0[sl, 1], list(seeds[sl]), L, p, cov, horizon, dt,
                      save_every, p_cutoff, keep_trajectories))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_pairs_task, tasks))
    else:
        results = [_pairs_task(t) for t in tasks]
    return [tr for chunk_res in results for tr in chunk_res]


# ---------------------------------------------------------------------------
# Gronwall audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GronwallResult:
    ok: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    margin: np.ndarray
    violation_times: np.ndarray
    kernel_constant: float

    @property
    def n_violations(self) -> int:
        return int(np.count_nonzero(~self.ok))


def check_gronwall(trace: PairTrace, eps_L: float, c: float, delta: float, C_deltaL: float,
                   eta_scale: float = 1.0, rel_tol: float = 1e-12) -> GronwallResult:
    """Both sides of the integrated Gronwall inequality at every grid time.

    ``rel_tol`` only absorbs floating-point rounding where the two sides are
    equal in exact arithmetic (t = 0, or w ≡ 0).
    """
    t = trace.times
    q = trace.q(eps_L, c, delta)
    eta = eta_scale * trace.eta
    h = np.diff(t)
    dq = 0.5 * h * (q[1:] + q[:-1])
    qcum = np.concatenate([[0.0], np.cumsum(dq)])
    growth = np.exp(dq)
    integral = np.zeros_like(t)
    for n in range(1, len(t)):
        integral[n] = growth[n - 1] * integral[n - 1] + 0.5 * h[n - 1] * (growth[n - 1] * eta[n - 1] + eta[n])
    kernel = 2.0 * c * C_deltaL
    lhs = trace.w_h**2
    rhs = lhs[0] * np.exp(qcum) + kernel * integral
    ok = lhs <= rhs * (1.0 + rel_tol) + 1e-300
    return GronwallResult(ok, lhs, rhs, rhs - lhs, t[~ok], kernel)


# ---------------------------------------------------------------------------
# ergodic sums and the expectation condition
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ErgodicLedger:
    increments: np.ndarray
    partial_sums: np.ndarray
    mean: float
    delta: float

    def slope(self, start: int = 0) -> float:
        """Least-squares slope of the partial sums from index ``start`` on."""
        n = np.arange(start, len(self.partial_sums))
        return float(np.polyfit(n, self.partial_sums[start:], 1)[0])

    def running_means(self) -> np.ndarray:
        return self.partial_sums / np.arange(1, len(self.partial_sums) + 1)


def ergodic_ledger(ens: EnsembleSeries, eps_L: float, c: float, delta: float,
                   path_index: int = 0) -> ErgodicLedger:
    """Q(θ_j ω) = max over sampled data of ∫_j^{j+1} 2l - 2c(1+δ)⁻¹ε_L⁻², j = 0, 1, ..."""
    lvals = ens.lipschitz()[path_index]
    n_units = int(math.floor(ens.times[-1] + 1e-9))
    base = 2.0 * c / ((1.0 + delta) * eps_L**2)
    inc = np.array([
        float(np.max(window_integral(2.0 * lvals, ens.times, j, j + 1))) - base
        for j in range(n_units)
    ])
    return ErgodicLedger(inc, np.cumsum(inc), float(inc.mean()), delta)


@dataclass(frozen=True, eq=False)
class Condition4Report:
    lhs: float
    rhs: float
    margin: float
    holds: bool
    per_path: np.ndarray
    eq_estimate: float
    eq_negative: bool
    delta: float


def empirical_condition4(ens: EnsembleSeries, m_window: float, c: float, eps_L: float,
                         delta: float = 0.1) -> Condition4Report:
    """(1/m) E sup ∫₀^m l dt against c ε_L⁻², with the implied sign of E Q."""
    if ens.n_paths < 16:
        raise ConfigurationError("the expectation condition needs at least 16 noise paths")
    if ens.n_ic < 4:
        raise ConfigurationError("the expectation condition needs at least 4 initial data per path")
    lv = ens.lipschitz()
    per_path = (window_integral(lv, ens.times, 0.0, m_window) / m_window).max(axis=1)
    lhs = float(per_path.mean())
    rhs = c / eps_L**2
    unit = window_integral(2.0 * lv, ens.times, 0.0, 1.0).max(axis=1)
    eq = float(unit.mean() - 2.0 * c / ((1.0 + delta) * eps_L**2))
    return Condition4Report(lhs, rhs, rhs - lhs, lhs < rhs, per_path, eq, eq < 0, delta)


# ---------------------------------------------------------------------------
# convergence in probability
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    times: np.ndarray
    fractions: np.ndarray
    delta_level: float
    relative: bool
    sync_time: float | None
    level: float
    window_starts: np.ndarray
    mean_window_eta: np.ndarray
    spearman_late: float
    consistent: bool


def exceedance_fractions(pairs: list[PairTrace], delta_level: float,
                         relative: bool = True) -> np.ndarray:
    """Fraction of pairs with ‖w(t)‖_H > delta_level (times ‖w(0)‖_H if relative)."""
    w = np.array([tr.w_h for tr in pairs])
    thr = delta_level * (w[:, :1] if relative else 1.0)
    return np.mean(w > thr, axis=0)


def convergence_in_probability(pairs: list[PairTrace], delta_level: float, relative: bool = True,
                               level: float = 0.05, window_step: float = 0.25) -> ConvergenceReport:
    """Exceedance fractions, synchronisation time and the trend of windowed η_L.

    The synchronisation time is the first grid time from which the fraction
    stays <= ``level`` up to the horizon.  The η_L trend is the Spearman
    correlation between window start and ensemble-mean ∫_t^{t+1} η_L over the
    second half of the horizon.
    """
    if not pairs:
        raise ConfigurationError("empty ensemble")
    t = pairs[0].times
    for tr in pairs:
        if tr.times.shape != t.shape or not np.array_equal(tr.times, t):
            raise ConfigurationError("pair traces are not on a common time grid")
    frac = exceedance_fractions(pairs, delta_level, relative)
    above = np.nonzero(frac > level)[0]
    if len(above) == 0:
        sync = float(t[0])
    elif above[-1] == len(t) - 1:
        sync = None
    else:
        sync = float(t[above[-1] + 1])
    horizon = float(t[-1])
    starts = np.arange(0.0, horizon - 1.0 + 1e-9, window_step)
    mean_eta = np.mean([tr.windowed_eta(starts) for tr in pairs], axis=0)
    late = starts >= horizon / 2.0 - 1e-9
    if late.sum() >= 3 and np.ptp(mean_eta[late]) > 0:
        rho = float(scipy.stats.spearmanr(starts[late], mean_eta[late])[0])
    else:
        rho = 0.0 if np.ptp(mean_eta[late]) == 0 else float("nan")
    consistent = sync is not None and (rho < 0 or np.all(mean_eta[late] == 0))
    return ConvergenceReport(t, frac, delta_level, relative, sync, level, starts, mean_eta,
                             rho, bool(consistent))


# ---------------------------------------------------------------------------
# squeezing
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SqueezeReport:
    p_cutoff: float
    branches: np.ndarray
    r_samples: np.ndarray
    mean_r: float
    m_samples: np.ndarray
    n_values: np.ndarray
    a0: float
    eps_HW: float
    threshold_ok: bool
    combined: float
    combined_ok: bool

    @property
    def projection_fraction(self) -> float:
        return float(np.mean(self.branches == "projection")) if self.branches.size else 0.0


def squeeze_estimate(pairs: list[PairTrace], p_cutoff: float, a0: float, eps_HW: float) -> SqueezeReport:
    """Classify each unit-time step of each pair into one squeezing branch.

    Projection branch: ‖(I-P)w(j+1)‖ <= ‖P w(j+1)‖ (ties land here).
    Otherwise the contraction branch, with r-sample log(‖w(j+1)‖/‖w(j)‖).
    M-samples are sup over [j, j+1] of ‖w(t)‖/‖w(j)‖, N-values 2‖P w(j+1)‖.
    Pairs need ‖Pw‖² recorded (``run_pairs(..., p_cutoff=...)``).
    """
    branches, rs, ms, ns = [], [], [], []
    for tr in pairs:
        if tr.w_p_sq is None:
            raise ConfigurationError("pair trace lacks projected norms; rerun with p_cutoff")
        t = tr.times
        n_units = int(math.floor(t[-1] + 1e-9))
        for j in range(n_units):
            i0 = int(np.argmin(np.abs(t - j)))
            i1 = int(np.argmin(np.abs(t - (j + 1))))
            w0 = tr.w_h[i0]
            w1 = tr.w_h[i1]
            pw = math.sqrt(max(tr.w_p_sq[i1], 0.0))
            qw = math.sqrt(max(w1**2 - tr.w_p_sq[i1], 0.0))
            ns.append(2.0 * pw)
            if w0 > 0:
                ms.append(float(np.max(tr.w_h[i0:i1 + 1]) / w0))
            if qw <= pw:
                branches.append("projection")
            else:
                branches.append("contraction")
                if w0 > 0 and w1 > 0:
                    rs.append(math.log(w1 / w0))
    rs = np.array(rs)
    mean_r = float(rs.mean()) if rs.size else float("nan")
    thr = 2.0 * a0 * eps_HW
    ok = thr < 1.0
    combined = mean_r + math.log(1.0 / (1.0 - thr)) if ok and rs.size else float("inf")
    return SqueezeReport(p_cutoff, np.array(branches), rs, mean_r, np.array(ms), np.array(ns),
                         a0, eps_HW, ok, combined, bool(combined < 0))


# ---------------------------------------------------------------------------
# squeezing recursion
# ---------------------------------------------------------------------------


def squeeze_recursion(d0: float, N_seq, r_integrals) -> tuple[np.ndarray, np.ndarray]:
    """Bound sequence d_m from the recursion and from its unrolled closed form.

    ``N_seq[m-1]`` is N(m) and ``r_integrals[m-1]`` is ∫_{m-1}^{m} r, for
    m = 1..n.  Returns (recursive, closed) arrays of length n + 1 with d_0
    first.  The recursion is d_m = N(m) + e^{∫_{m-1}^m r} d_{m-1}; the closed
    form is d₀ e^{∫₀^m r} + Σ_{j=0}^{m-1} N(m-j) e^{∫_{m-j}^m r}.
    """
    N = np.asarray(N_seq, float)
    rho = np.asarray(r_integrals, float)
    if N.shape != rho.shape or N.ndim != 1:
        raise ConfigurationError("N_seq and r_integrals must be aligned 1-d sequences")
    n = len(N)
    rec = np.empty(n + 1)
    rec[0] = d0
    for m in range(1, n + 1):
        rec[m] = N[m - 1] + math.exp(rho[m - 1]) * rec[m - 1]
    s = np.concatenate([[0.0], np.cumsum(rho)])  # s[m] = ∫₀^m r
    closed = np.empty(n + 1)
    closed[0] = d0
    for m in range(1, n + 1):
        terms = [N[m - j - 1] * math.exp(s[m] - s[m - j]) for j in range(m)]
        closed[m] = d0 * math.exp(s[m]) + math.fsum(terms)
    return rec, closed


def geometric_limit(n0: float, r0: float) -> float:
    """lim d_m for N ≡ n0 and r ≡ r0 < 0: n0 / (1 - e^{r0})."""
    if not r0 < 0:
        raise ConfigurationError("the geometric limit needs r0 < 0")
    return n0 / -math.expm1(r0)


# ---------------------------------------------------------------------------
# conjugacy transfer
# ---------------------------------------------------------------------------


def _exact_difference(hi1: np.ndarray, lo1: np.ndarray, hi2: np.ndarray, lo2: np.ndarray) -> np.ndarray:
    """Correctly rounded (hi1 + lo1) - (hi2 + lo2), element by element."""
    flat = [math.fsum((a, b, -c, -d)) for a, b, c, d in
            zip(hi1.ravel(), lo1.ravel(), hi2.ravel(), lo2.ravel())]
    return np.array(flat).reshape(hi1.shape)


@dataclass(frozen=True, eq=False)
class ConjugacyReport:
    identical: bool
    max_abs_gap: float
    eta_identical: bool
    n_snapshots: int
    transform: str
    statistics_transfer: bool


def _v_difference(v1: Trajectory, v2: Trajectory) -> np.ndarray:
    if v1.lo is None or v2.lo is None:
        return v1.coeffs - v2.coeffs
    re = _exact_difference(v1.coeffs.real, v1.lo.real, v2.coeffs.real, v2.lo.real)
    im = _exact_difference(v1.coeffs.imag, v1.lo.imag, v2.coeffs.imag, v2.lo.imag)
    return re + 1j * im


def nonlinear_conjugate(traj_u: Trajectory, path: NoisePath) -> Trajectory:
    """Negative control T(ω, x) = x·e^{-z}, applied coefficient-wise."""
    _, _, zs = path.materialize(int(round(traj_u.times[-1] / traj_u.dt)),
                                int(round(traj_u.dt / path.dt)))
    steps = np.rint(traj_u.times / traj_u.dt).astype(int)
    z = zs[steps]
    return Trajectory(traj_u.grid, traj_u.times.copy(), traj_u.coeffs * np.exp(-z), traj_u.dt,
                      "nonlinear_control", dict(traj_u.provenance), z=z)


def conjugacy_transfer(pair: PairTrace, path: NoisePath, L: FunctionalSet | None = None,
                       transform: str = "additive") -> ConjugacyReport:
    """Check (v₁ - v₂)(t) = (u₁ - u₂)(t) bit for bit on every snapshot.

    With the additive conjugation v = u + z the identity is exact; the
    difference of conjugated snapshots is evaluated from their exact
    (value + residual) representation and compared with the rounded
    difference of the transformed snapshots.  ``transform="nonlinear"`` swaps
    in the control x·e^{-z}, for which the identity must fail.
    """
    if pair.traj1 is None or pair.traj2 is None:
        raise ConfigurationError("pair trace carries no snapshots")
    if path.seed != pair.seed:
        raise ConfigurationError("noise path does not belong to this pair")
    u1, u2 = pair.traj1, pair.traj2
    if not np.array_equal(u1.times, u2.times):
        raise ConfigurationError("misaligned snapshot times")
    if transform == "additive":
        v1, v2 = conjugate(u1, path), conjugate(u2, path)
    elif transform == "nonlinear":
        v1, v2 = nonlinear_conjugate(u1, path), nonlinear_conjugate(u2, path)
    else:
        raise ConfigurationError(f"unknown transform {transform!r}")
    du = u1.coeffs - u2.coeffs
    dv = _v_difference(v1, v2)
    identical = bool(np.array_equal(du.view(np.float64), dv.view(np.float64)))
    gap = float(np.max(np.abs(du - dv)))
    eta_same = True
    if L is not None and len(L):
        eu = np.max((coeffs_to_coords(du, u1.grid) @ L.matrix.T) ** 2, axis=-1)
        ev = np.max((coeffs_to_coords(dv, u1.grid) @ L.matrix.T) ** 2, axis=-1)
        eta_same = bool(np.array_equal(eu, ev))
    return ConjugacyReport(identical, gap, eta_same, len(u1.times), transform,
                           identical and eta_same)
