"""
Closed-form sufficient conditions for determining functionals in probability.

All quantities are evaluated from a :class:`ModelConstants` record:

* radius admissibility      λ₁ > 4 tr Q / ((κ+1) ν³)
* moment admissibility      λ₁ > 16 tr Q / ((κ+1) ν³)  and  λ₁ >= 256 tr Q / ((κ+1)² ν³)
* g_k = a₀ (tr Q / ν)(κ + a₁ tr Q / ((κ+1)² λ₁ ν³))
* h_k = 2 c_E ( (tr QA²)² / (ν³ λ₁³ (κ+1) [ν³ λ₁ (κ+1) - 16 tr Q]) )^{1/4}
* Σ bound = ((4/ν²)‖f‖²_{V'} + g_k)(1 + h_k)
* main condition  (4/ν) Σ bound + 2 tr Q / ((κ+1) ν) < ν ε_L⁻²

The Monte Carlo counterparts (:func:`estimate_sigma_mc`,
:func:`estimate_R_moments`) work on ensembles from :mod:`detfunc.ensemble`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ensemble import EnsembleSeries, window_integral
from .noise import CovarianceSpec, OUParams, gaussian_moment_factor, stationary_moment
from .rds import RadiusPath
from .spectral import ConfigurationError, SpectralGrid, TWO_PI


class DomainError(ValueError):
    """A closed form is evaluated outside the parameter region where it is defined."""


@dataclass(frozen=True)
class ModelConstants:
    nu: float
    kappa: float
    lambda1: float = 1.0
    f_vdual_sq: float = 0.0
    trQ: float = 0.0
    trQA2: float = 0.0
    c_E: float = 1.0
    sigma_a0: float = 1.0
    sigma_a1: float = 1.0
    eps_L: float = 1.0
    m_window: float = 1.0

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not (val >= 0 and math.isfinite(val)):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {val}")
        if not (self.nu > 0 and self.lambda1 > 0):
            raise ConfigurationError("nu and lambda1 must be > 0")

    @property
    def c(self) -> float:
        """Dissipation constant c = ν/2 of the monotonicity estimate."""
        return self.nu / 2.0

    def with_(self, **changes) -> "ModelConstants":
        return ModelConstants(**{**asdict(self), **changes})


@dataclass(frozen=True)
class Admissibility:
    """Pass flags with margins (threshold ratio λ₁ / bound; inf for zero noise)."""

    radius: bool
    moment_linear: bool
    moment_quadratic: bool
    radius_margin: float
    moment_linear_margin: float
    moment_quadratic_margin: float

    def __iter__(self):
        return iter((self.radius, self.moment_linear, self.moment_quadratic))

    @property
    def moments(self) -> bool:
        return self.moment_linear and self.moment_quadratic


def _ratio(lam: float, bound: float) -> float:
    return math.inf if bound == 0 else lam / bound


def _linear_gap(c: ModelConstants) -> float:
    """ν³λ₁(κ+1) - 16 tr Q; positive exactly when the linear moment condition holds."""
    return c.nu**3 * c.lambda1 * (c.kappa + 1.0) - 16.0 * c.trQ


def check_admissibility(c: ModelConstants) -> Admissibility:
    k1 = c.kappa + 1.0
    b_r = 4.0 * c.trQ / (k1 * c.nu**3)
    b_a = 16.0 * c.trQ / (k1 * c.nu**3)
    b_b = 256.0 * c.trQ / (k1**2 * c.nu**3)
    return Admissibility(
        c.lambda1 > b_r, _linear_gap(c) > 0, c.lambda1 >= b_b,
        _ratio(c.lambda1, b_r), _ratio(c.lambda1, b_a), _ratio(c.lambda1, b_b),
    )


def g_k(c: ModelConstants) -> float:
    k1 = c.kappa + 1.0
    return c.sigma_a0 * (c.trQ / c.nu) * (
        c.kappa + c.sigma_a1 * c.trQ / (k1**2 * c.lambda1 * c.nu**3)
    )


def h_k(c: ModelConstants) -> float:
    k1 = c.kappa + 1.0
    gap = _linear_gap(c)
    if not gap > 0:
        raise DomainError(
            "h_k is undefined: ν³λ₁(κ+1) - 16 tr Q = "
            f"{gap:.6g} <= 0 (the linear moment admissibility condition fails)"
        )
    return 2.0 * c.c_E * (c.trQA2**2 / (c.nu**3 * c.lambda1**3 * k1 * gap)) ** 0.25


def sigma_bound(c: ModelConstants) -> float:
    return (4.0 / c.nu**2 * c.f_vdual_sq + g_k(c)) * (1.0 + h_k(c))


@dataclass(frozen=True)
class ConditionReport:
    radius_pass: bool
    moment_pass: bool
    admissibility: Admissibility
    g_k: float
    h_k: float
    sigma_bound: float
    lhs_main: float
    rhs_main: float
    main_pass: bool
    eps_threshold: float
    eps_threshold_remark: float
    ez_v_sq: float
    constants: ModelConstants
    notes: tuple = field(default_factory=tuple)

    def csv_row(self) -> dict:
        k = self.constants
        return {
            "nu": k.nu, "kappa": k.kappa, "lambda1": k.lambda1, "f_vdual_sq": k.f_vdual_sq,
            "trQ": k.trQ, "trQA2": k.trQA2, "c_E": k.c_E, "a0": k.sigma_a0, "a1": k.sigma_a1,
            "eps_L": k.eps_L, "m_window": k.m_window,
            "radius_pass": self.radius_pass, "moment_pass": self.moment_pass,
            "g_k": self.g_k, "h_k": self.h_k, "sigma_bound": self.sigma_bound,
            "lhs_main": self.lhs_main, "rhs_main": self.rhs_main, "main_pass": self.main_pass,
            "eps_threshold": self.eps_threshold, "eps_threshold_remark": self.eps_threshold_remark,
        }

    def table(self) -> str:
        k = self.constants
        rows = [
            ("radius admissibility", f"{self.radius_pass} (margin {self.admissibility.radius_margin:.4g})"),
            ("moment admissibility (16)", f"{self.admissibility.moment_linear} "
                                           f"(margin {self.admissibility.moment_linear_margin:.4g})"),
            ("moment admissibility (256)", f"{self.admissibility.moment_quadratic} "
                                            f"(margin {self.admissibility.moment_quadratic_margin:.4g})"),
            ("g_k = a0 (trQ/nu)(kappa + a1 trQ/((kappa+1)^2 lambda1 nu^3))",
             f"{self.g_k:.10g}  [a0={k.sigma_a0}, a1={k.sigma_a1}]"),
            ("h_k = 2 c_E (trQA2^2/(nu^3 lambda1^3 (kappa+1) gap))^(1/4)",
             f"{self.h_k:.10g}  [c_E={k.c_E:.6g}]"),
            ("sigma_bound = (4 |f|^2/nu^2 + g_k)(1 + h_k)", f"{self.sigma_bound:.10g}"),
            ("lhs_main = (4/nu) sigma_bound + 2 trQ/((kappa+1) nu)", f"{self.lhs_main:.10g}"),
            ("rhs_main = nu eps_L^-2", f"{self.rhs_main:.10g}"),
            ("main condition", "PASS" if self.main_pass else "FAIL"),
            ("noise-free eps_L threshold nu^2/(4 |f|)", f"{self.eps_threshold:.10g}"),
            ("remark threshold 4 nu^2/|f|", f"{self.eps_threshold_remark:.10g}"),
        ]
        width = max(len(a) for a, _ in rows)
        lines = [f"{a.ljust(width)}  {b}" for a, b in rows]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def main_condition(c: ModelConstants) -> ConditionReport:
    adm = check_admissibility(c)
    notes = []
    gk = g_k(c)
    try:
        hk = h_k(c)
        sb = (4.0 / c.nu**2 * c.f_vdual_sq + gk) * (1.0 + hk)
        lhs = (4.0 / c.nu) * sb + 2.0 * c.trQ / ((c.kappa + 1.0) * c.nu)
    except DomainError as exc:
        hk = sb = lhs = math.inf
        notes.append(str(exc))
    rhs = math.inf if c.eps_L == 0 else c.nu / c.eps_L**2
    if not adm.moments:
        notes.append("moment admissibility fails: the main condition carries no guarantee")
    f_norm = math.sqrt(c.f_vdual_sq)
    thr = math.inf if f_norm == 0 else c.nu**2 / (4.0 * f_norm)
    thr_remark = math.inf if f_norm == 0 else 4.0 * c.nu**2 / f_norm
    ez = c.trQ / (2.0 * (c.kappa + 1.0) * c.nu)
    return ConditionReport(adm.radius, adm.moments, adm, gk, hk, sb, lhs, rhs,
                           bool(lhs < rhs), thr, thr_remark, ez, c, tuple(notes))


def constants_from_model(nu: float, kappa: float, forcing_vdual_sq: float, cov: CovarianceSpec,
                         eps_L: float, c_E: float, a0: float = 1.0, a1: float = 1.0,
                         m_window: float = 1.0) -> ModelConstants:
    return ModelConstants(nu, kappa, cov.grid.lambda1, forcing_vdual_sq, cov.trQ, cov.trQA2,
                          c_E, a0, a1, eps_L, m_window)


# ---------------------------------------------------------------------------
# embedding constant
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmbeddingEstimate:
    value: float
    value_sup: float
    value_grad: float
    coords: np.ndarray
    sampled: float
    truncation: int


def _point_maps(grid: SpectralGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Maps from coordinates to u(0) (2 rows) and ∇u(0) (4 rows), and a_k per coordinate."""
    hm = grid.half_modes
    pol = grid.polarization[:, grid.half_index[0], grid.half_index[1]]
    scale = 2.0 / (TWO_PI * math.sqrt(2.0))
    n = grid.n_coords
    val = np.empty((2, n))
    grad = np.empty((4, n))
    for comp in range(2):
        e = pol[comp] * scale
        val[comp, 0::2] = e.real
        val[comp, 1::2] = (1j * e).real
        for d in range(2):
            de = 1j * hm[:, d] * e
            grad[2 * comp + d, 0::2] = de.real
            grad[2 * comp + d, 1::2] = (1j * de).real
    return val, grad, grid.coord_ksq / 2.0


def estimate_c_E(grid: SpectralGrid, n_samples: int = 2000, seed: int = 0,
                 max_ksq: float | None = None) -> EmbeddingEstimate:
    """sup max(|u|_∞, |∇u|_∞) over ‖A^{3/2}u‖_H = 1 on the truncation.

    By translation invariance the sup is attained at x = 0, where u(0) and
    ∇u(0) (Frobenius norm) are linear in the coordinates; the sup is then the
    largest singular value of the weighted maps.  This is exact on the
    truncation and therefore a lower bound for the full embedding norm.  A
    random-sampling value is returned alongside as an independent check.
    """
    val, grad, a = _point_maps(grid)
    keep = np.ones(grid.n_coords, bool) if max_ksq is None else grid.coord_ksq <= max_ksq
    w = a[keep] ** -1.5
    tv = val[:, keep] * w
    tg = grad[:, keep] * w
    s_val = float(np.linalg.norm(tv, 2))
    s_grad = float(np.linalg.norm(tg, 2))
    t = tv if s_val >= s_grad else tg
    _, _, vt = np.linalg.svd(t)
    best = np.zeros(grid.n_coords)
    best[keep] = vt[0] * w
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n_samples, int(keep.sum())))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    sampled = 0.0
    for op in (tv, tg):
        x = y[int(np.argmax(np.linalg.norm(y @ op.T, axis=1)))]
        for _ in range(100):  # local ascent of |T x| on the unit sphere
            x = op.T @ (op @ x)
            x /= np.linalg.norm(x)
        sampled = max(sampled, float(np.linalg.norm(op @ x)))
    return EmbeddingEstimate(max(s_val, s_grad), s_val, s_grad, best, sampled, grid.n_max)


# ---------------------------------------------------------------------------
# Monte Carlo counterparts
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SigmaEstimate:
    estimate: float
    per_path: np.ndarray
    ez_v_sq: float
    lhs_expectation: float
    m_window: float
    t_start: float


def estimate_sigma_mc(ens: EnsembleSeries, m_window: float, cov: CovarianceSpec | None = None,
                      t_start: float = 0.0) -> SigmaEstimate:
    """Average over paths of max over initial data of (1/m)∫ ‖u‖²_V on a window.

    Also returns (4/(νm))·E sup ∫ + (4/ν) E‖z‖²_V, with the OU term taken
    from the closed-form stationary moment when ``cov`` is supplied.
    """
    if ens.n_paths < 8:
        raise ConfigurationError("estimate_sigma_mc needs at least 8 noise paths")
    if not m_window > 0 or t_start + m_window > ens.times[-1] + 1e-12:
        raise ConfigurationError("window does not fit in the simulated horizon")
    avg = window_integral(ens.v_sq, ens.times, t_start, t_start + m_window) / m_window
    per_path = avg.max(axis=1)
    est = float(per_path.mean())
    if cov is not None:
        ez = 2.0 * stationary_moment(0.5, OUParams(ens.kappa, ens.nu), cov)
    else:
        ez = float(ens.z_v_sq.mean())
    lhs = 4.0 / ens.nu * est + 4.0 / ens.nu * ez
    return SigmaEstimate(est, per_path, ez, lhs, m_window, t_start)


@dataclass(frozen=True)
class MomentReport:
    orders: tuple
    moments: dict
    half_sample: dict
    stabilized: bool
    n_samples: int


def estimate_R_moments(radius: list[RadiusPath] | np.ndarray, orders=(2, 4, 8),
                       admissible: bool | None = None, rel_tol: float = 0.2) -> MomentReport:
    """Empirical E R^p from independent radius samples (R² per path at t = 0).

    Stabilisation compares the estimate on the first half of the samples with
    the full-sample estimate.
    """
    if isinstance(radius, np.ndarray):
        r2 = np.asarray(radius, float)
    else:
        r2 = np.array([rp.r2[0] for rp in radius])
        if admissible is None:
            admissible = all(rp.admissible for rp in radius)
    if admissible is False:
        raise ConfigurationError("radius moments requested outside the admissible region")
    if len(r2) < 2:
        raise ConfigurationError("need at least two radius samples")
    half = r2[: len(r2) // 2]
    mom = {p: float(np.mean(r2 ** (p / 2.0))) for p in orders}
    mom_half = {p: float(np.mean(half ** (p / 2.0))) for p in orders}
    stable = all(
        (mom[p] == 0 and mom_half[p] == 0) or abs(mom_half[p] - mom[p]) <= rel_tol * abs(mom[p])
        for p in orders
    )
    return MomentReport(tuple(orders), mom, mom_half, bool(stable), len(r2))


def gaussian_moment_bound(second_moment: float, l: int) -> float:
    """(2l-1)!! (E‖·‖²)^l, the even-moment bound for Gaussian norms."""
    return gaussian_moment_factor(l) * second_moment**l
