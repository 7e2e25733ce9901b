"""
Pathwise integration of the random Navier-Stokes system.

Two schemes share the same noise realisation:

* ``integrate_transformed`` solves the random PDE for ``u = v - z``,

      du/dt = -2νA u - P[(u+z)·∇(u+z)] + 2νκ A z + f,

  with the linear part -2νA = νΔ integrated exactly per mode and the rest
  taken explicitly (exponential Euler).

* ``integrate_sns_direct`` applies the same exponential Euler-Maruyama step
  to the SPDE ``dv = (νΔv - P[(v·∇)v] + f) dt + dw`` using the Wiener
  increments of the path.

``conjugate`` maps a transformed trajectory back to ``v = u + z``.
``radius_path`` integrates the scalar random ODE whose stationary solution
bounds the absorbing ball.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .noise import NoisePath, OUParams, batch_stepper
from .spectral import (
    ConfigurationError,
    SpectralField,
    SpectralGrid,
    hs_sq_arr,
    nonlinear_arr,
    norms,
    v_sq_arr,
)


class NumericalFailure(RuntimeError):
    """Non-finite state during integration; the partial trajectory is attached."""

    def __init__(self, message: str, last_valid_time: float, partial=None):
        super().__init__(message)
        self.last_valid_time = last_valid_time
        self.partial = partial


@dataclass(frozen=True, eq=False)
class NSEParams:
    nu: float
    kappa: float
    forcing: SpectralField

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigurationError(f"nu must be > 0, got {self.nu}")
        if not self.kappa >= 0:
            raise ConfigurationError(f"kappa must be >= 0, got {self.kappa}")

    @property
    def grid(self) -> SpectralGrid:
        return self.forcing.grid

    @property
    def lambda1(self) -> float:
        return self.grid.lambda1

    @property
    def ou(self) -> OUParams:
        return OUParams(self.kappa, self.nu)

    @property
    def f_vdual_sq(self) -> float:
        return norms(self.forcing).v_dual ** 2


@dataclass(eq=False)
class Trajectory:
    """Snapshots ``u(t_i)`` (coefficient arrays) plus provenance.

    ``lo`` optionally holds the rounding residual of each snapshot so that
    ``coeffs + lo`` is an exact (unrounded) value; ``conjugate`` fills it.
    """

    grid: SpectralGrid
    times: np.ndarray
    coeffs: np.ndarray
    dt: float
    scheme: str
    provenance: dict = field(default_factory=dict)
    z: np.ndarray | None = None
    lo: np.ndarray | None = None
    cfl_max: float = 0.0
    cfl_flag: bool = False

    def __post_init__(self):
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ConfigurationError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def field_at(self, i: int) -> SpectralField:
        return SpectralField(self.grid, self.coeffs[i])

    def final(self) -> SpectralField:
        return self.field_at(-1)

    def norm_table(self) -> dict[str, np.ndarray]:
        """‖u‖_H, ‖u‖_V and ‖u‖_{V'} per snapshot."""
        g = self.grid
        return {
            "h": np.sqrt(hs_sq_arr(self.coeffs, 0.0, g)),
            "v": np.sqrt(2.0 * hs_sq_arr(self.coeffs, 1.0, g)),
            "v_dual": np.sqrt(hs_sq_arr(self.coeffs, -1.0, g) / 2.0),
        }


@dataclass(eq=False)
class RadiusPath:
    times: np.ndarray
    r2: np.ndarray
    m: np.ndarray
    z_v_sq: np.ndarray
    eps_margin: float
    t_burn: float
    admissible: bool

    def at(self, t: float) -> float:
        i = int(np.argmin(np.abs(self.times - t)))
        return float(self.r2[i])


# ---------------------------------------------------------------------------
# right-hand sides
# ---------------------------------------------------------------------------


def _drift_transformed(u: np.ndarray, z: np.ndarray, p: NSEParams) -> np.ndarray:
    """Everything in du/dt except the stiff -2νA u."""
    g = p.grid
    vz = u + z
    out = -nonlinear_arr(vz, vz, g)
    if p.kappa != 0.0:
        out = out + 2.0 * p.nu * p.kappa * g.eig_power(1.0) * z
    return out + p.forcing.coeffs


def rhs_transformed(u: SpectralField, z: SpectralField, p: NSEParams) -> SpectralField:
    """Full right side -2νAu - P[(u+z)·∇(u+z)] + 2νκAz + f."""
    for x in (u, z):
        if x.grid != p.grid:
            raise ConfigurationError("grid mismatch between fields and parameters")
    g = p.grid
    lin = -2.0 * p.nu * g.eig_power(1.0) * u.coeffs
    return SpectralField(g, lin + _drift_transformed(u.coeffs, z.coeffs, p))


def lipschitz_l(u1: SpectralField | np.ndarray, z: SpectralField | np.ndarray, nu: float,
                grid: SpectralGrid | None = None):
    """(2/ν)(‖u1‖²_V + ‖z‖²_V); accepts fields or coefficient arrays."""
    if isinstance(u1, SpectralField):
        grid = u1.grid
        u1, z = u1.coeffs, z.coeffs
    val = (2.0 / nu) * (v_sq_arr(u1, grid) + v_sq_arr(z, grid))
    return float(val) if np.ndim(val) == 0 else val


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------

Observer = Callable[[int, float, np.ndarray, np.ndarray], None]


def _stride(path_dt: float, dt: float) -> int:
    s = int(round(dt / path_dt))
    if s < 1 or abs(s * path_dt - dt) > 1e-12 * dt:
        raise ConfigurationError(f"dt={dt} is not a multiple of the noise path step {path_dt}")
    return s


def integrate_batch(x0: np.ndarray, paths: list[NoisePath], p: NSEParams, t_end: float,
                    dt: float, scheme: str = "transformed", save_every: int | None = None,
                    observer: Observer | None = None, cfl_limit: float = 1.0,
                    check_every: int = 50) -> list[Trajectory]:
    """Integrate a batch of initial states, member b driven by ``paths[b]``.

    ``x0`` has shape (B, N, N).  ``observer(n, t, state, z)`` is called at
    every step n = 0..n_steps with the batch state and the OU values.
    """
    g = p.grid
    x0 = np.asarray(x0, complex)
    if x0.ndim == 2:
        x0 = x0[None]
    if x0.shape[0] != len(paths):
        raise ConfigurationError("one noise path per batch member is required")
    if x0.shape[1:] != (g.size, g.size) or any(q.grid != g for q in paths):
        raise ConfigurationError("grid mismatch between initial data, paths and parameters")
    if scheme not in ("transformed", "direct"):
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    stride = _stride(paths[0].dt, dt)
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(t_end, 1.0):
        raise ConfigurationError(f"t_end={t_end} is not a multiple of dt={dt}")
    save_every = save_every or max(n_steps, 1)

    stepper = batch_stepper(paths)
    decay = np.exp(-2.0 * p.nu * g.eig_power(1.0) * dt)
    kmax = g.dealias_cutoff
    state = x0.copy()
    z = stepper.current_z()
    saved_t, saved_x, saved_z = [0.0], [state.copy()], [z.copy()]
    last_good = (0.0, state.copy())
    cfl_max = 0.0
    if observer is not None:
        observer(0, 0.0, state, z)

    for n in range(1, n_steps + 1):
        dw, z_next = stepper.advance(stride)
        if scheme == "transformed":
            state = decay * (state + dt * _drift_transformed(state, z, p))
        else:
            drift = p.forcing.coeffs - nonlinear_arr(state, state, g)
            state = decay * (state + dt * drift + dw)
        z = z_next
        t = n * dt
        if n % check_every == 0 or n == n_steps:
            if not np.all(np.isfinite(state)):
                partial = _pack(g, saved_t, saved_x, saved_z, dt, scheme, paths, cfl_max)
                raise NumericalFailure(
                    f"non-finite state at t={t:.6g}", last_good[0], partial
                )
            last_good = (t, state.copy())
            field_sup = np.sum(np.abs(state + z if scheme == "transformed" else state), axis=(-2, -1))
            cfl_max = max(cfl_max, float(dt * kmax * field_sup.max()))
        if observer is not None:
            observer(n, t, state, z)
        if n % save_every == 0 or n == n_steps:
            if saved_t[-1] != t:
                saved_t.append(t)
                saved_x.append(state.copy())
                saved_z.append(z.copy())
    trajs = _pack(g, saved_t, saved_x, saved_z, dt, scheme, paths, cfl_max)
    if cfl_max > cfl_limit:
        warnings.warn(
            f"explicit-part CFL estimate {cfl_max:.3g} exceeds {cfl_limit}; results may be unstable",
            RuntimeWarning,
        )
        for tr in trajs:
            tr.cfl_flag = True
    return trajs


def _pack(g, saved_t, saved_x, saved_z, dt, scheme, paths, cfl_max) -> list[Trajectory]:
    times = np.array(saved_t)
    xs = np.array(saved_x)
    zs = np.array(saved_z)
    out = []
    for b, path in enumerate(paths):
        prov = {"seed": path.seed, "start_step": path.start_step, "path_dt": path.dt,
                "kappa": path.ou.kappa, "nu": path.ou.nu}
        out.append(Trajectory(g, times.copy(), xs[:, b].copy(), dt, scheme, prov,
                              z=zs[:, b].copy(), cfl_max=cfl_max))
    return out


def integrate_transformed(x0: SpectralField, path: NoisePath, p: NSEParams, t_end: float,
                          dt: float, save_every: int | None = None) -> Trajectory:
    """Solve the random PDE for u on [0, t_end] along the noise path."""
    if x0.grid != p.grid:
        raise ConfigurationError("grid mismatch")
    return integrate_batch(x0.coeffs, [path], p, t_end, dt, "transformed", save_every)[0]


def integrate_sns_direct(v0: SpectralField, path: NoisePath, p: NSEParams, t_end: float,
                         dt: float, save_every: int | None = None) -> Trajectory:
    """Exponential Euler-Maruyama for the stochastic Navier-Stokes equations."""
    if v0.grid != p.grid:
        raise ConfigurationError("grid mismatch")
    return integrate_batch(v0.coeffs, [path], p, t_end, dt, "direct", save_every)[0]


def _two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s, err


def conjugate(traj_u: Trajectory, path: NoisePath) -> Trajectory:
    """v(t) = u(t) + z(θ_t ω) snapshot by snapshot.

    The sums are stored as rounded value plus exact residual (``lo``), so the
    conjugated trajectory carries ``u + z`` without rounding loss.
    """
    if traj_u.scheme != "transformed":
        raise ConfigurationError("conjugate expects a trajectory of the transformed system")
    if path.grid != traj_u.grid:
        raise ConfigurationError("grid mismatch")
    if path.seed != traj_u.provenance.get("seed") or path.start_step != traj_u.provenance.get("start_step"):
        raise ConfigurationError("trajectory was not generated on this noise path")
    stride = _stride(path.dt, traj_u.dt)
    steps = np.rint(traj_u.times / traj_u.dt).astype(int)
    if not np.allclose(steps * traj_u.dt, traj_u.times, rtol=0, atol=1e-9):
        raise ConfigurationError("trajectory snapshot times are not on the noise grid")
    _, _, zs = path.materialize(int(steps[-1]), stride)
    z = zs[steps]
    re, re_lo = _two_sum(traj_u.coeffs.real, z.real)
    im, im_lo = _two_sum(traj_u.coeffs.imag, z.imag)
    return Trajectory(traj_u.grid, traj_u.times.copy(), re + 1j * im, traj_u.dt, "conjugated",
                      dict(traj_u.provenance), z=z, lo=re_lo + 1j * im_lo,
                      cfl_max=traj_u.cfl_max, cfl_flag=traj_u.cfl_flag)


# ---------------------------------------------------------------------------
# absorbing radius
# ---------------------------------------------------------------------------


def admissible_radius(p: NSEParams, trQ: float) -> bool:
    """λ₁ > 4 tr_H Q / ((κ+1) ν³)."""
    return p.lambda1 > 4.0 * trQ / ((p.kappa + 1.0) * p.nu**3)


def radius_m(z_v_sq: np.ndarray, p: NSEParams) -> np.ndarray:
    """m = (4/ν)((2/λ₁)‖z‖⁴_V + κ²ν²‖z‖²_V + ‖f‖²_{V'})."""
    nu, lam = p.nu, p.lambda1
    return (4.0 / nu) * ((2.0 / lam) * z_v_sq**2 + p.kappa**2 * nu**2 * z_v_sq + p.f_vdual_sq)


def _phi1(x: np.ndarray) -> np.ndarray:
    out = np.ones_like(x)
    nz = np.abs(x) > 1e-12
    out[nz] = np.expm1(x[nz]) / x[nz]
    return out


def radius_path(path: NoisePath, p: NSEParams, eps: float = 0.1, t_burn: float | None = None,
                t_end: float = 0.0, dt: float | None = None, dt_back: float = 1e-2) -> RadiusPath:
    """Pullback approximation of R²(θ_t ω) = (1+ε)ρ(t) on [0, t_end].

    ρ solves dρ/dt + νλ₁ρ = (8/ν)ρ‖z‖²_V + m(θ_t ω) from ρ(-t_burn) = 0; the
    coefficients are frozen over each step and the linear ODE is solved
    exactly there.  The forward part uses the path's z at spacing ``dt``.
    """
    if not eps > 0:
        raise ConfigurationError("eps must be > 0")
    nu, lam = p.nu, p.lambda1
    t_burn = 20.0 / (nu * lam) if t_burn is None else t_burn
    if not t_burn > 0:
        raise ConfigurationError("t_burn must be > 0")
    admissible = admissible_radius(p, path.cov.trQ)
    if not admissible:
        warnings.warn("radius admissibility condition fails; R² may not be stationary",
                      RuntimeWarning)
    g = p.grid
    t_past, z_past = path.past(t_burn, dt_back)
    zv_past = v_sq_arr(z_past, g)
    rho = 0.0
    h = np.diff(t_past)
    for i in range(len(h)):
        a = nu * lam - (8.0 / nu) * zv_past[i]
        b = radius_m(zv_past[i], p)
        rho = math.exp(-a * h[i]) * rho + b * h[i] * float(_phi1(np.array([-a * h[i]]))[0])
    times = [0.0]
    rhos = [rho]
    zv = [float(zv_past[-1])]
    if t_end > 0:
        dt = path.dt if dt is None else dt
        stride = _stride(path.dt, dt)
        n = int(round(t_end / dt))
        tt, _, zs = path.materialize(n, stride)
        zv_f = v_sq_arr(zs, g)
        a = nu * lam - (8.0 / nu) * zv_f[:-1]
        b = radius_m(zv_f[:-1], p)
        fac = np.exp(-a * dt)
        inc = b * dt * _phi1(-a * dt)
        for i in range(n):
            rho = fac[i] * rho + inc[i]
            rhos.append(rho)
        times = list(tt)
        zv = list(zv_f)
    zv = np.array(zv)
    return RadiusPath(np.array(times), (1.0 + eps) * np.array(rhos), radius_m(zv, p), zv,
                      eps, t_burn, admissible)
