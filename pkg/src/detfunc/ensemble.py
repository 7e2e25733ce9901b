"""
Ensembles of trajectories started on the absorbing sphere.

For every noise path the pullback radius R(ω) is computed first; initial
data are then drawn as random directions scaled to ‖x‖_H = R(ω).  The sup
over the absorbing ball is approximated by the max over these samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .noise import CovarianceSpec, NoisePath
from .rds import NSEParams, integrate_batch, radius_path
from .spectral import SpectralGrid, coords_to_coeffs, hs_sq_arr, v_sq_arr


def random_field(grid: SpectralGrid, rng: np.random.Generator, h_norm: float = 1.0,
                 slope: float = 1.0, size: int | None = None) -> np.ndarray:
    """Coefficients of random real fields with ‖u‖_H = h_norm.

    Gaussian coordinates weighted by |k|^(-slope), restricted to the
    dealiased band.  Returns shape (N, N), or (size, N, N) when ``size`` is set.
    """
    n = 1 if size is None else size
    ksq = grid.coord_ksq
    band = np.repeat(np.max(np.abs(grid.half_modes), axis=1) <= grid.dealias_cutoff, 2)
    x = rng.standard_normal((n, grid.n_coords)) * ksq ** (-slope / 2.0) * band
    x *= h_norm / np.linalg.norm(x, axis=1, keepdims=True)
    c = coords_to_coeffs(x, grid)
    return c[0] if size is None else c


@dataclass(eq=False)
class EnsembleSeries:
    """Per-step diagnostics of P paths × I initial conditions.

    ``v_sq[p, i, n]`` is ‖u(t_n)‖²_V for initial condition i on path p,
    ``h_sq`` likewise for ‖u‖²_H, and ``z_v_sq[p, n]`` is ‖z(θ_{t_n} ω)‖²_V.
    """

    times: np.ndarray
    v_sq: np.ndarray
    h_sq: np.ndarray
    z_v_sq: np.ndarray
    r2: np.ndarray
    seeds: list[int]
    nu: float
    kappa: float
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.v_sq.shape[0]

    @property
    def n_ic(self) -> int:
        return self.v_sq.shape[1]

    def lipschitz(self) -> np.ndarray:
        """l = (2/ν)(‖u‖²_V + ‖z‖²_V) along every trajectory, shape (P, I, n)."""
        return (2.0 / self.nu) * (self.v_sq + self.z_v_sq[:, None, :])


def window_integral(values: np.ndarray, times: np.ndarray, t0: float, t1: float) -> np.ndarray:
    """Trapezoid integral over [t0, t1] along the last axis (grid-aligned ends)."""
    i0 = int(np.argmin(np.abs(times - t0)))
    i1 = int(np.argmin(np.abs(times - t1)))
    return trapezoid(values[..., i0:i1 + 1], times[i0:i1 + 1], axis=-1)


def ball_initial_data(paths: list[NoisePath], p: NSEParams, n_ic: int, ic_seed: int,
                      eps: float = 0.1, t_burn: float | None = None,
                      dt_back: float = 1e-2, slope: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Initial data on the sphere ‖x‖_H = R(ω) for every path; returns (x0, R²)."""
    g = p.grid
    r2 = np.array([radius_path(path, p, eps, t_burn, dt_back=dt_back).r2[0] for path in paths])
    x0 = np.empty((len(paths), n_ic, g.size, g.size), complex)
    for j, path in enumerate(paths):
        rng = np.random.default_rng([ic_seed, path.seed])
        x0[j] = random_field(g, rng, math.sqrt(r2[j]), slope, size=n_ic)
    return x0, r2


def simulate_ball_ensemble(p: NSEParams, cov: CovarianceSpec, seeds: list[int], n_ic: int,
                           horizon: float, dt: float, ic_seed: int = 0, eps: float = 0.1,
                           t_burn: float | None = None, dt_back: float = 1e-2,
                           record_every: int = 1) -> EnsembleSeries:
    """Integrate n_ic absorbing-sphere initial data along each noise path."""
    g = p.grid
    paths = [NoisePath(int(s), cov, p.ou, dt) for s in seeds]
    x0, r2 = ball_initial_data(paths, p, n_ic, ic_seed, eps, t_burn, dt_back)
    batch_paths = [path for path in paths for _ in range(n_ic)]
    flat = x0.reshape((-1, g.size, g.size))
    rec_t, rec_v, rec_h, rec_z = [], [], [], []

    def observe(n, t, state, z):
        if n % record_every == 0:
            rec_t.append(t)
            rec_v.append(v_sq_arr(state, g))
            rec_h.append(hs_sq_arr(state, 0.0, g))
            rec_z.append(v_sq_arr(z[::n_ic], g))

    integrate_batch(flat, batch_paths, p, horizon, dt, observer=observe)
    P = len(seeds)
    v = np.array(rec_v).T.reshape(P, n_ic, -1)
    h = np.array(rec_h).T.reshape(P, n_ic, -1)
    return EnsembleSeries(np.array(rec_t), v, h, np.array(rec_z).T, r2, [int(s) for s in seeds],
                          p.nu, p.kappa, {"dt": dt, "horizon": horizon, "eps": eps})
