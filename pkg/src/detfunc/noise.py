"""
Trace-class Wiener noise and the stationary Ornstein-Uhlenbeck process

    dz + 2(κ+1)ν A z dt = dw

on the divergence-free Fourier lattice.  The covariance is diagonal: each
mode pair {k, -k} spans a two-dimensional real subspace of H and carries a
variance ``q_k`` (its share of ``E‖w(1)‖²_H``), so ``tr_H Q = Σ q_k`` over
mode pairs.

Two sources of randomness are offered.  The single-field operations
(:func:`sample_wiener_increment`, :func:`ou_step`,
:func:`ou_stationary_sample`) draw from a caller-supplied
``numpy.random.Generator``.  :class:`NoisePath` is driven by the
counter-based streams of :mod:`detfunc.rng` so that a path is a pure
function of its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import rng as crng
from .spectral import TWO_PI, ConfigurationError, SpectralField, SpectralGrid, hs_sq_arr

_COORD = TWO_PI * math.sqrt(2.0)  # coordinate value of a unit c_k


@dataclass(frozen=True)
class OUParams:
    kappa: float
    nu: float

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ConfigurationError(f"kappa must be >= 0, got {self.kappa}")
        if not self.nu > 0:
            raise ConfigurationError(f"nu must be > 0, got {self.nu}")

    def rates(self, grid: SpectralGrid) -> np.ndarray:
        """Per-mode decay rate 2(κ+1)ν a_k (placeholder at k = 0)."""
        return 2.0 * (self.kappa + 1.0) * self.nu * grid.eig


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Diagonal covariance; ``q`` is indexed like the lattice with q[k] = q[-k]."""

    grid: SpectralGrid
    q: np.ndarray = field(repr=False)
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.shape != (self.grid.size, self.grid.size):
            raise ConfigurationError("covariance array does not match the grid")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ConfigurationError("per-mode variances must be finite and >= 0")
        i1, i2 = self.grid.mirror_index
        if not np.array_equal(q, q[i1, i2]):
            raise ConfigurationError("per-mode variances must satisfy q_k = q_-k")
        q[0, 0] = 0.0
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def zero(cls, grid: SpectralGrid) -> "CovarianceSpec":
        return cls(grid, np.zeros((grid.size, grid.size)), {"kind": "zero"})

    @classmethod
    def power_law(cls, grid: SpectralGrid, sigma2: float, decay_p: float,
                  max_mode: int | None = None) -> "CovarianceSpec":
        """q_k = sigma2 · |k|^(-2p), optionally restricted to max(|k1|,|k2|) <= max_mode."""
        if sigma2 < 0:
            raise ConfigurationError("sigma2 must be >= 0")
        if not decay_p > 1:
            raise ConfigurationError(
                f"decay_p = {decay_p} gives an infinite trace on the full lattice; need p > 1"
            )
        ksq = grid.ksq.copy()
        ksq[~grid.nonzero] = 1.0
        q = sigma2 * ksq ** (-decay_p)
        if max_mode is not None:
            q = q * ((np.abs(grid.k1) <= max_mode) & (np.abs(grid.k2) <= max_mode))
        q[~grid.nonzero] = 0.0
        desc = {"kind": "power_law", "sigma2": sigma2, "decay_p": decay_p, "max_mode": max_mode}
        return cls(grid, q, desc)

    @classmethod
    def from_modes(cls, grid: SpectralGrid, variances: dict) -> "CovarianceSpec":
        """Explicit per-pair variances, e.g. ``{(1, 0): 1.0}``."""
        q = np.zeros((grid.size, grid.size))
        for k, val in variances.items():
            i, j = grid.index_of(k)
            q[i, j] = val
            q[(-i) % grid.size, (-j) % grid.size] = val
        return cls(grid, q, {"kind": "modes", "modes": {str(k): v for k, v in variances.items()}})

    def trace(self, power: float = 0.0) -> float:
        """tr_H(Q A^power) = Σ over mode pairs of q_k a_k^power."""
        return float(0.5 * np.sum(self.q * self.grid.eig_power(power)))

    @property
    def trQ(self) -> float:
        return self.trace(0.0)

    @property
    def trQA2(self) -> float:
        return self.trace(2.0)

    def full_lattice_finite(self, power: float = 0.0) -> bool:
        """Whether tr(Q A^power) stays finite as the truncation is removed."""
        if self.description.get("kind") != "power_law" or self.description.get("max_mode") is not None:
            return True
        return 2.0 * self.description["decay_p"] - 2.0 * power > 2.0

    def stationary_variance(self, p: OUParams) -> np.ndarray:
        """Per-mode variance q_k / (4(κ+1)ν a_k) of the stationary OU process."""
        return self.q / (2.0 * p.rates(self.grid))

    def stationary_trace(self, p: OUParams) -> float:
        """tr_H of the stationary covariance of z."""
        return float(0.5 * np.sum(self.stationary_variance(p)))


def _complex_from_normals(g1: np.ndarray, g2: np.ndarray, var_pair: np.ndarray) -> np.ndarray:
    """c_k whose pair {k,-k} contributes E‖·‖²_H = var_pair."""
    return np.sqrt(var_pair / 2.0) * (g1 + 1j * g2) / _COORD


def _scatter(vals: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    c = np.zeros(vals.shape[:-1] + (grid.size, grid.size), complex)
    i, j = grid.half_index
    c[..., i, j] = vals
    c[..., (-i) % grid.size, (-j) % grid.size] = np.conj(vals)
    return c


def _half(arr: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    return arr[..., grid.half_index[0], grid.half_index[1]]


def sample_wiener_increment(Q: CovarianceSpec, dt: float, rng: np.random.Generator) -> SpectralField:
    """w(t+dt) - w(t): per-mode complex Gaussian with pair variance q_k·dt."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be > 0, got {dt}")
    g = Q.grid
    m = len(g.half_modes)
    z = rng.standard_normal((2, m))
    vals = _complex_from_normals(z[0], z[1], _half(Q.q, g) * dt)
    return SpectralField(g, _scatter(vals, g))


def ou_step(z: SpectralField, dt: float, p: OUParams, Q: CovarianceSpec,
            rng: np.random.Generator) -> SpectralField:
    """Exact transition of the OU process over a step dt."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be > 0, got {dt}")
    g = Q.grid
    lam = _half(p.rates(g), g)
    decay = np.exp(-lam * dt)
    var = _half(Q.q, g) * (-np.expm1(-2.0 * lam * dt)) / (2.0 * lam)
    n = rng.standard_normal((2, len(lam)))
    vals = decay * _half(z.coeffs, g) + _complex_from_normals(n[0], n[1], var)
    return SpectralField(g, _scatter(vals, g))


def ou_stationary_sample(p: OUParams, Q: CovarianceSpec, rng: np.random.Generator,
                         size: int | None = None):
    """Draw(s) from the stationary law; ``size`` returns a coefficient array (size, N, N)."""
    g = Q.grid
    var = _half(Q.stationary_variance(p), g)
    shape = (2, len(var)) if size is None else (2, size, len(var))
    n = rng.standard_normal(shape)
    c = _scatter(_complex_from_normals(n[0], n[1], var), g)
    return SpectralField(g, c) if size is None else c


def stationary_moment(alpha: float, p: OUParams, Q: CovarianceSpec) -> float:
    """E‖A^α z‖²_H = tr_H(Q A^{2α-1}) / (4(κ+1)ν) for α in [0, 3/2]."""
    if not 0.0 <= alpha <= 1.5:
        raise ConfigurationError(f"alpha must lie in [0, 3/2], got {alpha}")
    return Q.trace(2.0 * alpha - 1.0) / (4.0 * (p.kappa + 1.0) * p.nu)


def moment_norm_sq(c: np.ndarray, alpha: float, grid: SpectralGrid) -> np.ndarray:
    """‖A^α z‖²_H for coefficient arrays with leading batch axes."""
    return hs_sq_arr(c, 2.0 * alpha, grid)


def gaussian_moment_factor(l: int) -> int:
    """(2l-1)!!, the constant bounding E‖X‖^{2l} by (E‖X‖²)^l for diagonal Gaussians."""
    return math.prod(range(1, 2 * l, 2))


# ---------------------------------------------------------------------------
# seeded paths
# ---------------------------------------------------------------------------


def _conditional_var_factor(x: np.ndarray) -> np.ndarray:
    """(1-e^{-2x})/2 - (1-e^{-x})²/x, evaluated without cancellation for small x."""
    out = np.empty_like(x)
    small = x < 1e-2
    xs = x[small]
    out[small] = xs**3 / 12.0 - xs**4 / 12.0 + 17.0 * xs**5 / 360.0 - 7.0 * xs**6 / 360.0
    xl = x[~small]
    out[~small] = -np.expm1(-2.0 * xl) / 2.0 - np.expm1(-xl) ** 2 / xl
    return np.maximum(out, 0.0)


class PathStepper:
    """Advances a batch of noise paths on the base grid of step ``dt``.

    Each base step draws the Wiener increment ΔW and the exact OU innovation
    ξ = ∫ e^{-λ(t+dt-s)} dW(s) jointly, so the Wiener path and z are two views
    of the same Brownian motion.  ``advance(stride)`` aggregates ``stride``
    base steps and returns (ΔW over the stride, z at its end).
    """

    def __init__(self, seeds, cov: CovarianceSpec, ou: OUParams, dt: float,
                 start_step: int, z_start: np.ndarray):
        g = cov.grid
        self.grid = g
        self.step_index = int(start_step)
        hm = g.half_modes
        self.keys = crng.mode_keys(seeds, hm[:, 0], hm[:, 1])
        lam = _half(ou.rates(g), g)
        var_coord = _half(cov.q, g) / 2.0
        x = lam * dt
        self.decay = np.exp(-x)
        # state is kept in coefficient units so re-anchoring is lossless
        self.sd_w = np.sqrt(var_coord * dt) / _COORD
        self.beta = -np.expm1(-x) / x
        self.sd_cond = np.sqrt(var_coord / lam * _conditional_var_factor(x)) / _COORD
        self.z = _half(np.asarray(z_start, complex), g)

    def _base_step(self):
        a1, a2 = crng.normals(self.keys, self.step_index, crng.STREAM_INCREMENT, 0)
        b1, b2 = crng.normals(self.keys, self.step_index, crng.STREAM_INCREMENT, 1)
        dw = self.sd_w * (a1 + 1j * a2)
        xi = self.beta * dw + self.sd_cond * (b1 + 1j * b2)
        self.z = self.decay * self.z + xi
        self.step_index += 1
        return dw

    def advance(self, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        dw = self._base_step()
        for _ in range(stride - 1):
            dw = dw + self._base_step()
        return _scatter(dw, self.grid), self.current_z()

    def current_z(self) -> np.ndarray:
        return _scatter(self.z, self.grid)


@dataclass(frozen=True, eq=False)
class NoisePath:
    """One realisation ω of the driving noise, regenerable from its seed.

    The path lives on the base grid ``t_j = j·dt`` (j counted from
    ``start_step``, which is time 0 of this path).  ``z_start`` is z(0); when
    omitted it is drawn from the stationary law with the path's own stream.
    ``shift(n)`` realises θ_{n·dt} by re-anchoring at step n.
    """

    seed: int
    cov: CovarianceSpec
    ou: OUParams
    dt: float
    start_step: int = 0
    z_start: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"noise path dt must be > 0, got {self.dt}")

    @property
    def grid(self) -> SpectralGrid:
        return self.cov.grid

    @cached_property
    def z0(self) -> np.ndarray:
        if self.z_start is not None:
            return np.asarray(self.z_start, complex)
        g = self.grid
        keys = crng.mode_keys(self.seed, g.half_modes[:, 0], g.half_modes[:, 1])[0]
        n1, n2 = crng.normals(keys, self.start_step, crng.STREAM_STATIONARY)
        var = _half(self.cov.stationary_variance(self.ou), g)
        return _scatter(_complex_from_normals(n1, n2, var), g)

    def stepper(self) -> PathStepper:
        return PathStepper([self.seed], self.cov, self.ou, self.dt, self.start_step, self.z0[None])

    def shift(self, n_steps: int) -> "NoisePath":
        """The path seen from time n_steps·dt onwards (bit-exact continuation)."""
        if n_steps < 0:
            raise ConfigurationError("shifts must be forward in time")
        st = self.stepper()
        for _ in range(n_steps):
            st.advance(1)
        return NoisePath(self.seed, self.cov, self.ou, self.dt,
                         self.start_step + n_steps, st.current_z()[0])

    def materialize(self, n_steps: int, stride: int = 1):
        """Times, Wiener increments and z values for ``n_steps`` strides.

        Returns ``(times, dW, z)`` with ``dW`` of shape (n_steps, N, N) and
        ``z`` of shape (n_steps + 1, N, N), z[0] = z(0).
        """
        st = self.stepper()
        zs = [self.z0]
        dws = []
        for _ in range(n_steps):
            dw, z = st.advance(stride)
            dws.append(dw[0])
            zs.append(z[0])
        times = np.arange(n_steps + 1) * stride * self.dt
        return times, np.array(dws).reshape((n_steps, self.grid.size, self.grid.size)), np.array(zs)

    def past(self, horizon: float, dt_back: float):
        """z on [-horizon, 0] from the time-reversed stationary OU chain.

        Returns ``(times, z)`` in increasing time order, ending at z(0).  The
        stationary OU process is reversible, so stepping backwards from z(0)
        with fresh innovations samples the two-sided path consistently.
        """
        n = int(math.ceil(horizon / dt_back - 1e-9))
        g = self.grid
        keys = crng.mode_keys(self.seed, g.half_modes[:, 0], g.half_modes[:, 1])[0]
        lam = _half(self.ou.rates(g), g)
        decay = np.exp(-lam * dt_back)
        var = _half(self.cov.stationary_variance(self.ou), g) * (-np.expm1(-2.0 * lam * dt_back))
        z = _half(self.z0, g)
        out = [z]
        base = (self.start_step & 0xFFFFFFFF) << 32
        for j in range(1, n + 1):
            n1, n2 = crng.normals(keys, base + j, crng.STREAM_BACKWARD)
            z = decay * z + _complex_from_normals(n1, n2, var)
            out.append(z)
        zs = _scatter(np.array(out[::-1]), g)
        times = -dt_back * np.arange(n, -1, -1)
        return times, zs


def batch_stepper(paths: list[NoisePath]) -> PathStepper:
    """One stepper over several paths sharing covariance, parameters and anchor."""
    p0 = paths[0]
    for p in paths[1:]:
        if p.cov is not p0.cov and not np.array_equal(p.cov.q, p0.cov.q):
            raise ConfigurationError("batched paths must share the covariance")
        if (p.ou, p.dt, p.start_step) != (p0.ou, p0.dt, p0.start_step):
            raise ConfigurationError("batched paths must share OU parameters, dt and anchor step")
    z = np.stack([p.z0 for p in paths])
    return PathStepper([p.seed for p in paths], p0.cov, p0.ou, p0.dt, p0.start_step, z)
