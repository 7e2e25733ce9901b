"""
Divergence-free velocity fields on the periodic torus [0, 2π]².

A field is stored as one complex amplitude ``c_k`` per wavevector of the
lattice ``max(|k1|, |k2|) <= n_max``; the velocity coefficient is

    û_k = c_k · e_k,   e_k = i k⊥ / |k|,   k⊥ = (-k2, k1)

so every stored field is divergence-free by construction and real whenever
``c_{-k} = conj(c_k)``.  In physical space ``u(x) = Σ_k û_k exp(i k·x)``.

Conventions
-----------
* Stokes operator ``A = -Δ/2`` with eigenvalues ``a_k = |k|²/2``.
* ``‖u‖_H`` is the L² norm over the torus (Lebesgue measure, area 4π²).
* ``‖u‖_V = ‖∇u‖_H = √2 ‖A^{1/2} u‖_H`` and ``‖u‖_{V'} = ‖A^{-1/2} u‖_H / √2``.
* The convective term is evaluated pseudospectrally after truncating both
  inputs to the 2/3-rule band ``max(|k1|, |k2|) <= floor(2 n_max / 3)``; the
  product is formed with real FFTs on a grid of at least ``3K + 1`` points per
  axis, so it is alias-free on the band.

Array kernels (``*_arr``) accept any number of leading batch axes; the
integrators in :mod:`detfunc.rds` use them directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import scipy.fft

TWO_PI = 2.0 * math.pi
AREA = TWO_PI**2


class ConfigurationError(ValueError):
    """Inputs that cannot be combined (grid mismatch, bad parameters)."""


@dataclass(frozen=True)
class SpectralGrid:
    """Truncated Fourier lattice on the 2π-periodic square."""

    n_max: int
    domain_period: float = TWO_PI

    def __post_init__(self):
        if int(self.n_max) != self.n_max or self.n_max < 2:
            raise ConfigurationError(f"n_max must be an integer >= 2, got {self.n_max}")
        if self.domain_period != TWO_PI:
            raise ConfigurationError("only the 2π-periodic torus is supported")

    # the dataclass is frozen; cached_property writes into __dict__ directly
    @property
    def size(self) -> int:
        """Number of lattice points (and physical grid points) per axis."""
        return 2 * self.n_max + 1

    @property
    def dealias_cutoff(self) -> int:
        return (2 * self.n_max) // 3

    @cached_property
    def freqs(self) -> np.ndarray:
        return np.fft.fftfreq(self.size, d=1.0 / self.size).round().astype(int)

    @cached_property
    def k1(self) -> np.ndarray:
        return np.broadcast_to(self.freqs[:, None], (self.size, self.size)).copy()

    @cached_property
    def k2(self) -> np.ndarray:
        return np.broadcast_to(self.freqs[None, :], (self.size, self.size)).copy()

    @cached_property
    def ksq(self) -> np.ndarray:
        return (self.k1**2 + self.k2**2).astype(float)

    @cached_property
    def nonzero(self) -> np.ndarray:
        return self.ksq > 0

    @cached_property
    def eig(self) -> np.ndarray:
        """Stokes eigenvalues a_k = |k|²/2; the zero mode holds a placeholder 1."""
        a = self.ksq / 2.0
        a[~self.nonzero] = 1.0
        return a

    def eig_power(self, s: float) -> np.ndarray:
        """a_k**s with the zero mode set to 0."""
        out = self.eig**s
        out[~self.nonzero] = 0.0
        return out

    @cached_property
    def polarization(self) -> np.ndarray:
        """Unit vectors e_k = i k⊥/|k|, shape (2, N, N); zero at k = 0."""
        kn = np.sqrt(self.ksq)
        kn[~self.nonzero] = 1.0
        e = np.stack([-self.k2 / kn, self.k1 / kn]).astype(complex) * 1j
        e[:, ~self.nonzero] = 0.0
        return e

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        kc = self.dealias_cutoff
        return (np.abs(self.k1) <= kc) & (np.abs(self.k2) <= kc)

    @cached_property
    def band(self) -> "_Band":
        return _Band.build(self)

    @cached_property
    def mirror_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Index arrays mapping position k to position -k."""
        idx = (-np.arange(self.size)) % self.size
        return idx[:, None], idx[None, :]

    @cached_property
    def half_mask(self) -> np.ndarray:
        """One representative of each pair {k, -k}: k1 > 0, or k1 = 0 and k2 > 0."""
        return (self.k1 > 0) | ((self.k1 == 0) & (self.k2 > 0))

    @cached_property
    def half_modes(self) -> np.ndarray:
        """Wavevectors of the half lattice, shape (M, 2), sorted by (|k|², k1, k2)."""
        ks = np.stack([self.k1[self.half_mask], self.k2[self.half_mask]], axis=1)
        order = np.lexsort((ks[:, 1], ks[:, 0], ks[:, 0] ** 2 + ks[:, 1] ** 2))
        return ks[order]

    @cached_property
    def half_index(self) -> tuple[np.ndarray, np.ndarray]:
        ks = self.half_modes
        return ks[:, 0] % self.size, ks[:, 1] % self.size

    @property
    def n_coords(self) -> int:
        """Real dimension of the truncated divergence-free space."""
        return 2 * len(self.half_modes)

    @cached_property
    def coord_ksq(self) -> np.ndarray:
        """|k|² for every real coordinate (cos-type and sin-type per mode)."""
        ksq = (self.half_modes**2).sum(axis=1).astype(float)
        return np.repeat(ksq, 2)

    @cached_property
    def points(self) -> np.ndarray:
        return TWO_PI * np.arange(self.size) / self.size

    @property
    def lambda1(self) -> float:
        """Smallest eigenvalue of -Δ on mean-zero fields."""
        return float(self.ksq[self.nonzero].min())

    def index_of(self, k: Sequence[int]) -> tuple[int, int]:
        k1, k2 = int(k[0]), int(k[1])
        if max(abs(k1), abs(k2)) > self.n_max:
            raise ConfigurationError(f"wavevector {k} outside the lattice (n_max={self.n_max})")
        return k1 % self.size, k2 % self.size


@dataclass(frozen=True)
class _Band:
    """Index tables for the dealiased product on the real-FFT physical grid."""

    phys_size: int
    in_i: np.ndarray
    in_j: np.ndarray
    in_ri: np.ndarray
    in_rj: np.ndarray
    pol: np.ndarray
    ik1: np.ndarray
    ik2: np.ndarray
    out_i: np.ndarray
    out_j: np.ndarray
    out_ri: np.ndarray
    out_rj: np.ndarray
    out_pol: np.ndarray

    @classmethod
    def build(cls, g: SpectralGrid) -> "_Band":
        kc = g.dealias_cutoff
        m = scipy.fft.next_fast_len(3 * kc + 1, real=True)
        m += m % 2
        band = g.dealias_mask & g.nonzero
        sel_in = band & (g.k2 >= 0)
        sel_out = band & ((g.k2 > 0) | ((g.k2 == 0) & (g.k1 > 0)))
        in_i, in_j = np.nonzero(sel_in)
        out_i, out_j = np.nonzero(sel_out)
        return cls(
            phys_size=m,
            in_i=in_i, in_j=in_j,
            in_ri=g.k1[in_i, in_j] % m, in_rj=g.k2[in_i, in_j],
            pol=g.polarization[:, in_i, in_j],
            ik1=1j * g.k1[in_i, in_j], ik2=1j * g.k2[in_i, in_j],
            out_i=out_i, out_j=out_j,
            out_ri=g.k1[out_i, out_j] % m, out_rj=g.k2[out_i, out_j],
            out_pol=g.polarization[:, out_i, out_j],
        )


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------


def hermitize(c: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    """Average c_k with conj(c_{-k}) so the reality condition holds exactly."""
    i1, i2 = grid.mirror_index
    out = 0.5 * (c + np.conj(c[..., i1, i2]))
    out[..., 0, 0] = 0.0
    return out


def velocity_hat(c: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    """Vector coefficients û_k, shape (..., 2, N, N)."""
    return c[..., None, :, :] * grid.polarization


def project_arr(w_hat: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    """Leray projection of vector coefficients onto scalar amplitudes."""
    e = grid.polarization
    return np.conj(e[0]) * w_hat[..., 0, :, :] + np.conj(e[1]) * w_hat[..., 1, :, :]


def to_physical(c: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    """Velocity on the physical grid, shape (..., 2, N, N)."""
    return np.fft.ifft2(velocity_hat(c, grid), norm="forward").real


def stokes_arr(c: np.ndarray, grid: SpectralGrid, s: float) -> np.ndarray:
    return c * grid.eig_power(s)


def nonlinear_arr(cu: np.ndarray, cv: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    """P[(u·∇)v] with 2/3-rule dealiasing, returned as scalar amplitudes.

    Only the band max(|k1|,|k2|) <= K enters and leaves; the product is formed
    on an M×M real grid with M >= 3K+1, which keeps it alias-free on the band.
    """
    b = grid.band
    m = b.phys_size
    cu_b = cu[..., b.in_i, b.in_j]
    cv_b = cv[..., b.in_i, b.in_j]
    e0, e1 = b.pol
    batch = cu_b.shape[:-1]
    spec = np.zeros(batch + (6, m, m // 2 + 1), complex)
    ri, rj = b.in_ri, b.in_rj
    spec[..., 0, ri, rj] = cu_b * e0
    spec[..., 1, ri, rj] = cu_b * e1
    v0 = cv_b * e0
    v1 = cv_b * e1
    spec[..., 2, ri, rj] = v0 * b.ik1
    spec[..., 3, ri, rj] = v0 * b.ik2
    spec[..., 4, ri, rj] = v1 * b.ik1
    spec[..., 5, ri, rj] = v1 * b.ik2
    phys = np.fft.irfft2(spec, s=(m, m), norm="forward")
    u0, u1 = phys[..., 0, :, :], phys[..., 1, :, :]
    conv = np.stack(
        [u0 * phys[..., 2, :, :] + u1 * phys[..., 3, :, :],
         u0 * phys[..., 4, :, :] + u1 * phys[..., 5, :, :]],
        axis=-3,
    )
    conv_hat = np.fft.rfft2(conv, norm="forward")
    w0 = conv_hat[..., 0, b.out_ri, b.out_rj]
    w1 = conv_hat[..., 1, b.out_ri, b.out_rj]
    vals = np.conj(b.out_pol[0]) * w0 + np.conj(b.out_pol[1]) * w1
    out = np.zeros(batch + (grid.size, grid.size), complex)
    out[..., b.out_i, b.out_j] = vals
    out[..., (-b.out_i) % grid.size, (-b.out_j) % grid.size] = np.conj(vals)
    return out


def h_inner_arr(c1: np.ndarray, c2: np.ndarray, s: float, grid: SpectralGrid) -> np.ndarray:
    """⟨A^{s/2} u1, A^{s/2} u2⟩_H summed over the last two axes."""
    w = grid.eig_power(s)
    return AREA * np.real(np.sum(w * c1 * np.conj(c2), axis=(-2, -1)))


def hs_sq_arr(c: np.ndarray, s: float, grid: SpectralGrid) -> np.ndarray:
    """‖A^{s/2} u‖²_H over the last two axes."""
    w = grid.eig_power(s)
    return AREA * np.sum(w * (c.real**2 + c.imag**2), axis=(-2, -1))


def v_sq_arr(c: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    return 2.0 * hs_sq_arr(c, 1.0, grid)


# ---------------------------------------------------------------------------
# field objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Immutable divergence-free field; ``coeffs[i1, i2]`` is c_k at k = freqs[(i1, i2)]."""

    grid: SpectralGrid
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.shape != (self.grid.size, self.grid.size):
            raise ConfigurationError(
                f"coefficient array has shape {c.shape}, expected {(self.grid.size,) * 2}"
            )
        c[0, 0] = 0.0
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, grid: SpectralGrid) -> "SpectralField":
        return cls(grid, np.zeros((grid.size, grid.size), complex))

    @classmethod
    def from_modes(cls, grid: SpectralGrid, modes: Mapping[tuple[int, int], complex]) -> "SpectralField":
        """Real field Σ amp · φ_k over the given modes.

        ``φ_k`` is the unit-H-norm real field ``(c_k e_k e^{ik·x} + c.c.)`` with
        ``c_k = 1/(2π√2)``; a complex amplitude rotates the phase.  ``k`` and
        ``-k`` denote the same mode pair (the amplitude is conjugated for -k).
        """
        c = np.zeros((grid.size, grid.size), complex)
        scale = 1.0 / (TWO_PI * math.sqrt(2.0))
        i1m, i2m = grid.mirror_index
        for k, amp in modes.items():
            if k[0] == 0 and k[1] == 0:
                raise ConfigurationError("the zero wavevector carries no degree of freedom")
            i, j = grid.index_of(k)
            c[i, j] += amp * scale
            c[i1m[i, 0], i2m[0, j]] += np.conj(amp) * scale
        return cls(grid, c)

    @classmethod
    def from_physical(cls, grid: SpectralGrid, u: np.ndarray) -> "SpectralField":
        """Project a sampled vector field of shape (2, N, N) onto the grid."""
        u = np.asarray(u, float)
        if u.shape != (2, grid.size, grid.size):
            raise ConfigurationError(f"physical field must have shape {(2, grid.size, grid.size)}")
        what = np.fft.fft2(u, norm="forward")
        return cls(grid, hermitize(project_arr(what, grid), grid))

    @classmethod
    def from_coords(cls, grid: SpectralGrid, x: np.ndarray) -> "SpectralField":
        return cls(grid, coords_to_coeffs(np.asarray(x, float), grid))

    def coords(self) -> np.ndarray:
        return coeffs_to_coords(self.coeffs, self.grid)

    def velocity_hat(self) -> np.ndarray:
        return velocity_hat(self.coeffs, self.grid)

    def physical(self) -> np.ndarray:
        return to_physical(self.coeffs, self.grid)

    def _check(self, other: "SpectralField"):
        if self.grid != other.grid:
            raise ConfigurationError(f"grid mismatch: {self.grid} vs {other.grid}")

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, a: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * a)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.grid, -self.coeffs)

    def inner(self, other: "SpectralField") -> float:
        self._check(other)
        return float(h_inner_arr(self.coeffs, other.coeffs, 0.0, self.grid))

    def is_real(self) -> bool:
        i1, i2 = self.grid.mirror_index
        return bool(np.array_equal(self.coeffs[i1, i2], np.conj(self.coeffs)))


def coeffs_to_coords(c: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    """Real H-orthonormal coordinates (Re, Im pairs over the half lattice)."""
    vals = c[..., grid.half_index[0], grid.half_index[1]] * (TWO_PI * math.sqrt(2.0))
    out = np.empty(vals.shape[:-1] + (2 * vals.shape[-1],))
    out[..., 0::2] = vals.real
    out[..., 1::2] = vals.imag
    return out


def coords_to_coeffs(x: np.ndarray, grid: SpectralGrid) -> np.ndarray:
    vals = (x[..., 0::2] + 1j * x[..., 1::2]) / (TWO_PI * math.sqrt(2.0))
    c = np.zeros(x.shape[:-1] + (grid.size, grid.size), complex)
    i, j = grid.half_index
    c[..., i, j] = vals
    c[..., (-i) % grid.size, (-j) % grid.size] = np.conj(vals)
    return c


@dataclass(frozen=True)
class RawField:
    """Vector Fourier coefficients (2, N, N) without the divergence constraint."""

    grid: SpectralGrid
    coeffs: np.ndarray

    def divergence(self) -> np.ndarray:
        g = self.grid
        return 1j * (g.k1 * self.coeffs[0] + g.k2 * self.coeffs[1])


@dataclass(frozen=True)
class NormBundle:
    h: float
    v: float
    v_dual: float
    hs: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def apply_stokes(u: SpectralField, s: float) -> SpectralField:
    """A^s u, i.e. per-mode multiplication by (|k|²/2)**s."""
    return SpectralField(u.grid, stokes_arr(u.coeffs, u.grid, s))


def leray_project(w: RawField) -> SpectralField:
    """Apply I - k kᵀ/|k|² mode by mode."""
    c = project_arr(np.asarray(w.coeffs, complex), w.grid)
    c[0, 0] = 0.0
    return SpectralField(w.grid, c)


def nonlinear_term(u: SpectralField, v: SpectralField) -> SpectralField:
    """Dealiased, Leray-projected convective term P[(u·∇)v]; bilinear in (u, v)."""
    u._check(v)
    return SpectralField(u.grid, nonlinear_arr(u.coeffs, v.coeffs, u.grid))


def norms(u: SpectralField, exponents: Sequence[float] = (-1.0, 0.0, 1.0, 2.0, 3.0)) -> NormBundle:
    hs = {float(s): float(math.sqrt(hs_sq_arr(u.coeffs, s, u.grid))) for s in exponents}
    for s in (-1.0, 0.0, 1.0):
        hs.setdefault(s, float(math.sqrt(hs_sq_arr(u.coeffs, s, u.grid))))
    return NormBundle(
        h=hs[0.0],
        v=math.sqrt(2.0) * hs[1.0],
        v_dual=hs[-1.0] / math.sqrt(2.0),
        hs=hs,
    )
