"""
Finite families of linear functionals and their completeness defect.

Everything here works in the real H-orthonormal coordinates of
:func:`detfunc.spectral.coeffs_to_coords`: a field is a vector ``x`` with
``‖u‖²_H = Σ x_i²``, and the Sobolev-type norms are diagonal,

    ‖u‖²_V = Σ |k_i|² x_i²,        ‖u‖²_{W_s} = ‖A^{-s/2} u‖²_H = Σ a_i^{-s} x_i².

A :class:`FunctionalSet` is a matrix ``L`` acting on these coordinates.  The
completeness defect

    ε_L(X, Y) = sup { ‖w‖_Y : l_j(w) = 0 for all j, ‖w‖_X <= 1 }

is the square root of the largest generalised eigenvalue of the pair of
diagonal forms restricted to the null space of ``L``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.special

from .spectral import (
    TWO_PI,
    ConfigurationError,
    SpectralField,
    SpectralGrid,
    coeffs_to_coords,
    hs_sq_arr,
)

RANK_TOL = 1e-10
_COORD = TWO_PI * math.sqrt(2.0)


class RankDeficiencyError(ConfigurationError):
    """The functionals are numerically linearly dependent."""

    def __init__(self, message: str, rows: list[int]):
        super().__init__(message)
        self.rows = rows


# ---------------------------------------------------------------------------
# space pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpacePair:
    """Pair (X, Y) of spaces with diagonal norms in the spectral basis.

    ``kind`` is ``"VH"`` for (V, H) or ``"HW"`` for (H, W) where
    ``‖u‖_W = ‖A^{-s/2} u‖_H``.
    """

    kind: str = "VH"
    s: float = 1.0

    def __post_init__(self):
        if self.kind not in ("VH", "HW"):
            raise ConfigurationError(f"unsupported space pair {self.kind!r}")
        if self.kind == "HW" and not self.s > 0:
            raise ConfigurationError("W needs a positive exponent s")

    @classmethod
    def VH(cls) -> "SpacePair":
        return cls("VH")

    @classmethod
    def HW(cls, s: float = 1.0) -> "SpacePair":
        return cls("HW", s)

    @property
    def exponents(self) -> tuple[float, float]:
        """(sX, sY) with ‖u‖_X ∝ ‖A^{sX/2} u‖_H."""
        return (1.0, 0.0) if self.kind == "VH" else (0.0, -self.s)

    def weights(self, grid: SpectralGrid) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal weights (dX, dY) of ‖·‖²_X and ‖·‖²_Y in coordinates."""
        ksq = grid.coord_ksq
        if self.kind == "VH":
            return ksq.copy(), np.ones_like(ksq)
        return np.ones_like(ksq), (ksq / 2.0) ** (-self.s)


# ---------------------------------------------------------------------------
# functional families
# ---------------------------------------------------------------------------


def _disk_factor(kn: np.ndarray, radius: float) -> np.ndarray:
    """Average of exp(ik·x) over a disk centred at 0: 2 J1(|k|r) / (|k|r)."""
    x = kn * radius
    out = np.ones_like(x)
    nz = x > 0
    out[nz] = 2.0 * scipy.special.j1(x[nz]) / x[nz]
    return out


@dataclass(frozen=True, eq=False)
class FunctionalSet:
    """Rows of ``matrix`` are functionals on the coordinates of ``grid``."""

    grid: SpectralGrid
    kind: str
    descriptors: dict
    matrix: np.ndarray = field(repr=False)
    labels: tuple = ()

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(-1, self.grid.n_coords)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"l{j}" for j in range(len(m))))

    def __len__(self) -> int:
        return self.matrix.shape[0]

    # -- constructors -------------------------------------------------------

    @classmethod
    def modes(cls, grid: SpectralGrid, cutoff: float) -> "FunctionalSet":
        """Real and imaginary parts of every Fourier amplitude with |k|² <= cutoff."""
        idx = np.nonzero(grid.coord_ksq <= cutoff)[0]
        m = np.zeros((len(idx), grid.n_coords))
        m[np.arange(len(idx)), idx] = 1.0
        hm = grid.half_modes
        labels = tuple(
            f"{'re' if i % 2 == 0 else 'im'}({hm[i // 2][0]},{hm[i // 2][1]})" for i in idx
        )
        return cls(grid, "modes", {"cutoff": float(cutoff)}, m, labels)

    @classmethod
    def volume_averages(cls, grid: SpectralGrid, centers: Sequence[Sequence[float]],
                        radius: float) -> "FunctionalSet":
        """Both velocity components averaged over disks of the given radius."""
        if not 0 < radius < math.pi:
            raise ConfigurationError("averaging radius must lie in (0, π)")
        centers = np.atleast_2d(np.asarray(centers, float))
        hm = grid.half_modes
        kn = np.sqrt((hm**2).sum(axis=1))
        disk = _disk_factor(kn, radius)
        pol = grid.polarization[:, grid.half_index[0], grid.half_index[1]]  # (2, M)
        rows, labels = [], []
        for c in centers:
            phase = np.exp(1j * (hm @ c)) * disk
            for comp in range(2):
                # coordinate (Re) -> field with c_k = 1/_COORD, (Im) -> c_k = i/_COORD
                val = 2.0 * pol[comp] * phase / _COORD
                row = np.empty(grid.n_coords)
                row[0::2] = val.real
                row[1::2] = (1j * val).real
                rows.append(row)
                labels.append(f"avg_u{comp + 1}({c[0]:.4g},{c[1]:.4g})")
        desc = {"centers": centers.tolist(), "radius": float(radius)}
        return cls(grid, "volume_averages", desc, np.array(rows), tuple(labels))

    @classmethod
    def uniform_volume_averages(cls, grid: SpectralGrid, per_side: int,
                                radius: float) -> "FunctionalSet":
        """Disks centred on a per_side × per_side uniform lattice of the torus."""
        pts = TWO_PI * (np.arange(per_side) + 0.5) / per_side
        centers = [(a, b) for a in pts for b in pts]
        return cls.volume_averages(grid, centers, radius)

    @classmethod
    def explicit(cls, grid: SpectralGrid, matrix: np.ndarray) -> "FunctionalSet":
        return cls(grid, "explicit_matrix", {}, matrix)

    @classmethod
    def empty(cls, grid: SpectralGrid) -> "FunctionalSet":
        return cls(grid, "modes", {"cutoff": 0.0}, np.zeros((0, grid.n_coords)))

    def on_grid(self, grid: SpectralGrid) -> "FunctionalSet":
        """The same functionals expressed on another truncation."""
        if grid == self.grid:
            return self
        if self.kind == "modes":
            return FunctionalSet.modes(grid, self.descriptors["cutoff"])
        if self.kind == "volume_averages":
            return FunctionalSet.volume_averages(grid, self.descriptors["centers"],
                                                 self.descriptors["radius"])
        raise ConfigurationError("explicit functional matrices are tied to their grid")

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, u: SpectralField) -> np.ndarray:
        if u.grid != self.grid:
            raise ConfigurationError("grid mismatch between functionals and field")
        return self.matrix @ u.coords()

    def evaluate_coeffs(self, c: np.ndarray) -> np.ndarray:
        """Batched evaluation on coefficient arrays of shape (..., N, N)."""
        return coeffs_to_coords(c, self.grid) @ self.matrix.T

    def check_rank(self) -> None:
        """Raise :class:`RankDeficiencyError` naming near-dependent rows."""
        if len(self) == 0:
            return
        u, s, _ = np.linalg.svd(self.matrix, full_matrices=False)
        if s[0] == 0.0 or s[-1] / s[0] < RANK_TOL or len(s) < len(self):
            combo = np.abs(u[:, -1])
            rows = [int(i) for i in np.nonzero(combo > 1e-3 * combo.max())[0]]
            names = [self.labels[i] for i in rows]
            raise RankDeficiencyError(
                f"functionals are numerically dependent (σ_min/σ_max = "
                f"{s[-1] / s[0] if s[0] else 0.0:.3g}); offending rows: {names}", rows
            )

    def operator_norms_V(self) -> np.ndarray:
        """‖l_j‖ as functionals on (truncated) V."""
        return np.sqrt(np.sum(self.matrix**2 / self.grid.coord_ksq, axis=1))


# ---------------------------------------------------------------------------
# defect computations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DefectReport:
    eps: float
    c_L: float
    truncation: int
    maximizer: SpectralField
    kind: str = ""
    k: int = 0
    c_L_lower: float = 0.0
    witness: SpectralField | None = None

    def csv_row(self) -> dict:
        return {"kind": self.kind, "k": self.k, "eps_L": self.eps, "c_L": self.c_L,
                "truncation": self.truncation}


def _truncation_grid(L: FunctionalSet, truncation: int | None) -> SpectralGrid:
    n = 2 * L.grid.n_max if truncation is None else int(truncation)
    if n < L.grid.n_max:
        raise ConfigurationError("the defect truncation must contain the functional grid")
    return SpectralGrid(n)


def _null_space(m: np.ndarray, n: int) -> np.ndarray:
    if m.shape[0] == 0:
        return np.eye(n)
    return scipy.linalg.null_space(m)


def _max_rayleigh(dx: np.ndarray, dy: np.ndarray, basis: np.ndarray) -> tuple[float, np.ndarray]:
    """max ‖w‖²_Y / ‖w‖²_X over w in span(basis)."""
    a = basis.T @ (dy[:, None] * basis)
    b = basis.T @ (dx[:, None] * basis)
    vals, vecs = scipy.linalg.eigh(a, b)
    return float(vals[-1]), basis @ vecs[:, -1]


def completeness_defect(L: FunctionalSet, pair: SpacePair = SpacePair(),
                        truncation: int | None = None) -> DefectReport:
    """ε_L(X, Y) on the truncation |k|_∞ <= truncation (default twice the grid)."""
    L.check_rank()
    g = _truncation_grid(L, truncation)
    Lt = L.on_grid(g)
    dx, dy = pair.weights(g)
    basis = _null_space(Lt.matrix, g.n_coords)
    val, w = _max_rayleigh(dx, dy, basis)
    w = w / math.sqrt(np.sum(dx * w**2))
    eps = math.sqrt(max(val, 0.0))
    c_L = _defect_constant_bound(Lt, dx, dy)
    return DefectReport(eps, c_L, g.n_max, SpectralField.from_coords(g, w), L.kind, len(L))


def _right_inverse(m: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """X-minimal right inverse R = D⁻¹Lᵀ(L D⁻¹ Lᵀ)⁻¹, so that R L is X-orthogonal."""
    dinv_lt = m.T / dx[:, None]
    return dinv_lt @ np.linalg.inv(m @ dinv_lt)


def _defect_constant_bound(Lt: FunctionalSet, dx: np.ndarray, dy: np.ndarray) -> float:
    """Certified C with ‖u‖_Y <= ε‖u‖_X + C max_j |l_j(u)| on the truncation.

    Split u = n + R L u with n the X-orthogonal projection onto ker L; then
    ‖n‖_Y <= ε‖n‖_X <= ε‖u‖_X and ‖R L u‖_Y <= ‖R‖_{2→Y} √k max_j |l_j(u)|.
    """
    k = len(Lt)
    if k == 0:
        return 0.0
    r = _right_inverse(Lt.matrix, dx)
    norm_2y = float(np.linalg.norm(np.sqrt(dy)[:, None] * r, 2))
    return math.sqrt(k) * norm_2y


def defect_constant(L: FunctionalSet, eps: float, pair: SpacePair = SpacePair(),
                    truncation: int | None = None, n_samples: int = 2000,
                    rng: np.random.Generator | None = None) -> DefectReport:
    """Certified constant of the defect inequality plus a sampled lower bound.

    The certificate is the projection bound of :func:`_defect_constant_bound`;
    the lower bound maximises (‖u‖_Y - ε‖u‖_X)/max_j|l_j(u)| over random
    unit fields followed by a coordinate-free local refinement.
    """
    L.check_rank()
    g = _truncation_grid(L, truncation)
    Lt = L.on_grid(g)
    dx, dy = pair.weights(g)
    c_up = _defect_constant_bound(Lt, dx, dy)
    if len(Lt) == 0:
        zero = SpectralField.zeros(g)
        return DefectReport(eps, 0.0, g.n_max, zero, L.kind, 0, 0.0, zero)
    rng = np.random.default_rng(0) if rng is None else rng
    r = _right_inverse(Lt.matrix, dx)

    def ratio(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        ny = np.sqrt(np.sum(dy * x**2, axis=1))
        nx = np.sqrt(np.sum(dx * x**2, axis=1))
        lv = np.max(np.abs(x @ Lt.matrix.T), axis=1)
        return (ny - eps * nx) / np.maximum(lv, 1e-300)

    # candidates: random fields and fields built from the range of R
    x = rng.standard_normal((n_samples, g.n_coords)) / np.sqrt(dx)
    y = rng.standard_normal((n_samples, len(Lt)))
    x = np.vstack([x, y @ r.T, (y @ r.T) + 0.1 * x])
    vals = ratio(x)
    best = x[int(np.argmax(vals))].copy()
    best_val = float(vals.max())
    step = 0.1
    for _ in range(200):
        trial = best + step * rng.standard_normal(g.n_coords) * np.sqrt(np.sum(dx * best**2) / g.n_coords / dx)
        tv = float(ratio(trial)[0])
        if tv > best_val:
            best, best_val = trial, tv
        else:
            step *= 0.97
    best = best / math.sqrt(np.sum(dx * best**2))
    witness = SpectralField.from_coords(g, best)
    return DefectReport(eps, c_up, g.n_max, witness, L.kind, len(L), max(best_val, 0.0), witness)


def c_delta_L(L: FunctionalSet, eps: float, delta: float = 0.1,
              truncation: int | None = None) -> float:
    """Constant C with ‖w‖²_V >= (1+δ)⁻¹ε⁻²‖w‖²_H - C max_j |l_j(w)|².

    With α = (1+δ)⁻¹ε⁻², the best constant for the Euclidean norm of
    (l_j(w))_j is the largest eigenvalue of the Schur complement of
    M = α I - diag(|k|²) with respect to ker L; multiplying by k covers the
    max-norm.  The value is exact on the truncation.
    """
    if not delta > 0:
        raise ConfigurationError("delta must be > 0")
    if len(L) == 0:
        return 0.0
    L.check_rank()
    g = _truncation_grid(L, truncation)
    Lt = L.on_grid(g)
    dx, _ = SpacePair.VH().weights(g)
    alpha = 1.0 / ((1.0 + delta) * eps**2)
    mdiag = alpha - dx
    r = _right_inverse(Lt.matrix, dx)
    n = _null_space(Lt.matrix, g.n_coords)
    mr = mdiag[:, None] * r
    rmr = r.T @ mr
    if n.shape[1] > 0:
        nmn = n.T @ (mdiag[:, None] * n)
        if np.linalg.eigvalsh(nmn).max() >= 0:
            raise ConfigurationError("δ too small: the V/H form is not definite on ker L")
        nmr = n.T @ mr
        s = rmr - nmr.T @ np.linalg.solve(nmn, nmr)
    else:
        s = rmr
    c2 = max(float(np.linalg.eigvalsh(0.5 * (s + s.T)).max()), 0.0)
    return len(L) * c2


def modes_defect_analytic(cutoff: float, pair: SpacePair = SpacePair()) -> float:
    """Closed-form defect of the family {Fourier modes with |k|² <= cutoff}.

    The first excluded eigenvalue μ of -Δ gives 1/√μ for (V, H) and
    (μ/2)^{-s/2} for (H, W_s).
    """
    mu = _next_lattice_norm(cutoff)
    if pair.kind == "VH":
        return 1.0 / math.sqrt(mu)
    return (mu / 2.0) ** (-pair.s / 2.0)


def _next_lattice_norm(cutoff: float) -> int:
    """Smallest k1² + k2² > max(cutoff, 0) over nonzero integer vectors."""
    n = int(math.isqrt(max(int(math.floor(cutoff)), 0))) + 2
    vals = sorted({a * a + b * b for a in range(n + 1) for b in range(n + 1)} - {0})
    return next(v for v in vals if v > cutoff)


# ---------------------------------------------------------------------------
# W space of the squeezing corollary
# ---------------------------------------------------------------------------


def w_norm(u: SpectralField, s: float = 1.0) -> float:
    """‖A^{-s/2} u‖_H."""
    return float(math.sqrt(hs_sq_arr(u.coeffs, -s, u.grid)))


def projector_extension_a0(cutoff: float, s: float = 1.0) -> float:
    """Bound a₀ on the norm of the spectral projector P (|k|² <= cutoff) from W_s to H.

    ‖P u‖_H <= a^{s/2} ‖A^{-s/2} u‖_H for any a at least the largest retained
    Stokes eigenvalue; the first excluded eigenvalue a_{k+1} = μ/2 is used.
    """
    return (_next_lattice_norm(cutoff) / 2.0) ** (s / 2.0)
