"""
Scenario files (TOML) and their translation into model objects.

A scenario has the blocks ``model``, ``noise``, ``functionals``, ``run``,
``constants`` and ``output``; see the README for a complete example.  Every
stochastic ingredient takes an explicit seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .ensemble import random_field
from .functionals import FunctionalSet, SpacePair
from .noise import CovarianceSpec
from .rds import NSEParams
from .spectral import ConfigurationError, SpectralField, SpectralGrid


def _require(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigurationError(f"missing required field '{where}.{key}'")
    return block[key]


def _number(block: dict, key: str, where: str, default=None, positive=False, nonneg=False):
    if key not in block:
        if default is None:
            raise ConfigurationError(f"missing required field '{where}.{key}'")
        return default
    val = block[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ConfigurationError(f"field '{where}.{key}' must be a finite number, got {val!r}")
    if positive and not val > 0:
        raise ConfigurationError(f"field '{where}.{key}' must be > 0, got {val}")
    if nonneg and not val >= 0:
        raise ConfigurationError(f"field '{where}.{key}' must be >= 0, got {val}")
    return val


def _int(block: dict, key: str, where: str, default=None, minimum=None):
    if key not in block:
        if default is None:
            raise ConfigurationError(f"missing required field '{where}.{key}'")
        return default
    val = block[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigurationError(f"field '{where}.{key}' must be an integer, got {val!r}")
    if minimum is not None and val < minimum:
        raise ConfigurationError(f"field '{where}.{key}' must be >= {minimum}, got {val}")
    return val


def _modes(entries, where: str) -> dict:
    out = {}
    for n, e in enumerate(entries):
        if not isinstance(e, dict) or "k" not in e or "amp" not in e:
            raise ConfigurationError(f"'{where}[{n}]' needs fields k = [k1, k2] and amp")
        k = tuple(int(x) for x in e["k"])
        amp = e["amp"]
        out[k] = complex(amp[0], amp[1]) if isinstance(amp, list) else complex(amp)
    return out


@dataclass(eq=False)
class Scenario:
    raw: dict
    grid: SpectralGrid
    params: NSEParams
    cov: CovarianceSpec
    seed: int
    functionals: FunctionalSet | None
    pair: SpacePair
    truncation: int
    run: dict
    constants: dict
    out_dir: Path
    extra: dict = field(default_factory=dict)

    @property
    def nu(self) -> float:
        return self.params.nu

    @property
    def kappa(self) -> float:
        return self.params.kappa


def load_scenario(path: str | Path) -> Scenario:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"scenario file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"scenario file {path} is not valid TOML: {exc}") from None
    return scenario_from_dict(raw, base_dir=Path(path).parent)


def scenario_from_dict(raw: dict, base_dir: Path | None = None) -> Scenario:
    model = _require(raw, "model", "scenario")
    noise = _require(raw, "noise", "scenario")
    n_max = _int(model, "n_max", "model", minimum=2)
    grid = SpectralGrid(n_max)
    nu = _number(model, "nu", "model", positive=True)
    kappa = _number(model, "kappa", "model", nonneg=True)
    forcing = SpectralField.from_modes(grid, _modes(model.get("forcing", []), "model.forcing"))
    params = NSEParams(nu, kappa, forcing)

    seed = _int(noise, "seed", "noise", minimum=0)
    sigma2 = _number(noise, "sigma2", "noise", nonneg=True)
    if sigma2 == 0:
        cov = CovarianceSpec.zero(grid)
    else:
        decay_p = _number(noise, "decay_p", "noise")
        max_mode = noise.get("max_mode")
        cov = CovarianceSpec.power_law(grid, sigma2, decay_p, max_mode)

    fblock = raw.get("functionals", {})
    fam = None
    pair = SpacePair.VH()
    truncation = 2 * n_max
    if fblock:
        kind = _require(fblock, "kind", "functionals")
        if kind == "modes":
            fam = FunctionalSet.modes(grid, _number(fblock, "cutoff", "functionals", nonneg=True))
        elif kind == "volume_averages":
            radius = _number(fblock, "radius", "functionals", positive=True)
            if "centers" in fblock:
                fam = FunctionalSet.volume_averages(grid, fblock["centers"], radius)
            else:
                fam = FunctionalSet.uniform_volume_averages(
                    grid, _int(fblock, "per_side", "functionals", minimum=1), radius)
        else:
            raise ConfigurationError(f"field 'functionals.kind' has unknown value {kind!r}")
        pair_kind = fblock.get("pair", "VH")
        pair = SpacePair(pair_kind, float(fblock.get("s", 1.0)))
        factor = _number(fblock, "truncation_factor", "functionals", default=2.0, positive=True)
        truncation = max(n_max, int(round(factor * n_max)))

    run = dict(raw.get("run", {}))
    run.setdefault("t_end", 1.0)
    run.setdefault("dt", 1e-3)
    for key in ("t_end", "dt"):
        _number(run, key, "run", positive=True)
    run.setdefault("eps_margin", 0.1)
    run.setdefault("delta", 0.1)
    run.setdefault("m_window", 1.0)
    run.setdefault("n_pairs", 16)
    run.setdefault("n_ic", 4)
    run.setdefault("n_paths", 16)
    run.setdefault("delta_level", 1e-3)
    run.setdefault("exceedance_level", 0.05)
    run.setdefault("ic_seed", seed)
    constants = dict(raw.get("constants", {}))
    constants.setdefault("a0", 1.0)
    constants.setdefault("a1", 1.0)
    out_dir = Path(raw.get("output", {}).get("dir", "out"))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    return Scenario(raw, grid, params, cov, seed, fam, pair, truncation, run, constants, out_dir)


def initial_field(sc: Scenario) -> SpectralField:
    """Initial condition from ``run.initial`` (modes list or a seeded random field)."""
    init = sc.run.get("initial", {"kind": "zero"})
    kind = init.get("kind", "zero")
    if kind == "zero":
        return SpectralField.zeros(sc.grid)
    if kind == "modes":
        return SpectralField.from_modes(sc.grid, _modes(init.get("modes", []), "run.initial.modes"))
    if kind == "random":
        seed = _int(init, "seed", "run.initial", minimum=0)
        h = _number(init, "h_norm", "run.initial", default=1.0, positive=True)
        return SpectralField(sc.grid, random_field(sc.grid, np.random.default_rng(seed), h))
    raise ConfigurationError(f"field 'run.initial.kind' has unknown value {kind!r}")
