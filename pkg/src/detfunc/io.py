"""
Plain-text outputs: field snapshots, CSV tables, NDJSON streams and a
manifest of content hashes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .spectral import ConfigurationError, SpectralField, SpectralGrid


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_snapshot(path: str | Path, u: SpectralField, time: float) -> None:
    """Header lines (n_max, period, timestamp) followed by k1,k2,re,im rows."""
    g = u.grid
    lines = [f"# n_max={g.n_max}", f"# period={_fmt(g.domain_period)}", f"# time={_fmt(time)}",
             "k1,k2,re,im"]
    for i in range(g.size):
        for j in range(g.size):
            k1, k2 = int(g.k1[i, j]), int(g.k2[i, j])
            if k1 == 0 and k2 == 0:
                continue
            c = u.coeffs[i, j]
            lines.append(f"{k1},{k2},{_fmt(c.real)},{_fmt(c.imag)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_snapshot(path: str | Path) -> tuple[SpectralField, float]:
    header: dict[str, str] = {}
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            header[key.strip()] = val.strip()
        elif line and not line.startswith("k1"):
            rows.append(line.split(","))
    try:
        g = SpectralGrid(int(header["n_max"]))
        t = float(header["time"])
    except KeyError as exc:
        raise ConfigurationError(f"snapshot header lacks {exc.args[0]!r}") from None
    c = np.zeros((g.size, g.size), complex)
    for k1, k2, re, im in rows:
        i, j = g.index_of((int(k1), int(k2)))
        c[i, j] = complex(float(re), float(im))
    return SpectralField(g, c), t


def write_csv(path: str | Path, rows: Iterable[Mapping], fieldnames: list[str] | None = None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return _fmt(v) if math.isfinite(v) else str(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, complex):
        return [v.real, v.imag]
    return v


def write_ndjson(path: str | Path, records: Iterable[Mapping]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(_jsonable(r), sort_keys=True) + "\n")


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(config: Mapping) -> str:
    blob = json.dumps(_jsonable(dict(config)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(out_dir: str | Path, config: Mapping, command: str, files: list[str],
                   extra: Mapping | None = None) -> str:
    """Write manifest.json (config hash, per-file hashes); return its own hash."""
    out = Path(out_dir)
    from . import __version__

    manifest = {
        "command": command,
        "version": __version__,
        "config_sha256": config_hash(config),
        "files": {name: sha256_file(out / name) for name in sorted(files)},
    }
    if extra:
        manifest["summary"] = _jsonable(dict(extra))
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    (out / "manifest.json").write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()
