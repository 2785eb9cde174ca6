"""File formats: annotation CSV, key=value config, draw files, manifest.

Annotation CSV needs a header with ``expert_id,x_px,y_px,diameter_px``
(extra columns pass through untouched); diameters are converted to the
natural log scale on ingestion and annotator ids are mapped to dense
indices in first-appearance order.  Draw files are line-oriented text
with a header carrying the item count; configs are flat ``key = value``
text with a named preset hook.  All errors carry line numbers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ChainConfig, Hyperparams, preset_hyperparams, PRESETS
from .mixture import Annotation
from .sampler import Draw
from .simulation import SimConfig


class DataError(Exception):
    """Malformed input data or configuration."""


class UsageError(Exception):
    """Bad command line or impossible request."""


REQUIRED_COLUMNS = ("expert_id", "x_px", "y_px", "diameter_px")


def parse_crater_csv(path, truth_column: str | None = None):
    """Read annotations from CSV.

    Returns ``(annotations, family_names)`` where each annotation's
    family is the dense index of its ``expert_id`` in first-appearance
    order, or ``(annotations, family_names, truth)`` when
    ``truth_column`` is given.  Row order is preserved.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    annotations: list[Annotation] = []
    names: list[str] = []
    fam_index: dict[str, int] = {}
    truth: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        if truth_column is not None and truth_column not in reader.fieldnames:
            raise DataError(f"{path}: missing truth column {truth_column!r}")
        for lineno, row in enumerate(reader, start=2):
            expert = row["expert_id"]
            if expert is None or expert == "":
                raise DataError(f"{path}:{lineno}: empty expert_id")
            try:
                x = float(row["x_px"])
                y = float(row["y_px"])
                diam = float(row["diameter_px"])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
            if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(diam)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            if diam <= 0:
                raise DataError(f"{path}:{lineno}: non-positive diameter {diam}")
            if expert not in fam_index:
                fam_index[expert] = len(names)
                names.append(expert)
            annotations.append(Annotation(fam_index[expert], x, y, math.log(diam)))
            if truth_column is not None:
                try:
                    truth.append(int(row[truth_column]))
                except (TypeError, ValueError):
                    raise DataError(
                        f"{path}:{lineno}: non-integer value in {truth_column!r}"
                    ) from None
    if not annotations:
        raise DataError(f"{path}: no data rows")
    if truth_column is not None:
        return annotations, names, tuple(truth)
    return annotations, names


def write_crater_csv(path, annotations, family_names=None, truth=None) -> None:
    """Write annotations (diameters back on the original scale)."""
    fields = list(REQUIRED_COLUMNS)
    if truth is not None:
        fields.append("true_cluster")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for i, ann in enumerate(annotations):
            name = family_names[ann.family] if family_names else str(ann.family)
            row = [name, repr(ann.x), repr(ann.y), repr(math.exp(ann.ld))]
            if truth is not None:
                row.append(truth[i])
            writer.writerow(row)


# ----------------------------------------------------------------------
# configuration files

_HYPER_KEYS = {
    "kappa_x": float, "kappa_d": float, "eta_x": float, "eta_d": float,
    "tau_x": float, "tau_d": float, "a_lambda": float, "b_lambda": float,
    "mu0": tuple, "sigma0_diag": tuple, "a_alpha": float, "b_alpha": float,
    "tau_alpha": float, "s_proposal": tuple, "rho": float,
}
_CHAIN_KEYS = {"scans": int, "burn_in": int, "thin": int, "seed": int, "chains": int}
_SIM_KEYS = {
    "k_true": int, "j_experts": int, "bounds_x": tuple, "bounds_y": tuple,
    "a_ld": float, "b_ld": float, "detect_probs": tuple, "false_rates": tuple,
    "noise_diag": tuple, "false_mode": str,
}


@dataclass(frozen=True)
class LoadedConfig:
    hyper: Hyperparams
    chain: ChainConfig
    sim: SimConfig
    num_chains: int
    preset: str


def _parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is float:
            return float(raw)
        if kind is int:
            return int(raw)
        if kind is tuple:
            return tuple(float(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise DataError(f"config key {key!r}: cannot parse {raw!r}") from None


def load_config(path=None, text: str | None = None) -> LoadedConfig:
    """Parse a flat ``key = value`` configuration.

    An empty file yields the full-image defaults.  ``preset`` may name
    "full", "reduced", or "simulation" to re-center the priors; explicit
    keys override the preset.  Unknown keys, malformed values, and
    out-of-range settings are rejected.
    """
    if text is None:
        if path is None:
            text = ""
        else:
            p = Path(path)
            if not p.exists():
                raise DataError(f"{p}: no such file")
            text = p.read_text()
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise DataError(f"config line {lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in entries:
            raise DataError(f"config line {lineno}: duplicate key {key!r}")
        entries[key] = raw

    preset = entries.pop("preset", "full").strip()
    if preset not in PRESETS:
        raise DataError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    hyper_kw = {}
    chain_kw = {}
    sim_kw = {}
    for key, raw in entries.items():
        if key in _HYPER_KEYS:
            if key == "rho" and raw.strip().lower() in ("inf", "infinity"):
                hyper_kw[key] = math.inf
            else:
                hyper_kw[key] = _parse_value(key, raw, _HYPER_KEYS[key])
        elif key in _CHAIN_KEYS:
            chain_kw[key] = _parse_value(key, raw, _CHAIN_KEYS[key])
        elif key in _SIM_KEYS:
            sim_kw[key] = _parse_value(key, raw, _SIM_KEYS[key])
        else:
            raise DataError(f"unknown config key {key!r}")

    try:
        hyper = preset_hyperparams(preset).with_overrides(**hyper_kw)
        num_chains = int(chain_kw.pop("chains", 1))
        if num_chains < 1:
            raise ValueError("chains must be >= 1")
        chain = ChainConfig(
            num_scans=chain_kw.get("scans", 10_000),
            burn_in_scans=chain_kw.get("burn_in", 5_000),
            thin_every=chain_kw.get("thin", 10),
            seed=chain_kw.get("seed", 0),
            hyper=hyper,
        )
        if "noise_diag" in sim_kw:
            diag = sim_kw.pop("noise_diag")
            sim_kw["noise_cov"] = tuple(
                tuple(diag[r] if r == c else 0.0 for c in range(3)) for r in range(3)
            )
        if "detect_probs" in sim_kw or "j_experts" in sim_kw:
            pass  # validated by SimConfig below
        sim = SimConfig(**{
            k: (int(v) if k in ("k_true", "j_experts") else v) for k, v in sim_kw.items()
        })
    except (ValueError, TypeError) as exc:
        raise DataError(f"invalid configuration: {exc}") from None
    return LoadedConfig(hyper=hyper, chain=chain, sim=sim, num_chains=num_chains, preset=preset)


# ----------------------------------------------------------------------
# draw files

_DRAWS_MAGIC = "# dfcrp draws v1"


def write_draws(draws, path, n_items: int) -> None:
    """One line per draw: chain id, scan index, concentration (17
    significant digits), then the canonicalized labels."""
    with open(path, "w") as fh:
        fh.write(f"{_DRAWS_MAGIC} n={n_items}\n")
        fh.write("# chain_id scan_index alpha labels...\n")
        for d in draws:
            if len(d.labels) != n_items:
                raise ValueError(
                    f"draw has {len(d.labels)} labels, expected {n_items}"
                )
            labels = " ".join(str(int(v)) for v in d.labels)
            fh.write(f"{d.chain_id} {d.scan_index} {format(d.alpha, '.17g')} {labels}\n")


def read_draws(path):
    """Inverse of :func:`write_draws`; returns ``(draws, n_items)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    draws: list[Draw] = []
    n_items = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if lineno == 1:
                if not line.startswith(_DRAWS_MAGIC) or "n=" not in line:
                    raise DataError(f"{path}:1: not a draw file")
                try:
                    n_items = int(line.split("n=", 1)[1])
                except ValueError:
                    raise DataError(f"{path}:1: bad item count") from None
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 + n_items:
                raise DataError(
                    f"{path}:{lineno}: expected {3 + n_items} fields, got {len(parts)}"
                )
            try:
                chain_id = int(parts[0])
                scan_index = int(parts[1])
                alpha = float(parts[2])
                labels = tuple(int(v) for v in parts[3:])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed draw record") from None
            draws.append(Draw(chain_id, scan_index, alpha, labels))
    if n_items is None:
        raise DataError(f"{path}: empty file")
    return draws, n_items


# ----------------------------------------------------------------------
# manifest and table output

def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def build_manifest(
    *, command: str, seed: int, num_chains: int, input_path=None,
    n_annotations=None, num_families=None, config: LoadedConfig | None = None,
    outputs=(), extra=None,
) -> dict:
    manifest = {
        "software": "dfcrp",
        "version": __version__,
        "command": command,
        "seed": int(seed),
        "num_chains": int(num_chains),
        "outputs": [str(p) for p in outputs],
    }
    if input_path is not None:
        manifest["input"] = str(input_path)
        manifest["input_sha256"] = sha256_file(input_path)
    if n_annotations is not None:
        manifest["n_annotations"] = int(n_annotations)
    if num_families is not None:
        manifest["num_families"] = int(num_families)
    if config is not None:
        manifest["preset"] = config.preset
        manifest["hyper"] = asdict(config.hyper)
        manifest["chain"] = {
            "num_scans": config.chain.num_scans,
            "burn_in_scans": config.chain.burn_in_scans,
            "thin_every": config.chain.thin_every,
        }
    if extra:
        manifest.update(extra)
    return manifest


def write_json(obj, path) -> None:
    def default(v):
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        if isinstance(v, float) and math.isinf(v):
            return "inf"
        raise TypeError(f"not JSON serializable: {type(v)}")

    with open(path, "w") as fh:
        json.dump(_sanitize(obj), fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


def write_table_csv(path, rows, fieldnames) -> None:
    """CSV with a fixed column order; floats via repr for round-trips."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            out = []
            for name in fieldnames:
                v = row[name]
                if isinstance(v, float):
                    out.append(repr(v))
                else:
                    out.append(v)
            writer.writerow(out)
