"""Config and measure ingestion plus deterministic report writers.

JSON reports go through json.dumps with sorted keys and the shortest
round-trip float repr, so equal inputs give byte-identical files. CSV
exports use a fixed 17-significant-digit format.
"""

import csv
import json
import logging
import math
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import ValidationError
from sqlmodel import SQLModel

from app.errors import ConfigError, InputError
from app.kantorovich import DiscreteMeasure, DualPotentials, TransportPlan
from app.manifold import ManifoldModel
from app.models import RunConfig
from app.monge import MongeMap

logger = logging.getLogger(__name__)


def format_float(value: float) -> str:
    if not math.isfinite(value):
        return "null"
    return format(value, ".17g")


def _plain(value: Any) -> Any:
    if isinstance(value, SQLModel):
        return _plain(value.model_dump())
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return _plain(value.item())
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _default(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, datetime):
        return value.isoformat()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def to_json(value: Any, indent: int = 2) -> str:
    return json.dumps(_plain(value), sort_keys=True, indent=indent, allow_nan=False, default=_default) + "\n"


def write_json(path: Path, value: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(value), encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def load_config(path: Path) -> RunConfig:
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist", key="config")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}", key="config")
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"{key}: {first['msg']}", key=key)
    for name in ("source", "target"):
        reference = getattr(config.measures, name)
        if reference is None:
            continue
        resolved = Path(reference)
        if not resolved.is_absolute():
            resolved = path.parent / resolved
        if not resolved.is_file():
            raise ConfigError(f"measure file {reference} does not exist", key=f"measures.{name}")
        setattr(config.measures, name, str(resolved))
    return config


def _normalized(weights: np.ndarray, path: Path) -> np.ndarray:
    total = float(np.sum(weights))
    if total <= 0:
        raise InputError(f"{path}: measure weights must be positive")
    if abs(total - 1.0) > 1e-12:
        logger.warning("%s: weights sum to %.17g, renormalizing", path, total)
        return weights / total
    return weights


def _read_csv_rows(path: Path) -> list[list[float]]:
    rows: list[list[float]] = []
    with path.open(newline="", encoding="utf-8") as handle:
        for number, row in enumerate(csv.reader(handle)):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                if number == 0 and not rows:
                    continue  # header
                raise InputError(f"{path}:{number + 1}: non-numeric measure row")
    return rows


def load_measure(path: Path, manifold: ManifoldModel) -> DiscreteMeasure:
    """CSV rows ``x1,...,xn,weight`` or a JSON array of {"coords": [...], "weight": w}"""
    if not path.is_file():
        raise InputError(f"measure file {path} does not exist")
    if path.suffix.lower() == ".json":
        try:
            atoms = json.loads(path.read_text(encoding="utf-8"))
            coords = np.array([atom["coords"] for atom in atoms], dtype=float)
            weights = np.array([atom.get("weight", 1.0) for atom in atoms], dtype=float)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise InputError(f"{path}: malformed measure JSON: {e}")
    else:
        rows = _read_csv_rows(path)
        if not rows or len({len(row) for row in rows}) != 1:
            raise InputError(f"{path}: measure rows must be non-empty with equal length")
        table = np.array(rows)
        coords, weights = table[:, :-1], table[:, -1]
    coords = coords.reshape(len(coords), -1)
    if coords.shape[1] != manifold.dim:
        raise InputError(f"{path}: expected {manifold.dim} coordinates per atom, got {coords.shape[1]}")
    if np.any(weights <= 0):
        raise InputError(f"{path}: measure weights must be positive")
    return DiscreteMeasure.on(manifold, coords, _normalized(weights, path))


def plan_record(plan: TransportPlan, cost: Optional[float] = None) -> dict[str, Any]:
    return {
        "shape": list(plan.shape),
        "entries": [{"i": i, "j": j, "mass": mass} for i, j, mass in plan.entries],
        "cost": cost,
    }


def potentials_record(pot: DualPotentials) -> dict[str, Any]:
    return {"convention": "psi(y) - phi(x) <= c(x, y)", "phi": pot.phi, "psi": pot.psi}


def map_record(monge: MongeMap) -> dict[str, Any]:
    return {
        "method": monge.method,
        "sources": monge.sources,
        "images": monge.images,
        "residuals": monge.residuals,
        "split": {str(i): [[j, mass] for j, mass in entries] for i, entries in monge.split.items()},
        "critical": monge.critical,
    }


def write_map_csv(path: Path, monge: MongeMap) -> Path:
    n = monge.sources.shape[1]
    header = [f"source_{k + 1}" for k in range(n)] + [f"image_{k + 1}" for k in range(n)] + ["residual"]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for source, image, residual in zip(monge.sources, monge.images, monge.residuals):
            writer.writerow([format_float(float(value)) for value in (*source, *image, residual)])
    return path


def write_trajectories_csv(path: Path, s_grid: np.ndarray, positions: np.ndarray) -> Path:
    """Rows ``atom,s,coord_1..n`` from positions of shape (len(s_grid), atoms, n)"""
    n = positions.shape[2]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["atom", "s"] + [f"coord_{k + 1}" for k in range(n)])
        for atom in range(positions.shape[1]):
            for k, s in enumerate(s_grid):
                writer.writerow([atom, format_float(float(s))] + [format_float(float(c)) for c in positions[k, atom]])
    return path
