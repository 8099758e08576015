import json
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pytest

from app.kantorovich import DiscreteMeasure
from app.lagrangian import PowerMetricLagrangian
from app.manifold import EuclideanSpace


@pytest.fixture
def plane() -> EuclideanSpace:
    return EuclideanSpace(2)


@pytest.fixture
def line() -> EuclideanSpace:
    return EuclideanSpace(1)


@pytest.fixture
def quadratic(plane) -> PowerMetricLagrangian:
    return PowerMetricLagrangian(plane, 2.0)


@pytest.fixture
def quadratic_line(line) -> PowerMetricLagrangian:
    return PowerMetricLagrangian(line, 2.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def shift_instance(line) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    """Uniform grid on [0, 1] and the same grid moved by +1"""
    grid = (np.arange(8) + 0.5) / 8
    return DiscreteMeasure.on(line, grid[:, None]), DiscreteMeasure.on(line, 1.0 + grid[:, None])


@pytest.fixture
def tie_instance(plane) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    """Two atoms on each axis: every coupling has the same cost"""
    mu = DiscreteMeasure.on(plane, [[0.2, 0.0], [-0.2, 0.0]])
    nu = DiscreteMeasure.on(plane, [[0.0, 0.2], [0.0, -0.2]])
    return mu, nu


def write_measure(path: Path, coords, weights=None) -> Path:
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    weights = np.full(len(coords), 1.0 / len(coords)) if weights is None else np.asarray(weights, dtype=float)
    lines = ["x" + ",x".join(str(k) for k in range(1, coords.shape[1] + 1)) + ",weight"]
    lines += [",".join(repr(float(c)) for c in row) + f",{float(w)!r}" for row, w in zip(coords, weights)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def make_config(tmp_path) -> Callable[..., Path]:
    """Writes a run config (and optional measure CSVs) into tmp_path"""

    def make(source=None, target=None, **overrides: Any) -> Path:
        config: dict[str, Any] = {
            "manifold": {"kind": "euclidean", "dim": 2},
            "lagrangian": {"kind": "power_metric", "r": 2},
            "t": 1.0,
            "seed": 0,
            "output": str(tmp_path / "out"),
        }
        if source is not None:
            write_measure(tmp_path / "mu.csv", source)
            write_measure(tmp_path / "nu.csv", target)
            config["measures"] = {"source": "mu.csv", "target": "nu.csv"}
        config.update(overrides)
        path = tmp_path / "run.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        return path

    return make
