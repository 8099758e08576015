import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.errors import ConfigError, InputError
from app.kantorovich import DiscreteMeasure
from app.models import CertificateReport, MapMethod, RunConfig
from app.monge import MongeMap
from app.serialization import (
    format_float,
    load_config,
    load_measure,
    map_record,
    to_json,
    write_map_csv,
    write_trajectories_csv,
)


class TestJson:
    """Test suite for the deterministic JSON writer"""

    def test_float_format(self):
        """Floats use 17 significant digits and non-finite values become null"""
        assert format_float(0.1) == "0.10000000000000001"
        assert format_float(float("nan")) == "null"
        assert format_float(float("inf")) == "null"

    @given(st.floats(allow_nan=False, allow_infinity=False))
    @settings(max_examples=200)
    def test_float_round_trip(self, value):
        """The fixed format reproduces the exact double"""
        assert float(format_float(value)) == value

    def test_sorted_keys_and_arrays(self):
        """Keys are sorted and numpy values are plain JSON"""
        text = to_json({"b": np.array([1.0, 2.5]), "a": np.int64(3), "c": {"z": None, "y": True}})
        assert text.index('"a"') < text.index('"b"') < text.index('"c"')
        assert json.loads(text) == {"a": 3, "b": [1.0, 2.5], "c": {"y": True, "z": None}}

    def test_models_and_enums(self):
        """SQLModel records serialize through their fields"""
        text = to_json(CertificateReport.of("gap", True, {"gap": 0.0}))
        assert json.loads(text)["status"] == "PASS"

    def test_deterministic(self):
        """Equal values give identical text"""
        value = {"x": [0.1, 0.2], "y": {"k": 1e-300}}
        assert to_json(value) == to_json(dict(reversed(list(value.items()))))

    def test_floats_round_trip_and_non_finite(self):
        """Floats keep their shortest repr and NaN or infinity become null"""
        text = to_json({"a": 0.1, "b": float("nan"), "c": np.array([np.inf, 1e-300])})
        assert '"a": 0.1,' in text
        assert json.loads(text) == {"a": 0.1, "b": None, "c": [None, 1e-300]}

    def test_paths_and_timestamps(self, tmp_path):
        """Paths and datetimes go through the default hook"""
        stamp = datetime(2024, 1, 2, tzinfo=timezone.utc)
        assert json.loads(to_json({"p": tmp_path, "t": stamp})) == {"p": str(tmp_path), "t": "2024-01-02T00:00:00+00:00"}

    def test_unknown_type(self):
        """Values without a JSON form raise TypeError"""
        with pytest.raises(TypeError):
            to_json({"x": object()})


class TestMeasures:
    """Test suite for measure ingestion"""

    def test_csv_with_header(self, tmp_path, plane):
        """A header row is skipped"""
        path = tmp_path / "mu.csv"
        path.write_text("x1,x2,weight\n0,0,0.25\n1,0,0.75\n", encoding="utf-8")
        mu = load_measure(path, plane)
        np.testing.assert_allclose(mu.weights, [0.25, 0.75])
        np.testing.assert_allclose(mu.support, [[0, 0], [1, 0]])

    def test_renormalize(self, tmp_path, plane):
        """Weights off by more than 1e-12 are renormalized"""
        path = tmp_path / "mu.csv"
        path.write_text("0,0,1\n1,0,3\n", encoding="utf-8")
        np.testing.assert_allclose(load_measure(path, plane).weights, [0.25, 0.75])

    def test_json(self, tmp_path, plane):
        """JSON measures list coords and weights"""
        path = tmp_path / "mu.json"
        path.write_text(json.dumps([{"coords": [0, 1], "weight": 0.5}, {"coords": [1, 1], "weight": 0.5}]))
        assert load_measure(path, plane).size == 2

    def test_wrong_dimension(self, tmp_path, plane):
        """Rows must carry one coordinate per manifold dimension"""
        path = tmp_path / "mu.csv"
        path.write_text("0,0,0,1\n", encoding="utf-8")
        with pytest.raises(InputError):
            load_measure(path, plane)

    @pytest.mark.parametrize("content", ["0,0,1\nfoo,1,1\n", "0,0,1\n1,1\n", "0,0,-1\n1,1,2\n", ""])
    def test_malformed(self, tmp_path, plane, content):
        """Non-numeric, ragged, negative and empty files are rejected"""
        path = tmp_path / "mu.csv"
        path.write_text(content, encoding="utf-8")
        with pytest.raises(InputError):
            load_measure(path, plane)

    def test_missing_file(self, tmp_path, plane):
        """Missing files are input errors"""
        with pytest.raises(InputError):
            load_measure(tmp_path / "absent.csv", plane)


class TestConfig:
    """Test suite for run configuration loading"""

    def test_defaults(self, make_config):
        """A minimal config validates with defaults"""
        config = load_config(make_config())
        assert isinstance(config, RunConfig)
        assert config.t == 1.0
        assert config.solver.lp_tolerance == 1e-9

    def test_measure_paths_resolved(self, make_config, tmp_path):
        """Measure files resolve relative to the config file"""
        config = load_config(make_config([[0, 0]], [[1, 1]]))
        assert config.measures.source == str(tmp_path / "mu.csv")

    def test_measure_files_reload_exactly(self, make_config, plane):
        """Measure files written for a config reload with their exact weights"""
        points = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
        config = load_config(make_config(points, points))
        mu = load_measure(Path(config.measures.source), plane)
        assert mu.weights.tolist() == [1.0 / 3.0] * 3
        assert mu.support.tolist() == points

    def test_offending_key(self, make_config):
        """Validation errors name the key path"""
        with pytest.raises(ConfigError) as error:
            load_config(make_config(solver={"lp_tolerance": -1.0}))
        assert error.value.key == "solver.lp_tolerance"

    def test_unknown_key(self, make_config):
        """Unknown keys are rejected"""
        with pytest.raises(ConfigError) as error:
            load_config(make_config(solver={"lp_tol": 1.0}))
        assert error.value.key == "solver.lp_tol"

    def test_missing_measure(self, make_config):
        """Referenced measure files must exist"""
        with pytest.raises(ConfigError) as error:
            load_config(make_config(measures={"source": "nowhere.csv"}))
        assert error.value.key == "measures.source"

    def test_invalid_json(self, tmp_path):
        """Config files must be JSON"""
        path = tmp_path / "run.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError) as error:
            load_config(path)
        assert error.value.key == "config"


class TestCsvExport:
    """Test suite for CSV exports"""

    def test_map_csv(self, tmp_path, plane):
        """Map rows list sources, images and residuals"""
        mu = DiscreteMeasure.on(plane, [[0, 0], [1, 0]])
        monge = MongeMap(mu.support, mu.support + 1.0, MapMethod.PLAN_GRAPH, np.zeros(2))
        lines = write_map_csv(tmp_path / "map.csv", monge).read_text().splitlines()
        assert lines[0] == "source_1,source_2,image_1,image_2,residual"
        assert lines[2] == "1,0,2,1,0"
        assert map_record(monge)["method"] == MapMethod.PLAN_GRAPH

    def test_trajectories_csv(self, tmp_path):
        """Trajectory rows are grouped by atom"""
        positions = np.array([[[0.0], [1.0]], [[0.5], [1.5]]])
        lines = write_trajectories_csv(tmp_path / "t.csv", np.array([0.0, 0.5]), positions).read_text().splitlines()
        assert lines == ["atom,s,coord_1", "0,0,0", "0,0.5,0.5", "1,0,1", "1,0.5,1.5"]
