"""Tests for run-config validation."""

import json

import pytest

from torusfill.errors import ConfigError
from torusfill.flow_solver import SolverControls
from torusfill.schemas import Experiment, FieldKind, Scheme, SolverControlsConfig, load_run_config, parse_run_config

UNIT = [[1.0, 0.0], [0.0, 1.0]]


class TestParse:

    def test_minimal_flow(self):
        config = parse_run_config({"experiment": "flow", "gram": UNIT})
        assert config.experiment == Experiment.FLOW
        assert config.n == 3
        assert config.initial_data.kind == FieldKind.CONSTANT
        assert config.solver.scheme == Scheme.IMEX2

    def test_nested_objects(self):
        config = parse_run_config({
            "experiment": "flow",
            "gram": UNIT,
            "initial_data": {"kind": "cosine", "value": 1.0, "amplitude": 0.2, "mode": [0, 1]},
            "solver": {"scheme": "rk4", "psi_tol": 1e-9},
        })
        assert isinstance(config.solver, SolverControlsConfig)
        controls = config.solver.to_controls()
        assert isinstance(controls, SolverControls)
        assert controls.scheme == "rk4"
        assert controls.psi_tol == 1e-9
        assert controls.safety_factor == 0.002

    @pytest.mark.parametrize("data", [
        {"experiment": "flow", "gram": UNIT, "bogus": 1},
        {"experiment": "flow"},
        {"experiment": "flow", "gram": [[1.0]]},
        {"experiment": "flow", "gram": UNIT, "rho_target": 1.0},
        {"experiment": "flow", "gram": UNIT, "resolution": 3},
        {"experiment": "flow", "gram": UNIT, "solver": {"scheme": "euler"}},
        {"experiment": "flow", "gram": UNIT, "initial_data": {"kind": "file"}},
        {"experiment": "flow", "gram": UNIT, "initial_data": {"kind": "random", "amplitude": 1.0}},
        {"experiment": "band", "gram": UNIT, "h_data": {"value": 3.0}},
        {"experiment": "band", "gram": UNIT, "gram_hat": UNIT},
        {"experiment": "bound_check", "gram": UNIT},
        {"experiment": "hm_sweep", "radii": [0.5, 2.0]},
        {"experiment": "sweep"},
        {"experiment": "validate", "n": 2},
    ])
    def test_rejected(self, data):
        with pytest.raises(ConfigError) as info:
            parse_run_config(data)
        assert info.value.exit_code == 3
        assert info.value.details["errors"]

    def test_hm_sweep_needs_no_gram(self):
        config = parse_run_config({"experiment": "hm_sweep", "n": 4})
        assert config.radii == [5.0, 10.0, 20.0, 40.0, 80.0]


class TestLoad:

    def test_round_trip(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"experiment": "bound_check", "gram": UNIT, "H_data": {"value": 2.5}}))
        config = load_run_config(path)
        assert config.H_data.value == 2.5

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.json")

    def test_not_an_object(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{experiment: flow")
        with pytest.raises(ConfigError):
            load_run_config(path)
