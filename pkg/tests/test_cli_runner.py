"""End-to-end runs of the experiment driver."""

import csv
import json

import numpy as np
import pytest

from torusfill import cli_runner
from torusfill.cli_runner import (
    EXIT_CONFIG,
    EXIT_FAILED,
    EXIT_OK,
    bound_check,
    build_field,
    resolve_output_dir,
    run,
    run_bound_check_cli,
    validation_suite,
)
from torusfill.errors import ConfigError
from torusfill.files import field_to_bytes, read_field
from torusfill.lattice_torus import make_flat_metric, make_grid
from torusfill.mass_analysis import ADMISSIBLE, EXCLUDED
from torusfill.schemas import Experiment, InitialDataSpec, parse_run_config
from torusfill.spectral_field import constant_field

UNIT = [[1.0, 0.0], [0.0, 1.0]]


def _read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


class TestInputs:

    def test_cosine_default_mode(self, grid16):
        field = build_field(InitialDataSpec(kind="cosine", value=1.0, amplitude=0.5), grid16)
        assert field.max() == pytest.approx(1.5)
        assert field.min() == pytest.approx(0.5)
        np.testing.assert_allclose(field.values[:, 0], field.values[:, 5])

    def test_random_is_seeded(self, grid16):
        spec = InitialDataSpec(kind="random", value=2.0, amplitude=0.25)
        a = build_field(spec, grid16, seed=3)
        b = build_field(spec, grid16, seed=3)
        c = build_field(spec, grid16, seed=4)
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)
        assert a.min() >= 1.5 - 1e-12
        assert a.max() <= 2.5 + 1e-12
        assert np.max(np.abs(a.values - 2.0)) == pytest.approx(2.0 * 0.25, abs=1e-12)

    def test_file_resolution_must_match(self, tmp_path, unit_metric, grid16):
        path = tmp_path / "u0.bin"
        path.write_bytes(field_to_bytes(constant_field(make_grid(unit_metric, 8), 1.0)))
        with pytest.raises(ConfigError):
            build_field(InitialDataSpec(kind="file", path=str(path)), grid16)

    def test_output_dir_precedence(self, tmp_path, monkeypatch):
        config = parse_run_config({"experiment": "validate"})
        monkeypatch.setenv("TORUSFILL_OUTPUT_ROOT", str(tmp_path / "env"))
        assert resolve_output_dir(config).parent == tmp_path / "env"
        assert resolve_output_dir(config, str(tmp_path / "flag")).parent == tmp_path / "flag"
        assert resolve_output_dir(config).name.startswith("validate-")
        pinned = parse_run_config({"experiment": "validate", "output_dir": str(tmp_path / "pinned")})
        assert resolve_output_dir(pinned, str(tmp_path / "flag")) == tmp_path / "pinned"


class TestBoundCheck:

    def test_constant(self):
        assert bound_check(UNIT, 3, 2.0).verdict == ADMISSIBLE
        assert bound_check(UNIT, 3, 50.0).verdict == EXCLUDED

    def test_field_uses_average(self, grid16):
        verdict = bound_check(grid16.metric, 3, constant_field(grid16, 2.5))
        assert verdict.lhs == pytest.approx(0.5)

    @pytest.mark.parametrize("H", [0.0, -1.0])
    def test_nonpositive_H(self, H):
        with pytest.raises(ConfigError):
            bound_check(UNIT, 3, H)

    def test_bad_gram(self):
        with pytest.raises(ConfigError):
            bound_check([[1.0, 2.0], [2.0, 1.0]], 3, 2.0)

    def test_cli_with_field_file(self, tmp_path, grid16):
        path = tmp_path / "H.bin"
        path.write_bytes(field_to_bytes(constant_field(grid16, 2.0)))
        code, verdict = run_bound_check_cli(UNIT, 3, str(path), str(tmp_path / "out"))
        assert code == EXIT_OK
        assert verdict.lhs == pytest.approx(0.0)
        assert _read_json(tmp_path / "out" / "verdict.json")["verdict"] == ADMISSIBLE


class TestRuns:

    def test_validate(self, tmp_path):
        assert all(r["passed"] for r in validation_suite(3).values())
        config = parse_run_config({"experiment": "validate", "output_dir": str(tmp_path)})
        assert run(config) == EXIT_OK
        manifest = _read_json(tmp_path / "manifest.json")
        assert manifest["exit_code"] == EXIT_OK
        assert manifest["failures"] == []
        assert set(manifest["checks"]) == {
            "oracle_hyperbolic", "oracle_flat_product", "oracle_frozen_warped", "oracle_horowitz_myers",
        }
        assert _read_json(tmp_path / "verdict.json")["passed"]

    def test_bound_check_experiment(self, tmp_path):
        config = parse_run_config({
            "experiment": "bound_check",
            "gram": UNIT,
            "resolution": 8,
            "H_data": {"value": 50.0},
            "output_dir": str(tmp_path),
        })
        assert run(config) == EXIT_OK
        assert _read_json(tmp_path / "verdict.json")["checks"]["bound"]["verdict"] == EXCLUDED

    def test_hm_sweep(self, tmp_path):
        config = parse_run_config({"experiment": "hm_sweep", "output_dir": str(tmp_path)})
        assert run(config) == EXIT_OK
        with open(tmp_path / "hm_sweep.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["R", "H", "sigma", "lhs", "rhs", "ratio"]
        assert len(rows) == 6

    def test_band(self, tmp_path):
        config = parse_run_config({
            "experiment": "band",
            "gram": [[4.0, 0.0], [0.0, 4.0]],
            "gram_hat": UNIT,
            "resolution": 8,
            "h_data": {"value": 3.0},
            "output_dir": str(tmp_path),
        })
        assert run(config) == EXIT_OK
        verdict = _read_json(tmp_path / "verdict.json")
        assert verdict["checks"]["band_ode_reference"]["passed"]
        assert (tmp_path / "band_trace.csv").exists()

    def test_trivial_flow(self, tmp_path):
        config = parse_run_config({
            "experiment": "flow",
            "gram": UNIT,
            "resolution": 8,
            "rho_target": 2.0,
            "output_dir": str(tmp_path),
        })
        assert run(config) == EXIT_OK
        with open(tmp_path / "trace.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert all(float(r["F"]) == 0.0 for r in rows)
        mass = _read_json(tmp_path / "mass_report.json")
        assert mass["mu0"] == 0.0
        manifest = _read_json(tmp_path / "manifest.json")
        paths = {a["path"] for a in manifest["artifacts"]}
        assert {"trace.csv", "mu.bin", "f.bin", "mass_report.json", "verdict.json", "checkpoints.csv"} <= paths
        assert manifest["checks"]["main_inequality"]

        with open(tmp_path / "checkpoints.csv", newline="") as fh:
            index = list(csv.DictReader(fh))
        assert len(index) >= 3
        assert [r["path"] for r in index] == [f"checkpoint_{k:03d}_u.bin" for k in range(len(index))]
        assert index[0]["path"] in paths
        assert float(index[-1]["rho"]) >= 2.0
        u_last = read_field(str(tmp_path / index[-1]["path"]), make_flat_metric(np.eye(2)))
        np.testing.assert_array_equal(u_last.values, 1.0)

    def test_homogeneous_flow_reaches_mass_report(self, tmp_path):
        config = parse_run_config({
            "experiment": "flow",
            "gram": UNIT,
            "resolution": 8,
            "rho_target": 100.0,
            "initial_data": {"value": 2.0},
            "output_dir": str(tmp_path),
        })
        assert run(config) == EXIT_OK
        verdict = _read_json(tmp_path / "verdict.json")
        assert verdict["checks"]["main_inequality"]["passed"]
        assert verdict["checks"]["main_inequality"]["limit_expected"] == pytest.approx(0.75, rel=1e-4)
        mass = _read_json(tmp_path / "mass_report.json")
        assert mass["mu0"] == pytest.approx(0.375, rel=1e-5)

    def test_unexpected_error_still_writes_manifest(self, tmp_path, monkeypatch):
        def broken(ctx):
            ctx.check("before_failure", True)
            raise RuntimeError("boom")

        monkeypatch.setitem(cli_runner.EXPERIMENTS, Experiment.VALIDATE, broken)
        config = parse_run_config({"experiment": "validate", "output_dir": str(tmp_path)})
        with pytest.raises(RuntimeError, match="boom"):
            run(config)
        manifest = _read_json(tmp_path / "manifest.json")
        assert manifest["exit_code"] == EXIT_FAILED
        assert manifest["failures"][0]["code"] == "internal_error"
        assert manifest["failures"][0]["details"]["type"] == "RuntimeError"
        assert manifest["checks"] == {"before_failure": True}
        assert not _read_json(tmp_path / "verdict.json")["passed"]

    def test_flow_is_deterministic(self, tmp_path):
        outputs = []
        for name in ("a", "b"):
            config = parse_run_config({
                "experiment": "flow",
                "gram": [[16.0, 0.0], [0.0, 16.0]],
                "resolution": 8,
                "rho_target": 3.0,
                "converge_psi": False,
                "initial_data": {"kind": "random", "value": 1.0, "amplitude": 0.2},
                "seed": 11,
                "output_dir": str(tmp_path / name),
            })
            run(config)
            outputs.append((tmp_path / name / "trace.csv").read_bytes())
        assert outputs[0] == outputs[1]

    def test_invalid_gram_is_config_error(self, tmp_path):
        config = parse_run_config({
            "experiment": "flow",
            "gram": [[1.0, 2.0], [2.0, 1.0]],
            "output_dir": str(tmp_path),
        })
        assert run(config) == EXIT_CONFIG
        manifest = _read_json(tmp_path / "manifest.json")
        assert manifest["failures"][0]["code"] == "config_error"

    def test_unconverged_flow_fails(self, tmp_path):
        config = parse_run_config({
            "experiment": "flow",
            "gram": UNIT,
            "resolution": 8,
            "rho_target": 2.0,
            "initial_data": {"value": 2.0},
            "solver": {"max_rho": 3.0},
            "output_dir": str(tmp_path),
        })
        assert run(config) == EXIT_FAILED
        manifest = _read_json(tmp_path / "manifest.json")
        assert manifest["failures"][0]["code"] == "not_converged"
