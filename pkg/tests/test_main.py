"""Tests for the command-line entry point."""

import json
import logging

import pytest

from torusfill.main import build_parser, main, setup_logging


@pytest.fixture(autouse=True)
def no_log_files(monkeypatch):
    monkeypatch.setenv("TORUSFILL_LOG_FILE", "")


class TestParser:

    def test_requires_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_bound_check_arguments(self):
        args = build_parser().parse_args(["bound-check", "--gram", "[[1,0],[0,1]]", "--n", "3", "--H", "2"])
        assert args.command == "bound-check"
        assert args.n == 3


class TestMain:

    def test_validate(self, tmp_path):
        assert main(["--output", str(tmp_path), "--log-level", "WARNING", "validate"]) == 0
        runs = list(tmp_path.iterdir())
        assert len(runs) == 1 and runs[0].name.startswith("validate-")
        assert (runs[0] / "manifest.json").exists()

    def test_bound_check_prints_verdict(self, capsys):
        code = main(["--log-level", "WARNING", "bound-check", "--gram", "[[1,0],[0,1]]", "--n", "3", "--H", "2.5"])
        assert code == 0
        verdict = json.loads(capsys.readouterr().out)
        assert verdict["verdict"] == "ADMISSIBLE"
        assert verdict["lhs"] == pytest.approx(0.5)

    @pytest.mark.parametrize("gram", ["[[1,0],[0,1]", "{\"a\": 1}", "[[1,2],[2,1]]"])
    def test_bad_gram(self, gram):
        assert main(["--log-level", "CRITICAL", "bound-check", "--gram", gram, "--n", "3", "--H", "2"]) == 3

    def test_missing_config(self, tmp_path):
        assert main(["--log-level", "CRITICAL", "run", str(tmp_path / "absent.json")]) == 3

    def test_run_config(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"experiment": "hm_sweep", "output_dir": str(tmp_path / "out")}))
        assert main(["--log-level", "WARNING", "run", str(config)]) == 0
        assert (tmp_path / "out" / "hm_sweep.csv").exists()


class TestLogging:

    def test_console_only(self):
        logger = setup_logging("DEBUG")
        assert logger.name == "torusfill"
        assert len(logger.handlers) == 1
        assert logger.handlers[0].level == logging.DEBUG

    def test_json_file(self, tmp_path, monkeypatch):
        log_file = tmp_path / "run.log"
        monkeypatch.setenv("TORUSFILL_LOG_FILE", str(log_file))
        logger = setup_logging("WARNING")
        try:
            assert len(logger.handlers) == 3
            logging.getLogger("torusfill.flow_solver").info("[FLOW] checkpoint")
            for handler in logger.handlers:
                handler.flush()
            record = json.loads(log_file.read_text().splitlines()[-1])
            assert record["level"] == "INFO"
            assert record["message"] == "[FLOW] checkpoint"
            assert "timestamp" in record
        finally:
            for handler in logger.handlers:
                handler.close()
            logger.handlers = []
