import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from hdtsim.cli import (
    CSV_FORMAT,
    EXIT_CHECK,
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_OK,
    OutputError,
    emit_csv,
    emit_plots,
    main,
    read_csv,
)
from hdtsim.config import preset
from hdtsim.metrics import ScenarioReport
from hdtsim.simengine import COLUMNS, N_COLUMNS, run


@pytest.fixture(scope="module")
def short_result():
    spec = preset("voltage_regulation")
    spec.duration = 0.004
    spec.events = ()
    return run(spec)


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


DIVERGING = {"duration": 0.002, "sources": {"Vin_pk": 0.0, "I_pk": 0.0},
             "initial_state": {"vC": 3000.0}, "references": {"vC_star": 1000.0}}


class TestCsv:
    def test_two_records(self, tmp_path):
        data = np.arange(2 * N_COLUMNS, dtype=float).reshape(2, N_COLUMNS)
        path = emit_csv(data, tmp_path / "two.csv")
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        assert lines[0] == ",".join(COLUMNS)
        assert all(len(line.split(",")) == 35 for line in lines)

    def test_reemission_byte_identical(self, tmp_path, short_result):
        a = emit_csv(short_result, tmp_path / "a.csv").read_bytes()
        b = emit_csv(short_result, tmp_path / "b.csv").read_bytes()
        assert a == b

    def test_round_trip_precision(self, tmp_path, short_result):
        back = read_csv(emit_csv(short_result, tmp_path / "r.csv"))
        np.testing.assert_allclose(back, short_result.data, rtol=1e-11, atol=1e-300)

    def test_significant_digits(self):
        assert CSV_FORMAT % (1.0 / 3.0) == "0.333333333333"
        assert len((CSV_FORMAT % 2.0e-5).replace(".", "").split("e")[0]) <= 12

    @pytest.mark.parametrize("data", [np.zeros((0, N_COLUMNS)), np.zeros((2, 34)), np.zeros(N_COLUMNS)])
    def test_rejects_bad_shape(self, tmp_path, data):
        with pytest.raises(ValueError):
            emit_csv(data, tmp_path / "x.csv")

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OutputError):
            emit_csv(np.zeros((1, N_COLUMNS)), tmp_path / "missing" / "x.csv")

    def test_header_checked(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_csv(path)


class TestPlots:
    def test_svg_well_formed(self, tmp_path, short_result):
        paths = emit_plots(short_result, tmp_path / "pf")
        assert [p.name for p in paths] == ["pf_voltage.svg", "pf_vdc.svg"]
        for p in paths:
            assert ET.parse(p).getroot().tag.endswith("svg")

    def test_deterministic(self, tmp_path, short_result):
        a = emit_plots(short_result, tmp_path / "a", panels=["power"])[0].read_bytes()
        b = emit_plots(short_result, tmp_path / "b", panels=["power"])[0].read_bytes()
        assert a == b

    def test_empty_refused(self, tmp_path, short_result):
        empty = type(short_result)(short_result.spec, short_result.data[:0], short_result.status, 0)
        with pytest.raises(ValueError):
            emit_plots(empty, tmp_path / "e")


class TestRun:
    def test_preset_outputs(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"preset": "pf_correction", "duration": 0.11})
        out, rep = tmp_path / "o.csv", tmp_path / "o.json"
        assert main(["run", "--config", cfg, "--out", str(out), "--report", str(rep)]) == EXIT_OK
        assert read_csv(out).shape == (int(round(0.11 / 2e-5)) // 5, N_COLUMNS)
        report = ScenarioReport.from_dict(json.loads(rep.read_text()))
        assert report.name == "pf_correction"
        assert "records" in capsys.readouterr().out

    def test_check_failure_exit(self, tmp_path):
        # activation too late for the post-activation window
        cfg = write_config(tmp_path, {"preset": "pf_correction", "services": {"pf_correction": 0.19}})
        assert main(["run", "--config", cfg, "--check"]) == EXIT_CHECK

    def test_criteria_for_disabled_service(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"preset": "voltage_regulation", "criteria": "pf_correction"})
        assert main(["run", "--config", cfg, "--check"]) == EXIT_CONFIG
        assert "never enabled" in capsys.readouterr().err

    def test_check_without_criteria(self, tmp_path):
        cfg = write_config(tmp_path, {"duration": 0.002})
        assert main(["run", "--config", cfg, "--check"]) == EXIT_CHECK

    def test_divergence_exit_keeps_partial_csv(self, tmp_path, capsys):
        cfg = write_config(tmp_path, DIVERGING)
        out = tmp_path / "d.csv"
        assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_DIVERGED
        assert read_csv(out).shape == (1, N_COLUMNS)
        assert "diverged" in capsys.readouterr().err

    @pytest.mark.parametrize("doc", [{"dt": -1}, {"gainz": {}}])
    def test_config_error_exit(self, tmp_path, capsys, doc):
        assert main(["run", "--config", write_config(tmp_path, doc)]) == EXIT_CONFIG
        assert "config error: $." in capsys.readouterr().err

    def test_malformed_json_exit(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG

    def test_bad_dt_override(self):
        assert main(["run", "--scenario", "voltage_regulation", "--dt", "0"]) == EXIT_CONFIG

    def test_unwritable_output(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"duration": 0.002})
        code = main(["run", "--config", cfg, "--out", str(tmp_path / "nope" / "o.csv")])
        assert code == EXIT_CONFIG
        assert "cannot write CSV" in capsys.readouterr().err

    def test_usage_error_exit(self):
        with pytest.raises(SystemExit) as info:
            main(["run"])
        assert info.value.code == EXIT_CONFIG

    def test_presets_listing(self, capsys):
        assert main(["presets"]) == EXIT_OK
        assert capsys.readouterr().out.split() == [
            "voltage_regulation", "pf_correction", "phase_balancing", "frequency_regulation", "simultaneous"]


class TestSweep:
    def test_outputs_and_worst_code(self, tmp_path):
        ok = write_config(tmp_path, {"preset": "pf_correction", "duration": 0.11}, "pf.json")
        bad = write_config(tmp_path, DIVERGING, "boom.json")
        out_dir = tmp_path / "sweep"
        code = main(["sweep", ok, bad, ok, "--out-dir", str(out_dir), "--jobs", "2"])
        assert code == EXIT_DIVERGED
        names = sorted(p.name for p in out_dir.iterdir())
        assert names == ["boom.csv", "pf.csv", "pf.report.json", "pf_1.csv", "pf_1.report.json"]
        assert (out_dir / "pf.csv").read_bytes() == (out_dir / "pf_1.csv").read_bytes()

    def test_all_ok(self, tmp_path):
        cfg = write_config(tmp_path, {"duration": 0.002})
        assert main(["sweep", cfg, "--out-dir", str(tmp_path / "s")]) == EXIT_OK

    def test_bad_jobs(self, tmp_path):
        cfg = write_config(tmp_path, {"duration": 0.002})
        assert main(["sweep", cfg, "--out-dir", str(tmp_path / "s"), "--jobs", "0"]) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hdtsim", "presets"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "simultaneous" in proc.stdout
