import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdtsim.config import PRESETS, ConfigError, parse_config, preset, serialize, spec_from_dict, spec_to_dict
from hdtsim.simengine import profile_eval


class TestPresets:
    def test_voltage_regulation(self):
        spec = preset("voltage_regulation")
        assert spec.initial_state.vC == 1900.0
        assert [(ev.kind, ev.time, ev.factor) for ev in spec.events] == [("scale_vin", 0.1, 1.1)]
        assert spec.criteria == "voltage_regulation"

    def test_frequency_regulation(self):
        spec = preset("frequency_regulation")
        assert spec.initial_state.vC == 2000.0
        assert spec.duration == 15.0
        assert profile_eval(spec.freq_profile, 0.0) == 50.1
        assert profile_eval(spec.freq_profile, 15.0) == 49.7

    def test_phase_balancing_loads_unbalanced(self):
        spec = preset("phase_balancing")
        assert spec.events[0].kind == "set_load_matrices"
        np.testing.assert_allclose(np.diag(spec.events[0].R), [10.0, 10.0, 5.0])

    def test_unknown(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            preset("blackstart")

    def test_presets_are_independent(self):
        a = preset("voltage_regulation")
        a.duration = 1.0
        assert preset("voltage_regulation").duration == 0.2


class TestRoundTrip:
    @pytest.mark.parametrize("name", PRESETS)
    def test_preset(self, name):
        spec = preset(name)
        back = spec_from_dict(json.loads(serialize(spec)))
        assert spec_to_dict(back) == spec_to_dict(spec)

    def test_serialized_is_stable(self):
        text = serialize(preset("simultaneous"))
        assert serialize(spec_from_dict(json.loads(text))) == text

    @given(st.floats(min_value=1e-6, max_value=1e-4), st.integers(min_value=1, max_value=50),
           st.floats(min_value=0.5, max_value=1.5), st.sampled_from(["abc", "dq", "vector"]))
    def test_custom(self, dt, dec, factor, limiter):
        doc = {"dt": dt, "record_decimation": dec, "duty_limiters": {"vsc2": limiter},
               "events": [{"time": 0.05, "kind": "scale_vin", "factor": factor}]}
        spec = spec_from_dict(doc)
        assert spec_to_dict(spec_from_dict(spec_to_dict(spec))) == spec_to_dict(spec)


class TestParse:
    def test_empty_gives_defaults(self):
        spec = spec_from_dict({})
        assert spec.events == ()
        assert spec.dt == 2e-5
        assert spec.criteria is None

    def test_preset_override(self):
        spec = spec_from_dict({"preset": "pf_correction", "duration": 0.3, "name": "long_pf"})
        assert spec.duration == 0.3
        assert spec.name == "long_pf"
        assert spec.criteria == "pf_correction"

    def test_preset_name_source(self):
        assert parse_config("phase_balancing").name == "phase_balancing"

    def test_limiters(self):
        spec = spec_from_dict({"duty_limiters": {"vsc1": "abc", "vsc2": "dq"}})
        assert (spec.limiters.vsc1, spec.limiters.vsc2) == ("abc", "dq")

    def test_sampled_profile(self):
        spec = spec_from_dict({"frequency_profile": {"kind": "sampled", "points": [[0, 50], [1, 50.2]]}})
        np.testing.assert_allclose(profile_eval(spec.freq_profile, 0.5), 50.1)

    def test_csv_profile_relative_to_config(self, tmp_path):
        (tmp_path / "f.csv").write_text("t,f\n0,50\n2,49.8\n")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"frequency_profile": {"kind": "csv", "path": "f.csv"}}))
        np.testing.assert_allclose(profile_eval(parse_config(str(cfg)).freq_profile, 1.0), 49.9)

    def test_shipped_configs(self):
        root = Path(__file__).resolve().parent.parent / "configs"
        for path in sorted(root.glob("*.json")):
            assert parse_config(str(path)).validate()

    @pytest.mark.parametrize("doc, where", [
        ({"gainz": {}}, "$.gainz: unknown key"),
        ({"dt": -1}, "$.dt: must be positive"),
        ({"dt": "fast"}, "$.dt: expected a number"),
        ({"duration": True}, "$.duration: expected a number"),
        ({"integrator": "heun"}, "$.integrator"),
        ({"record_decimation": 2.5}, "$.record_decimation"),
        ({"preset": "blackstart"}, "$.preset"),
        ({"criteria": "teleport"}, "$.criteria"),
        ({"duty_limiters": {"vsc2": "round"}}, "$.duty_limiters.vsc2"),
        ({"duty_limiters": {"vsc3": "abc"}}, "$.duty_limiters.vsc3: unknown key"),
        ({"gains": {"kp1": -1.0}}, "$.gains.kp1: must be non-negative"),
        ({"references": {"vC_star": 0.0}}, "$.references.vC_star"),
        ({"initial_state": {"I1": [1, 2]}}, "$.initial_state.I1"),
        ({"plant": {"L1": 0.0}}, "$.plant"),
        ({"plant": {"R_load": [[1, 0, 0], [0, 1, 0]]}}, "$.plant.R_load"),
        ({"plant": {"R_load": [[10, 1, 0], [0, 10, 0], [0, 0, 10]]}}, "$.plant"),
        ({"frequency_profile": {"kind": "wobble"}}, "$.frequency_profile.kind"),
        ({"frequency_profile": {"kind": "sampled", "points": []}}, "$.frequency_profile.points"),
        ({"frequency_profile": {"kind": "csv", "path": "/nonexistent/f.csv"}}, "$.frequency_profile.path"),
        ({"events": {}}, "$.events"),
        ({"events": [{"time": 0.1, "kind": "explode"}]}, "$.events[0].kind"),
        ({"events": [{"time": 0.1, "kind": "scale_vin", "factor": -1}]}, "$.events[0]"),
        ({"events": [{"time": 0.1, "kind": "set_load_matrices",
                      "R": [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
                      "L": [[1, 0, 0], [0, -1, 0], [0, 0, 1]]}]}, "$.events[0]"),
        ({"events": [{"time": 5.0, "kind": "scale_vin", "factor": 1.1}]}, "$:"),
        ([1, 2], "$: expected an object"),
    ])
    def test_rejects_with_path(self, doc, where):
        with pytest.raises(ConfigError) as info:
            spec_from_dict(doc)
        assert str(info.value).startswith(where), str(info.value)

    def test_malformed_json(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"dt": 1e-5,\n "duration": }')
        with pytest.raises(ConfigError, match="malformed JSON at line 2"):
            parse_config(str(cfg))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            parse_config(str(tmp_path / "absent.json"))
