"""JSON scenario configuration and the built-in scenario presets.

Every field is optional; anything missing falls back to the default circuit
and controller constants. A config may name a ``"preset"`` to start from.
Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import json
import math
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .control import (
    SATURATION_SCHEMES,
    SERVICES,
    ControlError,
    DroopParams,
    Gains,
    References,
    ServiceFlags,
)
from .plant import (
    UNBALANCED_L_LOAD,
    UNBALANCED_R_LOAD,
    PlantParameterError,
    PlantParams,
    PlantState,
    derive_composites,
)
from .simengine import (
    Event,
    FrequencyProfile,
    ScenarioError,
    ScenarioSpec,
    load_frequency_csv,
)

PRESETS = ("voltage_regulation", "pf_correction", "phase_balancing",
           "frequency_regulation", "simultaneous")

SHORT_DECIMATION = 5
LONG_DECIMATION = 25


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending JSON path."""


# ------------------------------------------------------------------- presets

def preset(name: str) -> ScenarioSpec:
    """Built-in scenario setups for the five ancillary-service cases."""
    if name == "voltage_regulation":
        spec = ScenarioSpec(
            name=name, duration=0.2, record_decimation=SHORT_DECIMATION,
            initial_state=PlantState(vC=1900.0),
            events=(Event.scale_vin(0.1, 1.1),),
        )
    elif name == "pf_correction":
        spec = ScenarioSpec(
            name=name, duration=0.2, record_decimation=SHORT_DECIMATION,
            initial_state=PlantState(vC=2000.0),
            flags=ServiceFlags(voltage_regulation=0.0, pf_correction=0.1),
        )
    elif name == "phase_balancing":
        spec = ScenarioSpec(
            name=name, duration=0.2, record_decimation=SHORT_DECIMATION,
            initial_state=PlantState(vC=1900.0),
            flags=ServiceFlags(voltage_regulation=0.0, phase_balancing=0.1),
            events=(Event.set_load_matrices(0.0, UNBALANCED_R_LOAD, UNBALANCED_L_LOAD),),
        )
    elif name == "frequency_regulation":
        spec = ScenarioSpec(
            name=name, duration=15.0, record_decimation=LONG_DECIMATION,
            initial_state=PlantState(vC=2000.0),
            flags=ServiceFlags(voltage_regulation=0.0, frequency_regulation=0.0),
            freq_profile=FrequencyProfile.ramp(50.1, 49.7, 0.0, 15.0),
        )
    elif name == "simultaneous":
        spec = ScenarioSpec(
            name=name, duration=15.0, record_decimation=LONG_DECIMATION,
            initial_state=PlantState(vC=2000.0),
            flags=ServiceFlags(voltage_regulation=0.0, frequency_regulation=0.0,
                               pf_correction=7.5, phase_balancing=7.5),
            freq_profile=FrequencyProfile.ramp(49.9, 50.1, 0.0, 15.0),
            events=(Event.set_load_matrices(0.0, UNBALANCED_R_LOAD, UNBALANCED_L_LOAD),),
        )
    else:
        raise ConfigError(f"preset: unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    spec.criteria = name
    return spec.validate()


# ----------------------------------------------------------------- serialize

def _state_to_dict(s: PlantState) -> dict:
    return {"I1": [float(v) for v in s.I1], "I2": [float(v) for v in s.I2],
            "I3": [float(v) for v in s.I3], "vC": float(s.vC)}


_PLANT_SCALARS = ("L1", "L2", "Lp", "Ls", "R1", "R2", "Rp", "Rs", "C", "alpha", "beta")


def _matrix(m) -> list:
    return [[float(v) for v in row] for row in np.asarray(m)]


def _profile_to_dict(p: FrequencyProfile) -> dict:
    if p.kind == "constant":
        return {"kind": "constant", "f": p.freqs[0]}
    if p.kind == "ramp":
        return {"kind": "ramp", "f_start": p.freqs[0], "f_end": p.freqs[1],
                "t_start": p.times[0], "t_end": p.times[1]}
    return {"kind": "sampled", "points": [[t, f] for t, f in zip(p.times, p.freqs)]}


def _event_to_dict(ev: Event) -> dict:
    if ev.kind == "scale_vin":
        return {"time": ev.time, "kind": ev.kind, "factor": ev.factor}
    if ev.kind == "set_load_matrices":
        return {"time": ev.time, "kind": ev.kind, "R": _matrix(ev.R), "L": _matrix(ev.L)}
    return {"time": ev.time, "kind": ev.kind, "service": ev.service}


def spec_to_dict(spec: ScenarioSpec) -> dict:
    """Complete, self-contained JSON-ready description of ``spec``."""
    p = spec.plant
    plant = {k: float(getattr(p, k)) for k in _PLANT_SCALARS}
    plant["R_load"] = _matrix(p.R_load)
    plant["L_load"] = _matrix(p.L_load)
    return {
        "name": spec.name,
        "criteria": spec.criteria,
        "duration": spec.duration,
        "dt": spec.dt,
        "integrator": spec.integrator,
        "record_decimation": int(spec.record_decimation),
        "initial_state": _state_to_dict(spec.initial_state),
        "plant": plant,
        "sources": {"Vin_pk": spec.Vin_pk, "I_pk": spec.I_pk},
        "gains": {f.name: getattr(spec.gains, f.name) for f in fields(Gains)},
        "references": {f.name: getattr(spec.refs, f.name) for f in fields(References)},
        "droop": {f.name: getattr(spec.droop, f.name) for f in fields(DroopParams)},
        "duty_limiters": {"vsc1": spec.limiters.vsc1, "vsc2": spec.limiters.vsc2},
        "services": {name: getattr(spec.flags, name) for name in SERVICES},
        "frequency_profile": _profile_to_dict(spec.freq_profile),
        "events": [_event_to_dict(ev) for ev in spec.events],
    }


def serialize(spec: ScenarioSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2)


# --------------------------------------------------------------------- parse

def _check_keys(obj, allowed, path):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {type(obj).__name__}")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")


def _number(value, path, *, positive=False, nonneg=False, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"{path}: must be finite")
    if positive and not value > 0.0:
        raise ConfigError(f"{path}: must be positive, got {value}")
    if nonneg and value < 0.0:
        raise ConfigError(f"{path}: must be non-negative, got {value}")
    return value


def _vector(value, path, n=3):
    if not isinstance(value, list) or len(value) != n:
        raise ConfigError(f"{path}: expected a list of {n} numbers")
    return np.array([_number(v, f"{path}[{i}]") for i, v in enumerate(value)])


def _matrix3(value, path):
    if not isinstance(value, list) or len(value) != 3:
        raise ConfigError(f"{path}: expected a 3x3 matrix")
    return np.vstack([_vector(row, f"{path}[{i}]") for i, row in enumerate(value)])


def _dataclass_section(obj, cls, base, path, **checks):
    names = [f.name for f in fields(cls)]
    _check_keys(obj, names, path)
    updates = {k: _number(v, f"{path}.{k}", **checks) for k, v in obj.items()}
    return replace(base, **updates)


def _parse_plant(obj, base: PlantParams, path) -> PlantParams:
    _check_keys(obj, _PLANT_SCALARS + ("R_load", "L_load"), path)
    updates = {}
    for key in _PLANT_SCALARS:
        if key in obj:
            updates[key] = _number(obj[key], f"{path}.{key}", nonneg=True)
    for key in ("R_load", "L_load"):
        if key in obj:
            updates[key] = _matrix3(obj[key], f"{path}.{key}")
    raw = replace(base, Lbar1=None, Rbar1=None, Rbar2=None, L_load_inv=None, **updates)
    try:
        return derive_composites(raw)
    except PlantParameterError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_state(obj, base: PlantState, path) -> PlantState:
    _check_keys(obj, ("I1", "I2", "I3", "vC"), path)
    return PlantState(
        I1=_vector(obj["I1"], f"{path}.I1") if "I1" in obj else base.I1.copy(),
        I2=_vector(obj["I2"], f"{path}.I2") if "I2" in obj else base.I2.copy(),
        I3=_vector(obj["I3"], f"{path}.I3") if "I3" in obj else base.I3.copy(),
        vC=_number(obj["vC"], f"{path}.vC") if "vC" in obj else base.vC,
    )


def _parse_profile(obj, path, base_dir: Path | None) -> FrequencyProfile:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(f"{path}: expected an object with a 'kind'")
    kind = obj["kind"]
    try:
        if kind == "constant":
            _check_keys(obj, ("kind", "f"), path)
            return FrequencyProfile.constant(_number(obj.get("f", 50.0), f"{path}.f"))
        if kind == "ramp":
            _check_keys(obj, ("kind", "f_start", "f_end", "t_start", "t_end"), path)
            return FrequencyProfile.ramp(*(_number(obj.get(k), f"{path}.{k}")
                                           for k in ("f_start", "f_end", "t_start", "t_end")))
        if kind == "sampled":
            _check_keys(obj, ("kind", "points"), path)
            pts = obj.get("points")
            if not isinstance(pts, list) or not pts:
                raise ConfigError(f"{path}.points: expected a non-empty list of [t, f] pairs")
            pairs = [_vector(pt, f"{path}.points[{i}]", n=2) for i, pt in enumerate(pts)]
            return FrequencyProfile.sampled([p[0] for p in pairs], [p[1] for p in pairs])
        if kind == "csv":
            _check_keys(obj, ("kind", "path"), path)
            csv_path = Path(obj.get("path", ""))
            if base_dir is not None and not csv_path.is_absolute():
                csv_path = base_dir / csv_path
            try:
                return load_frequency_csv(csv_path)
            except OSError as exc:
                raise ConfigError(f"{path}.path: cannot read {csv_path}: {exc.strerror}") from None
    except ScenarioError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raise ConfigError(f"{path}.kind: unknown profile kind {kind!r}")


def _parse_event(obj, path) -> Event:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    kind = obj.get("kind")
    time = _number(obj.get("time"), f"{path}.time", nonneg=True)
    try:
        if kind == "scale_vin":
            _check_keys(obj, ("time", "kind", "factor"), path)
            return Event.scale_vin(time, _number(obj.get("factor"), f"{path}.factor"))
        if kind == "set_load_matrices":
            _check_keys(obj, ("time", "kind", "R", "L"), path)
            R = _matrix3(obj.get("R"), f"{path}.R")
            L = _matrix3(obj.get("L"), f"{path}.L")
            try:
                derive_composites(PlantParams(R_load=R, L_load=L))
            except PlantParameterError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            return Event.set_load_matrices(time, R, L)
        if kind == "enable_service":
            _check_keys(obj, ("time", "kind", "service"), path)
            return Event.enable_service(time, obj.get("service"))
    except ScenarioError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raise ConfigError(f"{path}.kind: unknown event kind {kind!r}")


TOP_KEYS = ("name", "criteria", "preset", "duration", "dt", "integrator", "record_decimation",
            "initial_state", "plant", "sources", "gains", "references", "droop",
            "duty_limiters", "services", "frequency_profile", "events")


def spec_from_dict(doc, base_dir: Path | None = None) -> ScenarioSpec:
    """Build and validate a spec from a parsed JSON document."""
    path = "$"
    _check_keys(doc, TOP_KEYS, path)
    if "preset" in doc:
        if not isinstance(doc["preset"], str):
            raise ConfigError("$.preset: expected a string")
        try:
            spec = preset(doc["preset"])
        except ConfigError as exc:
            raise ConfigError(f"$.{exc}") from None
    else:
        spec = ScenarioSpec(name="custom", initial_state=PlantState(vC=1900.0))

    if "name" in doc:
        if not isinstance(doc["name"], str):
            raise ConfigError("$.name: expected a string")
        spec.name = doc["name"]
    if "criteria" in doc:
        crit = doc["criteria"]
        if crit is not None and crit not in PRESETS:
            raise ConfigError(f"$.criteria: expected null or one of {PRESETS}, got {crit!r}")
        spec.criteria = crit
    if "duration" in doc:
        spec.duration = _number(doc["duration"], "$.duration", positive=True)
    if "dt" in doc:
        spec.dt = _number(doc["dt"], "$.dt", positive=True)
    if "integrator" in doc:
        if doc["integrator"] not in ("euler", "rk4"):
            raise ConfigError(f"$.integrator: expected 'euler' or 'rk4', got {doc['integrator']!r}")
        spec.integrator = doc["integrator"]
    if "record_decimation" in doc:
        dec = doc["record_decimation"]
        if isinstance(dec, bool) or not isinstance(dec, int) or dec < 1:
            raise ConfigError(f"$.record_decimation: expected an integer >= 1, got {dec!r}")
        spec.record_decimation = dec
    if "initial_state" in doc:
        spec.initial_state = _parse_state(doc["initial_state"], spec.initial_state, "$.initial_state")
    if "plant" in doc:
        spec.plant = _parse_plant(doc["plant"], spec.plant, "$.plant")
    if "sources" in doc:
        src = doc["sources"]
        _check_keys(src, ("Vin_pk", "I_pk"), "$.sources")
        if "Vin_pk" in src:
            spec.Vin_pk = _number(src["Vin_pk"], "$.sources.Vin_pk", nonneg=True)
        if "I_pk" in src:
            spec.I_pk = _number(src["I_pk"], "$.sources.I_pk")
    if "gains" in doc:
        spec.gains = _dataclass_section(doc["gains"], Gains, spec.gains, "$.gains", nonneg=True)
    if "references" in doc:
        spec.refs = _dataclass_section(doc["references"], References, spec.refs, "$.references")
        if spec.refs.vC_star <= 0.0:
            raise ConfigError("$.references.vC_star: must be positive")
    if "droop" in doc:
        spec.droop = _dataclass_section(doc["droop"], DroopParams, spec.droop, "$.droop")
        try:
            spec.droop.validate()
        except ControlError as exc:
            raise ConfigError(f"$.droop: {exc}") from None
    if "duty_limiters" in doc:
        lim = doc["duty_limiters"]
        _check_keys(lim, ("vsc1", "vsc2"), "$.duty_limiters")
        for key, value in lim.items():
            if value not in SATURATION_SCHEMES:
                raise ConfigError(f"$.duty_limiters.{key}: expected one of {SATURATION_SCHEMES}, got {value!r}")
        spec.limiters = replace(spec.limiters, **lim)
    if "services" in doc:
        svc = doc["services"]
        _check_keys(svc, SERVICES, "$.services")
        spec.flags = replace(spec.flags, **{
            k: _number(v, f"$.services.{k}", nonneg=True, allow_none=True) for k, v in svc.items()
        })
    if "frequency_profile" in doc:
        spec.freq_profile = _parse_profile(doc["frequency_profile"], "$.frequency_profile", base_dir)
    if "events" in doc:
        evs = doc["events"]
        if not isinstance(evs, list):
            raise ConfigError("$.events: expected a list")
        spec.events = tuple(_parse_event(ev, f"$.events[{i}]") for i, ev in enumerate(evs))
    try:
        return spec.validate()
    except (ScenarioError, ControlError, PlantParameterError) as exc:
        raise ConfigError(f"$: {exc}") from None


def parse_config(source) -> ScenarioSpec:
    """Load a spec from a preset name, a JSON file path, or a dict."""
    if isinstance(source, dict):
        return spec_from_dict(source)
    if isinstance(source, str) and source in PRESETS:
        return preset(source)
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return spec_from_dict(doc, base_dir=path.parent)
