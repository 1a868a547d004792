"""Scenario configuration: strict JSON with complete, line-anchored validation.

A configuration is checked in full before any computation starts. Schema
errors (unknown keys, wrong types, out-of-range numbers) and semantic errors
(missing files, grid cap, dimension mismatches) are collected together and
reported with the line of the offending key.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from json.decoder import scanstring
from pathlib import Path
from typing import Any

import jsonschema

from .grid import DEFAULT_POINT_CAP

SCENARIO_KINDS = {
    "fga": "frozen Gaussian (optionally with a guided width schedule) vs the grid oracle",
    "tdh": "time-dependent Hartree product with mean-field error decomposition",
    "adiabatic": "Born-Oppenheimer dynamics on one surface vs full nonadiabatic evolution",
    "mctdh-spawn": "two-mode MCTDH with spawning diagnostics and eps-triggered spawning",
    "exact-only": "oracle propagation only (norm and energy conservation)",
}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_PACKET = {
    "type": "object",
    "additionalProperties": False,
    "required": ["q0", "p0", "width"],
    "properties": {"q0": _NUM, "p0": _NUM, "width": _POS},
}
_AXIS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["x_min", "x_max", "n_points"],
    "properties": {
        "x_min": _NUM,
        "x_max": _NUM,
        "n_points": {"type": "integer", "minimum": 8, "maximum": 4096},
    },
}
_TERM = {
    "type": "object",
    "additionalProperties": False,
    "required": ["coef", "powers"],
    "properties": {
        "coef": _NUM,
        "powers": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 12},
                   "minItems": 1},
    },
}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["scenario", "grid", "hamiltonian", "initial_state", "t_final"],
    "properties": {
        "scenario": {"enum": sorted(SCENARIO_KINDS)},
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "hbar": _POS,
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["axes"],
            "properties": {
                "axes": {"type": "array", "items": _AXIS, "minItems": 1, "maxItems": 3},
                "boundary": {"enum": ["periodic", "boxed"]},
                "point_cap": {"type": "integer", "minimum": 8},
            },
        },
        "hamiltonian": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mass"],
            "properties": {
                "mass": {"oneOf": [_POS, {"type": "array", "items": _POS, "minItems": 1}]},
                "kinetic": {"enum": ["spectral", "fd4"]},
                "potential": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "terms": {"type": "array", "items": _TERM, "minItems": 1},
                        "file": {"type": "string"},
                    },
                    "minProperties": 1,
                    "maxProperties": 1,
                },
                "model": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "name": {"enum": ["avoided_crossing", "tanh_crossing", "linear_vibronic"]},
                        "params": {"type": "object"},
                        "file": {"type": "string"},
                    },
                    "minProperties": 1,
                },
            },
        },
        "initial_state": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "packets": {"type": "array", "items": _PACKET, "minItems": 1},
                "q0": _NUM,
                "p0": _NUM,
                "dq": {"oneOf": [_POS, {"const": "match"}]},
                "surface": {"type": "integer", "minimum": 0, "maximum": 2},
                "spfs": {"type": "array", "minItems": 2, "maxItems": 2,
                         "items": {"type": "array", "items": _PACKET, "minItems": 1, "maxItems": 6}},
                "coefficients": {"oneOf": [
                    {"const": "random"},
                    {"type": "array", "items": {"type": "array", "items": _NUM}},
                ]},
                "random": {"type": "boolean"},
            },
        },
        "guided_width": {
            "type": "object",
            "additionalProperties": False,
            "required": ["amplitude", "frequency"],
            "properties": {
                "amplitude": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
                "frequency": _NUM,
            },
        },
        "spawn": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "threshold": _POS,
                "max_spfs": {"type": "integer", "minimum": 1, "maximum": 8},
                "damping": {"type": "number", "minimum": 0, "maximum": 1e-1},
            },
        },
        "t_final": _POS,
        "n_samples": {"type": "integer", "minimum": 2, "maximum": 10000},
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rtol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-3},
                "atol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-3},
            },
        },
        "oracle": {"type": "boolean"},
        "output_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}


class ConfigError(ValueError):
    """Carries every validation message found in one pass."""

    def __init__(self, path, messages: list[str]):
        self.path, self.messages = str(path), list(messages)
        super().__init__("\n".join(f"{self.path}:{m}" for m in self.messages))


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated configuration; ``data`` is the parsed JSON with defaults filled."""

    path: Path
    data: dict

    @property
    def kind(self) -> str:
        return self.data["scenario"]

    @property
    def name(self) -> str:
        return self.data["name"]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.path.parent / p


DEFAULTS = {"hbar": 1.0, "n_samples": 101, "oracle": True, "seed": 0}


# -- source positions ------------------------------------------------------------

def _line(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def _skip_ws(text: str, i: int) -> int:
    while i < len(text) and text[i] in " \t\r\n":
        i += 1
    return i


def key_lines(text: str) -> dict[tuple, int]:
    """Map every JSON path (tuple of keys/indices) to the line it starts on.

    Object members are anchored at their key. The text must already be
    valid JSON.
    """
    out: dict[tuple, int] = {}
    dec = json.JSONDecoder()

    def value(i, path):
        i = _skip_ws(text, i)
        out.setdefault(path, _line(text, i))
        c = text[i]
        if c == "{":
            i = _skip_ws(text, i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                start = _skip_ws(text, i)
                key, i = scanstring(text, start + 1)
                out[path + (key,)] = _line(text, start)
                i = _skip_ws(text, i) + 1  # colon
                i = value(i, path + (key,))
                i = _skip_ws(text, i)
                if text[i] == "}":
                    return i + 1
                i += 1
        if c == "[":
            i = _skip_ws(text, i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = _skip_ws(text, value(i, path + (k,)))
                k += 1
                if text[i] == "]":
                    return i + 1
                i += 1
        _, end = dec.raw_decode(text, i)
        return end

    value(0, ())
    return out


def _anchor(lines: dict[tuple, int], path) -> int:
    path = tuple(path)
    while path and path not in lines:
        path = path[:-1]
    return lines.get(path, 1)


def _dotted(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


# -- validation --------------------------------------------------------------------

def _schema_messages(data, lines) -> list[tuple[int, str]]:
    out = []
    for err in jsonschema.Draft202012Validator(SCHEMA).iter_errors(data):
        path = list(err.absolute_path)
        msg = err.message
        if err.validator == "required":
            # anchor a missing key at its parent and name the key itself
            missing = msg.split("'")[1] if "'" in msg else msg
            path_s = _dotted(path + [missing])
            out.append((_anchor(lines, path), f"{path_s}: required key is missing"))
            continue
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            for key in extra:
                out.append((_anchor(lines, path + [key]), f"{_dotted(path + [key])}: unknown key"))
            continue
        out.append((_anchor(lines, path), f"{_dotted(path)}: {msg}"))
    return out


def _masses(data) -> list[float]:
    m = data["hamiltonian"]["mass"]
    return list(m) if isinstance(m, list) else [m]


def _semantic_messages(data, lines, base: Path) -> list[tuple[int, str]]:
    out = []

    def err(path, msg):
        out.append((_anchor(lines, path), f"{_dotted(path)}: {msg}"))

    kind = data["scenario"]
    axes = data["grid"]["axes"]
    ndim = len(axes)
    for k, ax in enumerate(axes):
        if not ax["x_max"] > ax["x_min"]:
            err(("grid", "axes", k, "x_max"), "must exceed x_min")
    total = math.prod(ax["n_points"] for ax in axes)
    cap = data["grid"].get("point_cap", DEFAULT_POINT_CAP)
    if total > cap:
        err(("grid", "axes"), f"grid has {total} points in total, above the cap of {cap}")

    need = {"fga": 1, "adiabatic": 1, "mctdh-spawn": 2}
    if kind in need and ndim != need[kind]:
        err(("grid", "axes"), f"{kind} scenarios need {need[kind]} axis/axes, got {ndim}")
    if kind == "tdh" and ndim < 2:
        err(("grid", "axes"), "tdh scenarios need at least 2 axes")
    masses = _masses(data)
    if len(masses) not in (1, ndim):
        err(("hamiltonian", "mass"), f"give 1 or {ndim} masses, got {len(masses)}")

    ham = data["hamiltonian"]
    if kind == "adiabatic":
        if "model" not in ham:
            err(("hamiltonian",), "adiabatic scenarios need 'model'")
        elif ("name" in ham["model"]) == ("file" in ham["model"]):
            err(("hamiltonian", "model"), "give exactly one of 'name' or 'file'")
        if "potential" in ham:
            err(("hamiltonian", "potential"), "not used by adiabatic scenarios (use 'model')")
    else:
        if "potential" not in ham:
            err(("hamiltonian",), "'potential' is required for this scenario")
        if "model" in ham:
            err(("hamiltonian", "model"), "only adiabatic scenarios take a 'model'")
    for sect, key in (("potential", "file"), ("model", "file")):
        rel = ham.get(sect, {}).get(key)
        if rel is not None:
            p = Path(rel) if Path(rel).is_absolute() else base / rel
            if not p.is_file():
                err(("hamiltonian", sect, key), f"file not found: {p}")
    for j, term in enumerate(ham.get("potential", {}).get("terms", [])):
        if len(term["powers"]) != ndim:
            err(("hamiltonian", "potential", "terms", j, "powers"),
                f"needs {ndim} exponents (one per axis), got {len(term['powers'])}")

    init = data["initial_state"]
    required = {
        "fga": ["q0", "p0", "dq"],
        "tdh": ["packets"],
        "adiabatic": ["packets", "surface"],
        "mctdh-spawn": ["spfs", "coefficients"],
        "exact-only": [],
    }[kind]
    for key in required:
        if key not in init:
            err(("initial_state",), f"initial_state.{key}: required key is missing for {kind}")
    allowed = set(required) | ({"packets", "random"} if kind == "exact-only" else set())
    for key in init:
        if key not in allowed:
            err(("initial_state", key), f"not used by {kind} scenarios")
    if kind == "exact-only" and ("packets" in init) == bool(init.get("random", False)):
        err(("initial_state",), "exact-only needs either 'packets' or 'random': true")
    if "packets" in init and kind in ("tdh", "exact-only", "adiabatic"):
        n_pk = len(init["packets"])
        if n_pk != ndim:
            err(("initial_state", "packets"), f"need one packet per axis ({ndim}), got {n_pk}")
    if kind == "mctdh-spawn" and "spfs" in init and "coefficients" in init:
        n1, n2 = (len(x) for x in init["spfs"])
        C = init["coefficients"]
        if C != "random" and (len(C) != n1 or any(len(r) != n2 for r in C)):
            err(("initial_state", "coefficients"), f"must be a {n1}x{n2} matrix")
    if "guided_width" in data and kind != "fga":
        err(("guided_width",), "only fga scenarios take a guided width")
    if "spawn" in data and kind != "mctdh-spawn":
        err(("spawn",), "only mctdh-spawn scenarios take spawn settings")
    if kind == "adiabatic" and "surface" in init and "model" in ham and "name" in ham["model"]:
        n_el = 3 if len(ham["model"].get("params", {}).get("kappa", [0, 0])) == 3 else 2
        if init["surface"] >= n_el:
            err(("initial_state", "surface"), f"surface index must be below {n_el}")
    return out


def parse_config(text: str, path="<config>", base: Path | None = None) -> ScenarioConfig:
    """Validate ``text`` completely; raise :class:`ConfigError` with every problem."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(path, [f"{exc.lineno}: invalid JSON: {exc.msg}"]) from None
    lines = key_lines(text)
    found = _schema_messages(data, lines)
    if not found:
        found = _semantic_messages(data, lines, base or Path(path).parent)
    if found:
        found.sort(key=lambda x: x[0])
        raise ConfigError(path, [f"{ln}: {msg}" for ln, msg in found])
    full = {**DEFAULTS, **data}
    full.setdefault("name", Path(path).stem if path != "<config>" else full["scenario"])
    return ScenarioConfig(Path(path), full)


def validate_config(path) -> ScenarioConfig:
    """Read and validate a configuration file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(p, [f"1: cannot read file: {exc.strerror}"]) from None
    return parse_config(text, p, p.parent)
