"""Problem definitions: bundled presets and the JSON problem document."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .core import (BrownianTree, CoefficientModel, ControlSpec, InvalidArgument, Lipschitz,
                   SpikeSpec, TimeGrid, build_tree)

DEFAULT_BETA0 = 0.5
DEFAULT_C_BETA = 1.0

LQ_KEYS = ("A1", "B1", "C1", "D1", "A2", "B2", "C2", "D2", "A3", "B3", "C3", "D3", "A4", "B4", "C4", "D4")


@dataclass(frozen=True)
class Problem:
    name: str
    coeffs: CoefficientModel
    grid: TimeGrid
    x0: float
    control: ControlSpec
    spike: SpikeSpec
    scale: float = 1.0
    beta0: float = DEFAULT_BETA0
    C_beta: Mapping[int, float] = field(default_factory=lambda: {b: DEFAULT_C_BETA for b in (2, 4, 6, 8)})
    lq: Any = None
    linear: Any = None
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def tree(self) -> BrownianTree:
        return build_tree(self.grid.T, self.grid.N, self.x0, self.scale)

    def with_steps(self, N: int) -> "Problem":
        return replace(self, grid=TimeGrid(self.grid.T, int(N)))

    def with_spike(self, spike: SpikeSpec) -> "Problem":
        return replace(self, spike=spike)

    def candidate(self):
        return self.control.candidate_control(self.grid.N)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _linear_strings(c: Mapping[str, str], du: tuple[float, float, float], kappa: str) -> dict[str, str]:
    return {
        "b": f"({c['alpha1']})*x + ({c['beta1']})*y + ({c['gamma1']})*z + ({c['L1']}) + {du[0]}*u",
        "sigma": f"({c['alpha2']})*x + ({c['beta2']})*y + ({c['gamma2']})*z + ({c['L2']}) + {du[1]}*u",
        "g": f"({c['alpha3']})*x + ({c['beta3']})*y + ({c['gamma3']})*z + ({c['L3']}) + {du[2]}*u",
        "phi": f"({kappa})*x",
    }


LINEAR_PRESETS: dict[str, dict[str, Any]] = {
    "linear-const": {
        "coeffs": {"alpha1": "0.2", "beta1": "0.1", "gamma1": "0.1", "L1": "0.5",
                   "alpha2": "0.1", "beta2": "0.1", "gamma2": "0.1", "L2": "0.3",
                   "alpha3": "0.3", "beta3": "0.2", "gamma3": "0.1", "L3": "0.2"},
        "kappa": "0.8", "x0": 1.0, "du": (0.2, 0.3, 0.1), "lipschitz": (0.8, 0.1, 0.1),
    },
    "linear-timevar": {
        "coeffs": {"alpha1": "0.3*cos(t)", "beta1": "0.15*sin(t)", "gamma1": "0.1", "L1": "sin(2*t)",
                   "alpha2": "0.2*t", "beta2": "0.05", "gamma2": "0.1*cos(t)", "L2": "0.4 + 0.1*t",
                   "alpha3": "0.2", "beta3": "0.1*cos(t)", "gamma3": "0.15", "L3": "cos(t)"},
        "kappa": "1.0", "x0": 0.5, "du": (0.1, 0.25, 0.2), "lipschitz": (1.0, 0.15 * 0.8415, 0.1),
    },
    "linear-zcoupled": {
        "coeffs": {"alpha1": "-0.1", "beta1": "-0.1", "gamma1": "0.15", "L1": "0.2",
                   "alpha2": "0.15", "beta2": "0.1", "gamma2": "0.15", "L2": "0.5",
                   "alpha3": "0.1", "beta3": "-0.2", "gamma3": "0.2", "L3": "-0.3*t"},
        "kappa": "0.6", "x0": -0.5, "du": (0.3, 0.2, 0.1), "lipschitz": (0.6, 0.15, 0.15),
    },
}


def _nonlinear() -> dict[str, Any]:
    return {
        "coefficients": {
            "b": "0.2*sin(x) + 0.1*tanh(y) + 0.1*sin(z) + 0.3*u",
            "sigma": "0.4 + 0.1*cos(x) + 0.05*tanh(y) + 0.05*sin(z) + 0.25*u",
            "g": "0.3*sin(x) + 0.2*tanh(y) + 0.2*sin(z) + 0.5*u**2 - 0.2*u",
            "phi": "0.5*sin(x)",
        },
        "lipschitz": {"L": 1.0, "L1": 0.5, "L2": 0.1, "L3": 0.05},
        "x0": 0.5, "scale": 0.5,
        "control": {"domain": {"kind": "finite", "values": [-1.0, 0.0, 1.0]}, "candidate": 0.0},
        "spike": {"t0": 0.25, "eps": 0.125, "u": 1.0},
    }


def _linear_z() -> dict[str, Any]:
    return {
        "coefficients": {
            "b": "0.1*sin(x) + 0.1*tanh(y) + 0.05*z + 0.2*u",
            "sigma": "0.3*z + 0.4 + 0.1*sin(x) + 0.05*tanh(y) + 0.3*u",
            "g": "0.2*cos(x) + 0.1*y + 0.1*z + 0.2*u**2",
            "phi": "0.4*sin(x) + 0.1*x",
        },
        "lipschitz": {"L": 1.0, "L1": 0.5, "L2": 0.1, "L3": 0.3},
        "tags": ["sigma-linear-z"],
        "x0": 0.0, "scale": 0.5,
        "control": {"domain": {"kind": "interval", "lo": -1.0, "hi": 1.0, "resolution": 21}, "candidate": 0.0},
        "spike": {"t0": 0.5, "eps": 0.125, "u": 1.0},
    }


def _example(a: float = 0.5, b: float = 1.0, c: float = 0.25, d: float = 1.0) -> dict[str, Any]:
    return {
        "coefficients": {"b": "0", "sigma": f"({a})*z + ({b})*u", "g": f"({c})*u", "phi": f"({d})*x"},
        "lipschitz": {"L": max(1.0, abs(a), abs(b), abs(c), abs(d)), "L1": abs(d), "L2": 0.0, "L3": abs(a)},
        "tags": ["sigma-linear-z"],
        "x0": 1.0, "scale": 2.0,
        "control": {"domain": {"kind": "finite", "values": [-1.0, 0.0, 1.0]}, "candidate": 0.0},
        "spike": {"t0": 0.25, "eps": 0.125, "u": -1.0},
        "lq": {"C2": a, "D2": b, "D3": c, "D4": 1.0, "F": d, "G": 0.0, "J": 0.0},
    }


def _lq_generic() -> dict[str, Any]:
    lq = {"A1": 0.1, "B1": 0.05, "C1": 0.05, "D1": 0.3, "A2": 0.1, "B2": 0.05, "C2": 0.1, "D2": 0.4,
          "A3": 0.2, "B3": 0.1, "C3": 0.05, "D3": 0.2, "A4": 0.5, "B4": 0.2, "C4": 0.1, "D4": 1.0,
          "F": 0.5, "G": 0.3, "J": 0.0}
    return {
        "coefficients": lq_coefficient_strings(lq),
        "lipschitz": {"L": 1.0, "L1": 0.5, "L2": 0.05, "L3": 0.1},
        "x0": 1.0, "scale": 0.5,
        "control": {"domain": {"kind": "finite", "values": [-1.0, 0.0, 1.0]}, "candidate": 0.0},
        "spike": {"t0": 0.25, "eps": 0.125, "u": 1.0},
        "lq": lq,
    }


def lq_coefficient_strings(lq: Mapping[str, Any]) -> dict[str, str]:
    v = {k: lq.get(k, 0.0) for k in LQ_KEYS}
    return {
        "b": f"({v['A1']})*x + ({v['B1']})*y + ({v['C1']})*z + ({v['D1']})*u",
        "sigma": f"({v['A2']})*x + ({v['B2']})*y + ({v['C2']})*z + ({v['D2']})*u",
        "g": f"({v['A3']})*x + ({v['B3']})*y + ({v['C3']})*z + ({v['D3']})*u",
        "phi": f"({lq.get('F', 0.0)})*x + ({lq.get('J', 0.0)})",
    }


def _linear_preset(name: str) -> dict[str, Any]:
    p = LINEAR_PRESETS[name]
    c = p["coeffs"]
    return {
        "coefficients": _linear_strings(c, p["du"], p["kappa"]),
        "lipschitz": {"L": 1.0, "L1": p["lipschitz"][0], "L2": p["lipschitz"][1], "L3": p["lipschitz"][2]},
        "x0": p["x0"], "scale": 0.5,
        "control": {"domain": {"kind": "finite", "values": [-1.0, 0.0, 1.0]}, "candidate": 0.0},
        "spike": {"t0": 0.25, "eps": 0.125, "u": 1.0},
        "linear": {**c, "kappa": p["kappa"]},
    }


PRESETS: dict[str, Any] = {
    "zero": lambda: {
        "coefficients": {"b": "0", "sigma": "0", "g": "0", "phi": "0"},
        "lipschitz": {"L": 1.0, "L1": 0.0, "L2": 0.0, "L3": 0.0},
        "x0": 0.0, "scale": 1.0,
        "control": {"domain": {"kind": "finite", "values": [0.0]}, "candidate": 0.0},
        "spike": {"t0": 0.25, "eps": 0.25, "u": 0.0},
    },
    "brownian": lambda: {
        "coefficients": {"b": "0", "sigma": "1", "g": "0", "phi": "x"},
        "lipschitz": {"L": 1.0, "L1": 1.0, "L2": 0.0, "L3": 0.0},
        "x0": 0.0, "scale": 1.0,
        "control": {"domain": {"kind": "finite", "values": [0.0]}, "candidate": 0.0},
        "spike": {"t0": 0.25, "eps": 0.25, "u": 0.0},
    },
    "decoupled": lambda: {
        "coefficients": {
            "b": "0.2*cos(x) + 0.3*u",
            "sigma": "0.5 + 0.1*sin(x) + 0.2*u",
            "g": "0.3*sin(x) + 0.2*tanh(y) + 0.1*sin(z) + 0.3*u**2",
            "phi": "0.5*sin(x)",
        },
        "lipschitz": {"L": 1.0, "L1": 0.5, "L2": 0.0, "L3": 0.0},
        "tags": ["sigma-z-free"],
        "x0": 0.0, "scale": 0.5,
        "control": {"domain": {"kind": "finite", "values": [-1.0, 0.0, 1.0]}, "candidate": 0.0},
        "spike": {"t0": 0.25, "eps": 0.125, "u": 1.0},
    },
    "nonlinear": _nonlinear,
    "linear-z": _linear_z,
    "example": _example,
    "lq-generic": _lq_generic,
    **{name: (lambda n=name: _linear_preset(n)) for name in LINEAR_PRESETS},
}

EXAMPLE_PARAMS = ("a", "b", "c", "d")


# ---------------------------------------------------------------------------
# JSON document
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_COEFF_SPEC = {
    "type": "object",
    "additionalProperties": False,
    "required": ["b", "sigma", "g", "phi"],
    "properties": {
        "b": {"type": "string"}, "sigma": {"type": "string"}, "g": {"type": "string"}, "phi": {"type": "string"},
        "lipschitz": {"type": "object", "additionalProperties": False,
                      "properties": {k: _NUM for k in ("L", "L1", "L2", "L3")}},
        "tags": {"type": "array", "items": {"enum": ["sigma-z-free", "sigma-linear-z"]}},
    },
}

PROBLEM_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["coefficients"],
    "properties": {
        "T": {"type": "number", "exclusiveMinimum": 0},
        "N": {"type": "integer", "minimum": 1},
        "x0": _NUM,
        "coefficients": {"oneOf": [{"type": "string", "enum": sorted(PRESETS)}, _COEFF_SPEC]},
        "params": {"type": "object", "additionalProperties": _NUM},
        "control": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "domain": {"type": "object", "additionalProperties": False, "required": ["kind"],
                           "properties": {"kind": {"enum": ["finite", "interval"]},
                                          "values": {"type": "array", "items": _NUM, "minItems": 1},
                                          "lo": _NUM, "hi": _NUM,
                                          "resolution": {"type": "integer", "minimum": 2}}},
                "candidate": {"oneOf": [_NUM, {"type": "array", "items": _NUM}]},
            },
        },
        "spike": {"type": "object", "additionalProperties": False, "required": ["t0", "eps", "u"],
                  "properties": {"t0": _NUM, "eps": {"type": "number", "exclusiveMinimum": 0}, "u": _NUM}},
        "lattice": {"type": "object", "additionalProperties": False,
                    "properties": {"scale": {"type": "number", "exclusiveMinimum": 0}}},
        "assumptions": {"type": "object", "additionalProperties": False,
                        "properties": {"beta0": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                                       "C_beta": {"oneOf": [_NUM, {"type": "object",
                                                                   "additionalProperties": False,
                                                                   "properties": {k: _NUM for k in
                                                                                  ("2", "4", "6", "8")}}]}}},
        "lq": {"type": "object", "additionalProperties": False,
               "properties": {k: _NUM for k in LQ_KEYS + ("F", "G", "J")}},
    },
}


class ConfigError(InvalidArgument):
    """Problem document does not match the schema; ``path`` names the offending key."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def validate_document(doc: Mapping[str, Any], schema: Mapping[str, Any] = PROBLEM_SCHEMA) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(e.message, path)


def preset_document(name: str, **params: float) -> dict[str, Any]:
    if name not in PRESETS:
        raise InvalidArgument(f"unknown preset '{name}'; known: {sorted(PRESETS)}")
    if name == "example":
        return PRESETS[name](**params)
    if params:
        raise InvalidArgument(f"preset '{name}' takes no parameters")
    return PRESETS[name]()


def load_problem(doc: Mapping[str, Any] | str | Path, **overrides: Any) -> Problem:
    """Build a Problem from a JSON document (dict, JSON text or path)."""
    if isinstance(doc, Path) or (isinstance(doc, str) and not doc.lstrip().startswith("{")):
        doc = json.loads(Path(doc).read_text())
    elif isinstance(doc, str):
        doc = json.loads(doc)
    doc = copy.deepcopy(dict(doc))
    doc.update({k: v for k, v in overrides.items() if v is not None})
    validate_document(doc)
    coeffs = doc["coefficients"]
    name = coeffs if isinstance(coeffs, str) else "inline"
    if isinstance(coeffs, str):
        base = preset_document(coeffs, **doc.get("params", {}))
    else:
        base = {"coefficients": {k: coeffs[k] for k in ("b", "sigma", "g", "phi")},
                "lipschitz": coeffs.get("lipschitz", {}), "tags": coeffs.get("tags", []),
                "x0": 0.0, "scale": 1.0,
                "control": {"domain": {"kind": "finite", "values": [0.0]}, "candidate": 0.0},
                "spike": {"t0": 0.0, "eps": 0.125, "u": 0.0}}
    T = float(doc.get("T", 1.0))
    N = int(doc.get("N", 64))
    x0 = float(doc.get("x0", base["x0"]))
    scale = float(doc.get("lattice", {}).get("scale", base["scale"]))
    ctrl = {**base["control"], **doc.get("control", {})}
    dom = ctrl["domain"]
    cand = ctrl.get("candidate", 0.0)
    control = ControlSpec(kind=dom["kind"], values=tuple(dom.get("values", ())), lo=float(dom.get("lo", 0.0)),
                          hi=float(dom.get("hi", 0.0)), resolution=int(dom.get("resolution", 101)),
                          candidate=tuple(cand) if isinstance(cand, list) else float(cand))
    sp_doc = doc.get("spike", base["spike"])
    spike = SpikeSpec(float(sp_doc["t0"]), float(sp_doc["eps"]), float(sp_doc["u"]))
    asm = doc.get("assumptions", {})
    beta0 = float(asm.get("beta0", DEFAULT_BETA0))
    cb = asm.get("C_beta", DEFAULT_C_BETA)
    C_beta = {b: float(cb) for b in (2, 4, 6, 8)} if not isinstance(cb, dict) else \
        {b: float(cb.get(str(b), DEFAULT_C_BETA)) for b in (2, 4, 6, 8)}
    lq_doc = doc.get("lq", base.get("lq"))
    coeff_strings = base["coefficients"]
    if lq_doc is not None and isinstance(coeffs, str) and coeffs not in ("example", "lq-generic"):
        raise InvalidArgument("lq block only applies to the LQ presets or inline LQ problems")
    if lq_doc is not None and not isinstance(coeffs, str):
        coeff_strings = lq_coefficient_strings(lq_doc)
    lip = Lipschitz(**{k: float(v) for k, v in base.get("lipschitz", {}).items()})
    model = CoefficientModel.from_strings(coeff_strings, lip, base.get("tags", ()))
    lq = None
    if lq_doc is not None:
        from .lq import LQCoefficients
        lq = LQCoefficients.from_mapping(lq_doc)
    linear = None
    if "linear" in base:
        from .fbsde import LinearFbsdeSpec
        lin = dict(base["linear"])
        linear = LinearFbsdeSpec.from_strings(lin, kappa=lin.pop("kappa"), x0=x0)
    return Problem(name=name, coeffs=model, grid=TimeGrid(T, N), x0=x0, control=control, spike=spike,
                   scale=scale, beta0=beta0, C_beta=C_beta, lq=lq, linear=linear,
                   params=dict(doc.get("params", {})))


def preset(name: str, T: float = 1.0, N: int = 64, **params: float) -> Problem:
    doc: dict[str, Any] = {"coefficients": name, "T": T, "N": N}
    if params:
        doc["params"] = params
    return load_problem(doc)
