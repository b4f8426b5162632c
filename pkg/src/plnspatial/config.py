"""Run configuration: an INI document validated against a JSON schema.

Example::

    [run]
    model = M9
    data = survey.csv
    out = fits/m9
    seed = 11

    [chain]
    n_iter = 70000
    burn_in = 10000
    thin = 60
    n_chains = 2

    [priors]
    beta_prior_var = 100
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .errors import InputError
from .model import MODELS, Hyperpriors
from .sampler import ChainConfig

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POSINT = {"type": "integer", "minimum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "plnspatial run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "model": {"enum": sorted(MODELS)},
                "data": {"type": "string"},
                "out": {"type": "string"},
                "seed": {"type": "integer", "minimum": 0},
                "circle_kernel": {"enum": ["chord", "arc"]},
            },
        },
        "chain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_iter": _POSINT,
                "burn_in": {"type": "integer", "minimum": 0},
                "thin": _POSINT,
                "n_chains": _POSINT,
                "adapt_target": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "adapt_window": _POSINT,
            },
        },
        "priors": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "beta_prior_var": _POS,
                "ig_shape": _POS,
                "sigma2_scale": _POS,
                "tau2_scale": _POS,
                "phi_shape": _POS,
                "range_prob": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "pareto_scale": _POS,
                "pareto_shape": _POS,
                "prelim_shift": _POS,
                "phi_gamma_shape": _POS,
                "phi_gamma_rate": _POS,
            },
        },
    },
}


def _field_type(section: str, key: str):
    props = SCHEMA["properties"].get(section, {}).get("properties", {})
    spec = props.get(key)
    if spec is None:
        return None
    return spec.get("type", "string")


def parse_ini(text: str) -> dict:
    """INI text -> nested dict with values typed according to the schema."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InputError(f"malformed configuration: {exc}") from None
    out = {}
    for section in cp.sections():
        out[section] = {}
        for key, raw in cp.items(section):
            kind = _field_type(section, key)
            value: object = raw.strip()
            try:
                if kind == "integer":
                    value = int(raw)
                elif kind == "number":
                    value = float(raw)
            except ValueError:
                raise InputError(f"[{section}] {key}: {raw!r} is not a {kind}") from None
            if (section, key) == ("run", "model"):
                value = str(value).upper()
            out[section][key] = value
    return out


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"invalid configuration at {where}: {exc.message}") from None


@dataclass
class RunConfig:
    model: str = "M9"
    chain: ChainConfig = field(default_factory=ChainConfig)
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)
    data: Path | None = None
    out: Path | None = None
    seed: int = 0
    circle_kernel: str = "chord"

    def __post_init__(self):
        key = self.model.strip().upper()
        if key not in MODELS:
            raise InputError(f"unknown model {self.model!r}")
        self.model = key

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        validate(doc)
        run = doc.get("run", {})
        seed = int(run.get("seed", 0))
        chain_doc = dict(doc.get("chain", {}))
        chain_doc.setdefault("seed", seed)
        try:
            chain = ChainConfig(**chain_doc)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        pri = dict(doc.get("priors", {}))
        g_shape, g_rate = pri.pop("phi_gamma_shape", None), pri.pop("phi_gamma_rate", None)
        if (g_shape is None) != (g_rate is None):
            raise InputError("phi_gamma_shape and phi_gamma_rate must be given together")
        hp = Hyperpriors(**pri, phi_gamma=None if g_shape is None else (g_shape, g_rate))
        return cls(
            model=run.get("model", "M9"),
            chain=chain,
            hyperpriors=hp,
            data=Path(run["data"]) if "data" in run else None,
            out=Path(run["out"]) if "out" in run else None,
            seed=seed,
            circle_kernel=run.get("circle_kernel", "chord"),
        )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise InputError(f"cannot read configuration {path}: {exc}") from None
        return cls.from_dict(parse_ini(text))

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "chain": self.chain.to_dict(),
            "hyperpriors": self.hyperpriors.summary(),
            "data": None if self.data is None else str(self.data),
            "out": None if self.out is None else str(self.out),
            "seed": self.seed,
            "circle_kernel": self.circle_kernel,
        }
