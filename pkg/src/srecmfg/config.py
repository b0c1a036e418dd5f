"""INI-style market configuration files.

Sections: ``[compliance]``, one ``[class.<k>]`` per sub-population,
``[scheme]`` and ``[run]``. Unknown sections or keys are rejected, and
every problem in a file is reported in a single error.
"""
from __future__ import annotations

import configparser
import hashlib
import os
from fractions import Fraction
from importlib import resources

from .errors import ConfigError
from .params import (
    DEFAULT_DELTA,
    RUN_DEFAULTS,
    SCHEME_DEFAULTS,
    ComplianceParams,
    MarketConfig,
    RunSettings,
    SchemeSettings,
    SubPopulationParams,
    validation_problems,
)

COMPLIANCE_KEYS = ("T", "P", "R", "delta", "periods")
CLASS_KEYS = ("pi", "h", "sigma", "zeta", "gamma", "nu0", "m0")
INT_KEYS = {"x_nodes", "max_iters", "quad_nodes", "seed", "n_agents", "periods"}
STR_KEYS = {"out_dir", "forward_moments"}
OUT_DIR_ENV = "SRECMFG_OUT_DIR"


def _number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        return float(Fraction(text.replace(" ", "")))
    return float(text)


def _integer(text: str) -> int:
    v = _number(text)
    if v != int(v):
        raise ValueError(f"{text!r} is not an integer")
    return int(v)


def _vector(text: str):
    parts = [p for p in text.replace("\n", ",").split(",") if p.strip()]
    if len(parts) == 1:
        return _number(parts[0])
    return tuple(_number(p) for p in parts)


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case sensitive (T, P, R)
    return cp


def _class_order(names):
    if all(n.isdigit() for n in names):
        return sorted(names, key=int)
    return list(names)


def parse_config(text: str, source: str = "<string>") -> MarketConfig:
    """Build and validate a :class:`MarketConfig` from configuration text."""
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: cannot parse: {exc}"]) from None

    problems = []
    applied = []

    def get(section, key, conv, default=None, record=None):
        if not cp.has_option(section, key):
            if record is not None:
                applied.append(record)
            return default
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, ZeroDivisionError) as exc:
            problems.append(f"{section}.{key}: cannot read {raw!r} ({exc})")
            return default

    known = {"compliance", "scheme", "run"}
    class_names = []
    for sec in cp.sections():
        if sec.startswith("class."):
            class_names.append(sec.split(".", 1)[1])
        elif sec not in known:
            problems.append(f"unknown section [{sec}]")

    allowed = {"compliance": COMPLIANCE_KEYS, "scheme": tuple(SCHEME_DEFAULTS), "run": tuple(RUN_DEFAULTS)}
    for sec in cp.sections():
        keys = CLASS_KEYS if sec.startswith("class.") else allowed.get(sec, ())
        for key in cp.options(sec):
            if key not in keys:
                problems.append(f"unknown key {sec}.{key}")

    if not cp.has_section("compliance"):
        problems.append("missing section [compliance]")
        cp.add_section("compliance")
    for key in ("T", "P", "R"):
        if not cp.has_option("compliance", key):
            problems.append(f"missing key compliance.{key}")

    classes = []
    for name in _class_order(class_names):
        sec = f"class.{name}"
        vals = {}
        for key in CLASS_KEYS:
            if not cp.has_option(sec, key):
                problems.append(f"missing key {sec}.{key}")
                vals[key] = float("nan")
            else:
                vals[key] = get(sec, key, _vector if key in ("h", "sigma") else _number, float("nan"))
        classes.append(SubPopulationParams(name=name, **vals))

    R = get("compliance", "R", _vector, ())
    if not isinstance(R, tuple):
        R = (R,) * max(len(classes), 1)
    compliance = ComplianceParams(
        T=get("compliance", "T", _number, float("nan")),
        P=get("compliance", "P", _number, float("nan")),
        R=R,
        delta=get("compliance", "delta", _number, DEFAULT_DELTA, record="compliance.delta"),
        periods=get("compliance", "periods", _integer, 1),
    )

    scheme_vals = {}
    for key, default in SCHEME_DEFAULTS.items():
        conv = _integer if key in INT_KEYS else (str.strip if key in STR_KEYS else _number)
        scheme_vals[key] = get("scheme", key, conv, default, record=f"scheme.{key}")
    env_out = os.environ.get(OUT_DIR_ENV)
    run_vals = {}
    for key, default in RUN_DEFAULTS.items():
        if key == "out_dir" and env_out:
            default = env_out
        conv = _integer if key in INT_KEYS else (str.strip if key in STR_KEYS else _number)
        run_vals[key] = get("run", key, conv, default, record=f"run.{key}")

    cfg = MarketConfig(
        compliance=compliance,
        classes=tuple(classes),
        scheme=SchemeSettings(**scheme_vals),
        run=RunSettings(**run_vals),
        defaults_applied=tuple(applied),
    )
    if not problems:
        problems.extend(validation_problems(cfg))
    if problems:
        raise ConfigError([f"{source}: {p}" for p in problems])
    return cfg


def load_config(path) -> MarketConfig:
    """Read and validate a configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror or exc}"]) from None
    return parse_config(text, source=str(path))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: MarketConfig) -> str:
    """Configuration text that :func:`parse_config` maps back to ``cfg``."""
    c = cfg.compliance
    lines = ["[compliance]"]
    lines += [f"T = {_fmt(float(c.T))}", f"P = {_fmt(float(c.P))}", f"R = {_fmt(tuple(float(r) for r in c.R))}"]
    lines += [f"delta = {_fmt(float(c.delta))}", ""]
    for k, p in enumerate(cfg.classes):
        lines.append(f"[class.{p.name or k + 1}]")
        for key in CLASS_KEYS:
            v = getattr(p, key)
            lines.append(f"{key} = {_fmt(tuple(float(x) for x in v) if isinstance(v, tuple) else float(v))}")
        lines.append("")
    lines.append("[scheme]")
    for key in SCHEME_DEFAULTS:
        v = getattr(cfg.scheme, key)
        lines.append(f"{key} = {_fmt(v if key in INT_KEYS | STR_KEYS else float(v))}")
    lines += ["", "[run]"]
    for key in RUN_DEFAULTS:
        lines.append(f"{key} = {_fmt(getattr(cfg.run, key))}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: MarketConfig) -> str:
    """sha256 of the canonical text form, excluding the output directory."""
    text = dump_config(cfg.with_(run__out_dir=""))
    return hashlib.sha256(text.encode()).hexdigest()


def builtin_config_path(name: str = "paper_base") -> str:
    return str(resources.files("srecmfg") / "data" / f"{name}.cfg")
