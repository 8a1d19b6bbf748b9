"""Experiment configuration: YAML documents, defaults and validation.

A config document has the top-level keys ``command``, ``seed``,
``output_dir``, ``parameters`` and (optionally) ``build``. ``parameters``
is validated against the per-command defaults below; unknown keys are
rejected with the line they appear on.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

COMMANDS = ("verify-bias", "verify-oracle", "verify-trust-region", "train", "hack-compare", "gamma-bound")
TOP_LEVEL = ("command", "seed", "output_dir", "parameters", "build")

_SHAPING = {"mode": "slas", "gamma": 1.0, "epsilon": 1e-8, "norm_scope": "batch"}
_POLICY = {"steps": 16, "sigma": 0.7, "sigma_kind": "constant"}
_REWARD = {
    "true_center": [0.0, 2.0],
    "hack_coeff": 0.5,
    "noise_std": 0.01,
    "clip_range": None,
    "sensitivities": [1.0, 0.02],
}
_TRAIN = {
    "clip_eps": 0.2,
    "kl_beta": 0.01,
    "lr": 2.0,
    "group_size": 8,
    "prompts_per_batch": 8,
    "iterations": 150,
    "inner_epochs": 1,
    "trust_zeta": 0.05,
    "policy": _POLICY,
    "reward": _REWARD,
}

DEFAULTS: dict[str, dict] = {
    "verify-bias": {"G": [8, 16], "sigma": 1.0, "trials": 1_000_000},
    "verify-oracle": {"instances": 200, "max_n": 16, "gammas": [0.0, 0.5, 1.0, 2.0], "eta": 1.0, "tol": 1e-7},
    "verify-trust-region": {"instances": 100, "max_outcomes": 8, "tau": 0.01, "trials": 10_000, "gammas": [0.0, 0.5, 1.0, 2.0]},
    "gamma-bound": {"zeta": 0.5, "tau": 0.1, "lambda_max": 1.0, "g_max": 1.0, "r_max": 2.0, "k_r": None, "c_const": 1.0},
    "train": {**_TRAIN, "shaping": _SHAPING},
    "hack-compare": {
        **_TRAIN,
        "shaping_a": {"mode": "std_grpo", "gamma": 0.0, "epsilon": 1e-8, "norm_scope": "prompt"},
        "shaping_b": _SHAPING,
        "seeds": list(range(10)),
    },
}

# keys whose default is None but which take a number when set
_OPTIONAL_NUMBER = {"r_max", "k_r"}


@dataclass
class ExperimentConfig:
    command: str
    parameters: dict
    seed: int = 0
    output_dir: str = ""
    build: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "parameters": copy.deepcopy(self.parameters),
        }


def _node_to_python(node, path: tuple, lines: dict):
    """Convert a composed YAML node, recording the line of every mapping key."""
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k))
            if key in out:
                raise ConfigError(f"line {k.start_mark.line + 1}: duplicate key {key!r}")
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _node_to_python(v, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_node_to_python(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def parse_document(text: str, source: str = "<config>") -> tuple[dict, dict]:
    """Parse YAML text into ``(document, key_lines)``."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
    if node is None:
        return {}, {}
    lines: dict = {}
    doc = _node_to_python(node, (), lines)
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}:1: config must be a mapping")
    return doc, lines


def _where(source: str, lines: dict, path: tuple) -> str:
    line = lines.get(path)
    return f"{source}:{line}" if line is not None else source


def _check_value(key, default, value, where):
    if value is None and key in _OPTIONAL_NUMBER:
        return None
    if isinstance(value, str) and isinstance(default, float):
        # YAML 1.1 reads exponent forms like 1e-8 as strings
        try:
            value = float(value)
        except ValueError:
            pass
    if default is None:
        if value is None:
            return None
        if key in _OPTIONAL_NUMBER:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: {key} must be a number or null, got {value!r}")
            return float(value)
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: {key} must be true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: {key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: {key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: {key} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list):
            raise ConfigError(f"{where}: {key} must be a list, got {value!r}")
        return value
    return value


def merge_parameters(defaults: dict, given: dict, source: str, lines: dict, path: tuple = ("parameters",)) -> dict:
    """Overlay ``given`` on ``defaults``, rejecting unknown keys."""
    out = copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"{_where(source, lines, path)}: {'.'.join(map(str, path))} must be a mapping")
    for key, value in given.items():
        p = path + (key,)
        where = _where(source, lines, p)
        if key not in defaults:
            known = ", ".join(sorted(defaults))
            raise ConfigError(f"{where}: unknown key {'.'.join(map(str, p))!r} (known: {known})")
        if isinstance(defaults[key], dict):
            out[key] = merge_parameters(defaults[key], value, source, lines, p)
        else:
            out[key] = _check_value(key, defaults[key], value, where)
    return out


def _parse_override(item: str) -> tuple[tuple, object]:
    if "=" not in item:
        raise ConfigError(f"--set {item!r}: expected key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"--set {item!r}: empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        raise ConfigError(f"--set {item!r}: cannot parse value") from None
    parts = tuple(key.split("."))
    if parts[0] not in TOP_LEVEL:
        parts = ("parameters",) + parts
    return parts, value


def _assign(doc: dict, parts: tuple, value, item: str):
    cur = doc
    for p in parts[:-1]:
        nxt = cur.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {item!r}: {p!r} is not a mapping")
        cur = nxt
    cur[parts[-1]] = value


def load_config(
    command: str | None = None,
    path: str | Path | None = None,
    seed: int | None = None,
    out: str | None = None,
    overrides: list[str] | tuple = (),
) -> ExperimentConfig:
    """Resolve a config from an optional file plus flag overrides (last wins)."""
    source = str(path) if path is not None else "<flags>"
    doc, lines = {}, {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{source}: cannot read config ({exc.strerror})") from None
        doc, lines = parse_document(text, source)
    for key in doc:
        if key not in TOP_LEVEL:
            raise ConfigError(f"{_where(source, lines, (key,))}: unknown top-level key {key!r}")

    for item in overrides:
        parts, value = _parse_override(item)
        _assign(doc, parts, value, item)
        for i in range(1, len(parts) + 1):
            lines.pop(parts[:i], None)

    file_cmd = doc.get("command")
    if command is not None and file_cmd is not None and file_cmd != command:
        raise ConfigError(f"{_where(source, lines, ('command',))}: config is for {file_cmd!r}, not {command!r}")
    cmd = command or file_cmd
    if cmd is None:
        raise ConfigError(f"{source}: no command given")
    if cmd not in COMMANDS:
        raise ConfigError(f"{_where(source, lines, ('command',))}: unknown command {cmd!r}")

    params = merge_parameters(DEFAULTS[cmd], doc.get("parameters") or {}, source, lines)
    s = doc.get("seed", 0) if seed is None else seed
    if isinstance(s, bool) or not isinstance(s, int) or s < 0:
        raise ConfigError(f"{_where(source, lines, ('seed',))}: seed must be a non-negative integer, got {s!r}")
    output_dir = out if out is not None else doc.get("output_dir") or f"runs/{cmd}"
    build = doc.get("build") or {}
    if not isinstance(build, dict):
        raise ConfigError(f"{_where(source, lines, ('build',))}: build must be a mapping")
    return ExperimentConfig(cmd, params, int(s), str(output_dir), build)
