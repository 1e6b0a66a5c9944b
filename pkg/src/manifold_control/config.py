"""Scenario files: YAML with nested sections, validated into a ScenarioConfig."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .errors import ConfigError, ExpressionError
from .expr import Expression

PRESETS = ("taylor_green_stable", "taylor_green_mirror")


def _preset(name: str) -> Dict[str, Any]:
    if name == "taylor_green_stable":
        return {
            "field": {"builtin": "taylor_green", "params": {"U": 1.0, "L": 1.0}},
            "saddle_guess": [0.9, 0.1],
            "manifold": {"kind": "stable", "p_bound": -1.0, "time_anchor": -1.0, "anchor": [1.0, 0.5]},
            "desired": {"offset": ["exp(-p)*cos(t-p)", "0"]},
            "eps": [0.05],
            "control": {"extension": "analytic", "override": "taylor_green", "policy": "limit"},
            "grid": {"p": [-1.0, 2.0, 61], "t": [-1.0, 0.0, 21], "times": [-0.9], "ftle": {"nx": 512, "ny": 256}},
        }
    if name == "taylor_green_mirror":
        return {
            "field": {"builtin": "taylor_green", "params": {"U": 1.0, "L": 1.0}},
            "saddle_guess": [1.05, 0.95],
            "manifold": {"kind": "unstable", "p_bound": 1.0, "time_anchor": 1.0, "anchor": [1.0, 0.5]},
            "desired": {"offset": ["exp(p)*cos(t-p)", "0"]},
            "eps": [0.05],
            "control": {"extension": "analytic", "override": "taylor_green", "policy": "limit"},
            "grid": {"p": [-2.0, 1.0, 61], "t": [0.0, 1.0, 21], "times": [0.9], "ftle": {"nx": 512, "ny": 256, "tau": -1.0}},
        }
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


@dataclass
class FTLESettings:
    nx: int = 512
    ny: int = 256
    tau: float = 1.0
    steps: int = 200
    band: Optional[Tuple[float, float]] = None


@dataclass
class ScenarioConfig:
    field: Dict[str, Any]
    saddle_guess: Tuple[float, float]
    kind: str
    p_bound: float
    time_anchor: float
    anchor: Optional[Tuple[float, float]]
    offset: Optional[Tuple[str, str]]
    target: Optional[Tuple[str, str]]
    eps: List[float]
    policy: str = "limit"
    extension: str = "tube"
    override: Any = None
    p_grid: Tuple[float, float, int] = (-1.0, 2.0, 61)
    t_grid: Tuple[float, float, int] = (-1.0, 0.0, 21)
    times: List[float] = field(default_factory=list)
    ftle: FTLESettings = field(default_factory=FTLESettings)
    integrator: Dict[str, Any] = field(default_factory=dict)
    output: str = "out"
    source: str = "<memory>"


def _get(d, key, where, default=...):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    if key not in d:
        if default is ...:
            raise ConfigError(f"{where}: missing required key '{key}'")
        return default
    return d[key]


def _floats(v, n, where):
    try:
        out = [float(x) for x in v]
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected {n} numbers, got {v!r}") from None
    if len(out) != n:
        raise ConfigError(f"{where}: expected {n} numbers, got {len(out)}")
    return out


def _grid(v, where):
    lo, hi, n = _floats(v, 3, where)
    if int(n) != n or n < 1:
        raise ConfigError(f"{where}: count must be a positive integer")
    return (lo, hi, int(n))


def _check_exprs(pair, variables, where):
    if not isinstance(pair, (list, tuple)) or len(pair) != 2:
        raise ConfigError(f"{where}: expected two expression strings")
    for i, text in enumerate(pair):
        try:
            Expression(str(text), variables)
        except ExpressionError as exc:
            raise ConfigError(f"{where}[{i}]: {exc}") from None
    return (str(pair[0]), str(pair[1]))


def parse_config(raw: Dict[str, Any], source: str = "<memory>") -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    where = source
    fld = _get(raw, "field", where)
    if "builtin" in fld:
        if fld["builtin"] != "taylor_green":
            raise ConfigError(f"{where}: field.builtin must be 'taylor_green'")
    elif "expression" in fld:
        _check_exprs(fld["expression"], ("x", "y"), f"{where}: field.expression")
        _floats(_get(fld, "domain", f"{where}: field"), 4, f"{where}: field.domain")
    else:
        raise ConfigError(f"{where}: field needs 'builtin' or 'expression'")

    man = _get(raw, "manifold", where)
    kind = _get(man, "kind", f"{where}: manifold", "stable")
    if kind not in ("stable", "unstable"):
        raise ConfigError(f"{where}: manifold.kind must be stable or unstable")
    T = float(_get(man, "time_anchor", f"{where}: manifold"))
    if kind == "stable" and not T < 0:
        raise ConfigError(f"{where}: stable runs need time_anchor < 0")
    if kind == "unstable" and not T > 0:
        raise ConfigError(f"{where}: unstable runs need time_anchor > 0")
    anchor = man.get("anchor")
    anchor = tuple(_floats(anchor, 2, f"{where}: manifold.anchor")) if anchor is not None else None

    des = _get(raw, "desired", where)
    offset = target = None
    if "offset" in des:
        offset = _check_exprs(des["offset"], ("p", "t", "eps"), f"{where}: desired.offset")
    elif "target" in des:
        target = _check_exprs(des["target"], ("p", "t", "eps"), f"{where}: desired.target")
    else:
        raise ConfigError(f"{where}: desired needs 'offset' or 'target'")

    eps = _get(raw, "eps", where)
    eps = [eps] if isinstance(eps, (int, float)) else eps
    try:
        eps = [float(e) for e in eps]
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: eps must be a number or a list of numbers") from None
    if not eps or any(e < 0 for e in eps):
        raise ConfigError(f"{where}: eps list must be nonempty and nonnegative")

    ctl = raw.get("control", {}) or {}
    policy = ctl.get("policy", "limit")
    if policy not in ("limit", "scale"):
        raise ConfigError(f"{where}: control.policy must be limit or scale")
    extension = ctl.get("extension", "tube")
    override = ctl.get("override")
    if extension not in ("tube", "analytic"):
        raise ConfigError(f"{where}: control.extension must be tube or analytic")
    if extension == "analytic":
        if override is None:
            raise ConfigError(f"{where}: analytic extension needs control.override")
        if override != "taylor_green":
            override = _check_exprs(override, ("x", "y", "t", "eps"), f"{where}: control.override")

    grid = raw.get("grid", {}) or {}
    p_grid = _grid(grid.get("p", (-1.0, 2.0, 61)), f"{where}: grid.p")
    t_grid = _grid(grid.get("t", (T, 0.0, 21) if kind == "stable" else (0.0, T, 21)), f"{where}: grid.t")
    times = [float(t) for t in grid.get("times", [])]
    f = grid.get("ftle", {}) or {}
    band = f.get("band")
    ftle = FTLESettings(
        int(f.get("nx", 512)),
        int(f.get("ny", 256)),
        float(f.get("tau", 1.0 if kind == "stable" else -1.0)),
        int(f.get("steps", 200)),
        tuple(_floats(band, 2, f"{where}: grid.ftle.band")) if band is not None else None,
    )
    if ftle.nx < 2 or ftle.ny < 2 or ftle.tau == 0 or ftle.steps < 1:
        raise ConfigError(f"{where}: grid.ftle needs nx, ny >= 2, tau != 0 and steps >= 1")

    return ScenarioConfig(
        field=fld,
        saddle_guess=tuple(_floats(_get(raw, "saddle_guess", where), 2, f"{where}: saddle_guess")),
        kind=kind,
        p_bound=float(_get(man, "p_bound", f"{where}: manifold")),
        time_anchor=T,
        anchor=anchor,
        offset=offset,
        target=target,
        eps=eps,
        policy=policy,
        extension=extension,
        override=override,
        p_grid=p_grid,
        t_grid=t_grid,
        times=times,
        ftle=ftle,
        integrator=dict(raw.get("integrator", {}) or {}),
        output=str(raw.get("output", "out")),
        source=source,
    )


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark is not None else str(path)
        raise ConfigError(f"{loc}: {getattr(exc, 'problem', None) or exc}") from None
    return parse_config(raw, str(path))


def preset_config(name: str, overrides: Optional[Dict[str, Any]] = None) -> ScenarioConfig:
    raw = copy.deepcopy(_preset(name))
    for k, v in (overrides or {}).items():
        raw[k] = v
    return parse_config(raw, f"preset:{name}")


def dump_preset(name: str) -> str:
    return yaml.safe_dump(_preset(name), sort_keys=False)
