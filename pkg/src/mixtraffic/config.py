"""Scenario configuration files and turning-count tables.

Configs are INI files (see README for the schema). Every key is checked
against the schema and unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from .baselines import HlOnlyConfig, SignalPhase, SignalPlan
from .core import MOVEMENTS, Approach, IntersectionSpec, Movement, Turn, lane_turn_table
from .env import CONTROLLERS, Scenario
from .microsim import IdmParams, SimParams
from .policy import SafetyBands
from .ppo import TrainConfig


class ConfigError(ValueError):
    pass


class TurningCountWarning(UserWarning):
    pass


TURNING_COUNT_COLUMNS = ("approach", "turn", "count_per_hour")


def load_turning_counts(path) -> Dict[Movement, float]:
    """Read an ``approach,turn,count_per_hour`` CSV into hourly rates per movement.

    Right-turn rows are skipped with a warning, absent movements get 0.
    """
    path = Path(path)
    text = path.read_text()
    demand = {m: 0.0 for m in MOVEMENTS}
    rows = [(n, line) for n, line in enumerate(text.splitlines(), start=1)
            if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        warnings.warn(f"{path}: empty turning-count file, demand is zero", TurningCountWarning, stacklevel=2)
        return demand
    header_line, header = rows[0]
    cols = tuple(c.strip().lower() for c in next(csv.reader([header])))
    if cols != TURNING_COUNT_COLUMNS:
        raise ConfigError(f"{path}:{header_line}: expected header {','.join(TURNING_COUNT_COLUMNS)}, got {header!r}")
    if len(rows) == 1:
        warnings.warn(f"{path}: no turning-count rows, demand is zero", TurningCountWarning, stacklevel=2)
    seen = set()
    for n, line in rows[1:]:
        cells = [c.strip() for c in next(csv.reader([line]))]
        if len(cells) != 3:
            raise ConfigError(f"{path}:{n}: expected 3 fields, got {len(cells)}")
        a, t, c = cells
        try:
            approach = Approach(a.upper())
        except ValueError:
            raise ConfigError(f"{path}:{n}: unknown approach {a!r}") from None
        try:
            count = float(c)
        except ValueError:
            raise ConfigError(f"{path}:{n}: count {c!r} is not a number") from None
        if count != count or count in (float("inf"), float("-inf")):
            raise ConfigError(f"{path}:{n}: count must be finite")
        if count < 0:
            raise ConfigError(f"{path}:{n}: negative count {count:g}")
        if t.upper() == "R":
            warnings.warn(f"{path}:{n}: right-turn row ignored", TurningCountWarning, stacklevel=2)
            continue
        try:
            m = Movement.of(approach, Turn(t.upper()))
        except ValueError:
            raise ConfigError(f"{path}:{n}: unknown turn {t!r}") from None
        if m in seen:
            raise ConfigError(f"{path}:{n}: duplicate row for {m.label}")
        seen.add(m)
        demand[m] = count
    return demand


# -- schema -------------------------------------------------------------------------


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _dataclass_schema(cls, skip=()) -> Dict[str, Callable[[str], Any]]:
    conv = {"float": float, "int": int, "bool": _bool, "str": str, "Tuple[int, ...]": _ints}
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        out[f.name] = conv[t]
    return out


SCENARIO_KEYS = {
    "controller": str,
    "rv_penetration": float,
    "horizon": float,
    "seed": int,
    "checkpoint": str,
    "hl_period": float,
    "n_cells": int,
    "w_max": float,
    "gridlock_timeout": float,
}
INTERSECTION_KEYS = {
    "lanes_per_approach": int,
    "lane_length": float,
    "interior_length": float,
    "control_zone_radius": float,
    "shared_lanes": _bool,
    "lane_turns": str,
}
SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    "scenario": SCENARIO_KEYS,
    "intersection": INTERSECTION_KEYS,
    "demand": {"file": str, "default": float, **{m.label: float for m in MOVEMENTS}},
    "idm": _dataclass_schema(IdmParams),
    "sim": _dataclass_schema(SimParams, skip=("idm",)),
    "safety": {"bands": str},
    "signal": {"green": float, "all_red": float, "phases": str},
    "hl_only": {"stop_decel": float},
    "train": _dataclass_schema(TrainConfig),
}


def _parse_bands(text: str) -> SafetyBands:
    """``"20:30:3, 10:20:2, ..."`` -> SafetyBands (d_low:d_high:v_limit)."""
    bands = []
    for chunk in text.split(","):
        if chunk.strip():
            parts = chunk.split(":")
            if len(parts) != 3:
                raise ValueError(f"band {chunk.strip()!r} must be d_low:d_high:v_limit")
            bands.append(tuple(float(p) for p in parts))
    return SafetyBands(tuple(bands))


def _parse_phases(text: str, green: float, all_red: float) -> SignalPlan:
    """``"S-C N-C; S-L N-L:20:2; ..."``: movements, optionally ``:green:all_red`` per phase."""
    phases = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        parts = chunk.split(":")
        if len(parts) not in (1, 3):
            raise ValueError(f"phase {chunk.strip()!r} must be 'movements' or 'movements:green:all_red'")
        movements = frozenset(Movement.parse(x) for x in parts[0].split())
        g, r = (float(parts[1]), float(parts[2])) if len(parts) == 3 else (green, all_red)
        phases.append(SignalPhase(movements, g, r))
    return SignalPlan(tuple(phases))


def _parse_lane_turns(text: str, lanes: int):
    """``"0:L, 1:C"`` or ``"0:LC 1:C"`` -> permitted turns per lane index."""
    mapping = {}
    for chunk in text.replace(",", " ").split():
        k, _, turns = chunk.partition(":")
        mapping[int(k)] = turns
    if sorted(mapping) != list(range(lanes)):
        raise ValueError(f"lane_turns must list lanes 0..{lanes - 1}")
    return lane_turn_table(mapping)


@dataclass
class ScenarioConfig:
    """A parsed configuration file."""

    path: Optional[Path]
    scenario: Scenario
    controller: str = "none"
    checkpoint: Optional[Path] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    has_train: bool = False
    config_hash: str = ""
    demand_source: str = "default"

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, scenario=replace(self.scenario, seed=seed))

    def scenario_fingerprint(self) -> str:
        """Hash of everything that defines the traffic, excluding the controller."""
        sc = self.scenario
        parts = [repr(sc.spec), repr(sc.sim), repr(sorted((m.label, v) for m, v in sc.demand.items())),
                 repr(sc.rv_penetration), repr(sc.horizon), repr(sc.n_cells), repr(sc.w_max)]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def _read_parser(text: str, source: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cp.defaults():
        raise ConfigError(f"{source}: keys outside a section: {', '.join(cp.defaults())}")
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
    return cp


def _values(cp: configparser.ConfigParser, section: str, source: str) -> Dict[str, Any]:
    if not cp.has_section(section):
        return {}
    out = {}
    for key, raw in cp[section].items():
        try:
            out[key] = SCHEMA[section][key](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: [{section}] {key}: {exc}") from None
    return out


def parse_config(text: str, base_dir: Path = Path("."), source: str = "<config>", path: Optional[Path] = None) -> ScenarioConfig:
    cp = _read_parser(text, source)
    digest = hashlib.sha256(text.encode())
    try:
        sc_vals = _values(cp, "scenario", source)
        controller = sc_vals.pop("controller", "none")
        if controller not in CONTROLLERS:
            raise ConfigError(f"{source}: controller must be one of {', '.join(CONTROLLERS)}")
        checkpoint = sc_vals.pop("checkpoint", None)
        checkpoint = (base_dir / checkpoint) if checkpoint else None
        pen = sc_vals.get("rv_penetration", 0.5)
        if not 0.0 <= pen <= 1.0:
            raise ConfigError(f"{source}: rv_penetration must lie in [0, 1]")
        if sc_vals.get("horizon", 600.0) <= 0:
            raise ConfigError(f"{source}: horizon must be positive")

        iv = _values(cp, "intersection", source)
        lane_turns = iv.pop("lane_turns", None)
        if lane_turns is not None:
            iv["lane_turns"] = _parse_lane_turns(lane_turns, iv.get("lanes_per_approach", 2))
        spec = IntersectionSpec(**iv)

        idm = IdmParams(**_values(cp, "idm", source))
        sim = SimParams(**_values(cp, "sim", source), idm=idm)

        dv = _values(cp, "demand", source)
        demand_source = "default"
        if "file" in dv:
            if len(dv) > 1:
                raise ConfigError(f"{source}: [demand] file cannot be combined with per-movement rates")
            dpath = base_dir / dv["file"]
            if not dpath.is_file():
                raise ConfigError(f"{source}: demand file {dpath} does not exist")
            digest.update(dpath.read_bytes())
            demand = load_turning_counts(dpath)
            demand_source = str(dpath)
        else:
            base = dv.pop("default", 300.0)
            demand = {m: dv.get(m.label, base) for m in MOVEMENTS}
        for m, rate in demand.items():
            if rate < 0:
                raise ConfigError(f"{source}: negative demand for {m.label}")

        bands = SafetyBands()
        if cp.has_option("safety", "bands"):
            bands = _parse_bands(cp["safety"]["bands"])
        if bands.outer > spec.control_zone_radius:
            raise ConfigError(f"{source}: safety bands reach beyond the control zone")

        sg = _values(cp, "signal", source)
        green, all_red = sg.get("green", 30.0), sg.get("all_red", 3.0)
        if "phases" in sg:
            signal = _parse_phases(sg["phases"], green, all_red)
        else:
            signal = SignalPlan.default(green, all_red)

        hl = HlOnlyConfig(**_values(cp, "hl_only", source)).check(sim)
        train = TrainConfig(**_values(cp, "train", source))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None

    scenario = Scenario(spec=spec, sim=sim, demand=demand, bands=bands, signal=signal, hl_only=hl, **sc_vals)
    return ScenarioConfig(
        path=path,
        scenario=scenario,
        controller=controller,
        checkpoint=checkpoint,
        train=train,
        has_train=cp.has_section("train"),
        config_hash=digest.hexdigest()[:16],
        demand_source=demand_source,
    )


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), path.parent, str(path), path)
