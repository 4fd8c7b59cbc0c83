"""Scenario configuration for the on-ramp merge environment."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Union

# scenario id -> (CAVs, HDVs, max observable vehicles)
SCENARIO_TABLE = {
    1: (2, 4, 4),
    2: (3, 3, 4),
    3: (4, 2, 6),
    4: (4, 4, 6),
    5: (6, 6, 6),
}

DENSITY = {1: "light", 2: "light", 3: "medium", 4: "medium", 5: "heavy"}

FEATURE_MASKS = ("full", "no_position", "no_presence_priority", "no_velocity", "add_angles")


class ConfigError(ValueError):
    """Invalid or unplaceable scenario configuration."""


@dataclass
class ScenarioConfig:
    scenario: int = 1
    n_cav: int = 2
    n_hdv: int = 4
    n_obs: int = 4
    features: str = "full"
    horizon: int = 120
    seed: int = 0

    # road
    highway_length: float = 520.0
    lane_width: float = 4.0
    merge_start: float = 200.0
    merge_end: float = 310.0
    sensing_radius: float = 90.0
    observe_ramp_end: bool = True

    # timing
    policy_hz: float = 1.0
    substeps: int = 15

    # vehicles
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0
    v_max: float = 30.0
    v_min: float = 0.0
    v_stall: float = 5.0
    speed_step: float = 5.0
    hdv_target_speed: float = 15.0
    cav_accel_gain: float = 1.0 / 0.6
    cav_accel_max: float = 5.0
    cav_decel_max: float = 5.0

    # IDM / MOBIL
    idm_accel: float = 3.0
    idm_comfort_decel: float = 5.0
    idm_headway: float = 1.5
    idm_jam_gap: float = 2.0
    idm_delta: float = 4.0
    idm_min_accel: float = -9.0
    idm_horizon: float = 150.0
    hdv_politeness: float = 0.3
    pv_politeness: float = 0.0
    mobil_safe_decel: float = 4.0
    mobil_gain_threshold: float = 0.2

    # spawning
    spawn_highway: tuple = (40.0, 215.0)
    spawn_ramp: tuple = (60.0, 160.0)
    spawn_pv: tuple = (0.0, 15.0)
    spawn_spacing: float = 25.0
    spawn_jitter: float = 3.0
    cav_speed_range: tuple = (18.0, 24.0)
    hdv_speed_range: tuple = (13.0, 17.0)
    pv_speed: float = 20.0

    # reward
    w_speed: float = 0.5
    w_crash: float = 2.0
    w_stall: float = 0.5
    w_weave: float = 0.1
    w_pv: float = 0.5
    reward_offset: float = 0.5
    d_pv: float = 40.0

    def __post_init__(self):
        self.validate()

    @property
    def n_features(self) -> int:
        return 8 if self.features == "add_angles" else 6

    @property
    def dt(self) -> float:
        return 1.0 / (self.policy_hz * self.substeps)

    @property
    def n_ramp_cav(self) -> int:
        return self.n_cav // 2

    def validate(self) -> None:
        if self.n_cav < 1 or self.n_hdv < 0:
            raise ConfigError("need at least one CAV and a non-negative HDV count")
        if self.n_obs < 1:
            raise ConfigError("n_obs must be positive")
        if self.features not in FEATURE_MASKS:
            raise ConfigError(f"unknown feature mask {self.features!r}; valid: {', '.join(FEATURE_MASKS)}")
        if not (self.merge_start < self.merge_end < self.highway_length):
            raise ConfigError("road geometry must satisfy merge_start < merge_end < highway_length")
        if self.horizon < 1 or self.substeps < 1:
            raise ConfigError("horizon and substeps must be positive")

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def scenario_config(scenario: int, **overrides) -> ScenarioConfig:
    """Build the config for one of the five benchmark densities."""
    if scenario not in SCENARIO_TABLE:
        raise ConfigError(f"scenario must be one of {sorted(SCENARIO_TABLE)}, got {scenario}")
    n_cav, n_hdv, n_obs = SCENARIO_TABLE[scenario]
    base = dict(scenario=scenario, n_cav=n_cav, n_hdv=n_hdv, n_obs=n_obs)
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig(**base)


_SECTIONS = {
    "scenario": ("scenario", "n_cav", "n_hdv", "n_obs", "features", "horizon", "seed"),
    "road": ("highway_length", "lane_width", "merge_start", "merge_end", "sensing_radius", "observe_ramp_end"),
    "timing": ("policy_hz", "substeps"),
    "reward": ("w_speed", "w_crash", "w_stall", "w_weave", "w_pv", "reward_offset", "d_pv"),
}


def _section_of(name: str) -> str:
    for section, keys in _SECTIONS.items():
        if name in keys:
            return section
    if name.startswith(("idm_", "mobil_")) or name.endswith("_politeness"):
        return "controllers"
    if name.startswith("spawn") or name.endswith("_range") or name == "pv_speed":
        return "spawn"
    return "vehicles"


def _parse_value(raw: str, default):
    if isinstance(default, tuple):
        return tuple(float(p) for p in raw.replace(",", " ").split())
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    """Read a sectioned ``key = value`` file.

    When ``[scenario] scenario`` is given the benchmark counts for that id are
    used as the base, so a file only needs the keys it changes.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    defaults = ScenarioConfig()
    fields = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(ScenarioConfig)}
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"unknown key [{section}] {key}")
            values[key] = _parse_value(raw, fields[key])
    scenario = values.pop("scenario", None)
    if scenario is not None:
        return scenario_config(scenario, **values)
    return ScenarioConfig(**values)


def dump_config(cfg: ScenarioConfig, path: Union[str, Path]) -> None:
    parser = configparser.ConfigParser()
    for f in dataclasses.fields(cfg):
        section = _section_of(f.name)
        if not parser.has_section(section):
            parser.add_section(section)
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = " ".join(repr(float(v)) for v in value)
        parser.set(section, f.name, str(value))
    with open(path, "w") as fh:
        parser.write(fh)
