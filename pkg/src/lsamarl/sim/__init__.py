"""Highway on-ramp merge environment."""

from .config import (
    DENSITY,
    FEATURE_MASKS,
    SCENARIO_TABLE,
    ConfigError,
    ScenarioConfig,
    dump_config,
    load_config,
    scenario_config,
)
from .env import (
    EpisodeDone,
    StepEvents,
    WorldState,
    apply_feature_mask,
    collision_check,
    observe,
    observe_all,
    reset,
    reward,
    step,
    write_trajectory,
)
from .vehicles import N_ACTIONS, Action, Kind, Vehicle, apply_action, hdv_control, pv_control

__all__ = [
    "Action", "ConfigError", "DENSITY", "EpisodeDone", "FEATURE_MASKS", "Kind", "N_ACTIONS",
    "SCENARIO_TABLE", "ScenarioConfig", "StepEvents", "Vehicle", "WorldState", "apply_action",
    "apply_feature_mask", "collision_check", "dump_config", "hdv_control", "load_config", "observe",
    "observe_all", "pv_control", "reset", "reward", "scenario_config", "step", "write_trajectory",
]
