"""Vehicle records and the scripted driver models (IDM + MOBIL)."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Sequence

from .config import ScenarioConfig

RAMP, RIGHT, LEFT = 0, 1, 2


class Kind(IntEnum):
    CAV = 0
    HDV = 1
    PV = 2


class Action(IntEnum):
    LANE_LEFT = 0
    LANE_RIGHT = 1
    IDLE = 2
    FASTER = 3
    SLOWER = 4


N_ACTIONS = len(Action)


@dataclass(slots=True)
class Vehicle:
    id: int
    kind: Kind
    lane: int
    x: float
    y: float
    vx: float
    vy: float = 0.0
    target_speed: float = 0.0
    target_lane: int = -1
    crashed: bool = False
    finished: bool = False
    last_action: int = -1

    def __post_init__(self):
        if self.target_lane < 0:
            self.target_lane = self.lane

    @property
    def alive(self) -> bool:
        return not self.crashed

    @property
    def changing_lane(self) -> bool:
        return self.target_lane != self.lane

    def occupies(self, lane: int) -> bool:
        return self.lane == lane or self.target_lane == lane


def lane_center(cfg: ScenarioConfig, lane: int) -> float:
    # y grows to the right: left lane at 0, right lane at one width, ramp at two
    return (LEFT - lane) * cfg.lane_width


def lane_is_valid(cfg: ScenarioConfig, lane: int, x: float) -> bool:
    if lane in (RIGHT, LEFT):
        return True
    return lane == RAMP and x < cfg.merge_end


def neighbours(vehicles: Sequence[Vehicle], ego: Vehicle, lane: int, x: Optional[float] = None):
    """Nearest vehicle ahead and behind ``ego`` among those occupying ``lane``."""
    x = ego.x if x is None else x
    leader = follower = None
    for v in vehicles:
        if v is ego or v.finished or not v.occupies(lane):
            continue
        if v.x > x or (v.x == x and v.id > ego.id):
            if leader is None or v.x < leader.x:
                leader = v
        elif follower is None or v.x > follower.x:
            follower = v
    return leader, follower


def idm_acceleration(cfg: ScenarioConfig, ego: Optional[Vehicle], leader: Optional[Vehicle],
                     target_speed: Optional[float] = None, ego_x: Optional[float] = None) -> float:
    """Intelligent Driver Model acceleration, bounded to [idm_min_accel, idm_accel]."""
    if ego is None:
        return 0.0
    v0 = max(target_speed if target_speed is not None else ego.target_speed, 1e-6)
    x = ego.x if ego_x is None else ego_x
    a = cfg.idm_accel * (1.0 - (ego.vx / v0) ** cfg.idm_delta)
    if leader is not None:
        gap = leader.x - x - cfg.vehicle_length
        if gap < cfg.idm_horizon:
            if gap <= 0.0:
                return cfg.idm_min_accel
            dv = ego.vx - leader.vx
            s_star = cfg.idm_jam_gap + max(
                0.0, ego.vx * cfg.idm_headway + ego.vx * dv / (2.0 * (cfg.idm_accel * cfg.idm_comfort_decel) ** 0.5))
            a -= cfg.idm_accel * (s_star / gap) ** 2
    return min(max(a, cfg.idm_min_accel), cfg.idm_accel)


def _politeness(cfg: ScenarioConfig, v: Vehicle) -> float:
    return cfg.pv_politeness if v.kind == Kind.PV else cfg.hdv_politeness


def _follower_accel(cfg, follower: Optional[Vehicle], leader: Optional[Vehicle]) -> float:
    if follower is None:
        return 0.0
    return idm_acceleration(cfg, follower, leader)


def mobil_lane_change(cfg: ScenarioConfig, vehicles: Sequence[Vehicle], ego: Vehicle) -> int:
    """Lane offset (-1, 0, +1) chosen by the MOBIL incentive and safety test.

    +1 moves toward the left lane. Only highway lanes are considered; scripted
    vehicles never enter the ramp.
    """
    if ego.crashed or ego.finished or ego.changing_lane:
        return 0
    politeness = _politeness(cfg, ego)
    old_leader, old_follower = neighbours(vehicles, ego, ego.lane)
    self_a = idm_acceleration(cfg, ego, old_leader)
    best, best_gain = 0, cfg.mobil_gain_threshold
    for offset in (+1, -1):
        lane = ego.lane + offset
        if lane not in (RIGHT, LEFT):
            continue
        new_leader, new_follower = neighbours(vehicles, ego, lane)
        # both the ego and the new follower must keep a positive bumper gap
        if new_leader is not None and new_leader.x - ego.x <= cfg.vehicle_length:
            continue
        if new_follower is not None and ego.x - new_follower.x <= cfg.vehicle_length:
            continue
        new_follower_pred = _follower_accel(cfg, new_follower, ego)
        if new_follower_pred < -cfg.mobil_safe_decel:
            continue
        self_pred = idm_acceleration(cfg, ego, new_leader)
        if self_pred < -cfg.mobil_safe_decel:
            continue
        gain = self_pred - self_a
        if politeness:
            new_follower_now = _follower_accel(cfg, new_follower, new_leader)
            old_follower_now = _follower_accel(cfg, old_follower, ego)
            old_follower_pred = _follower_accel(cfg, old_follower, old_leader)
            gain += politeness * (new_follower_pred - new_follower_now + old_follower_pred - old_follower_now)
        if gain > best_gain:
            best, best_gain = offset, gain
    return best


def hdv_control(cfg: ScenarioConfig, vehicles: Sequence[Vehicle], v: Vehicle) -> tuple:
    """(acceleration, lane offset) for a human-driven vehicle."""
    if v.kind != Kind.HDV:
        raise ValueError(f"vehicle {v.id} is not an HDV")
    leader, _ = neighbours(vehicles, v, v.lane)
    return idm_acceleration(cfg, v, leader), mobil_lane_change(cfg, vehicles, v)


def pv_control(cfg: ScenarioConfig, vehicles: Sequence[Vehicle], v: Vehicle) -> tuple:
    """(acceleration, lane offset) for the priority vehicle.

    Same car-following law as the HDVs at twice their target speed; zero
    politeness, so it only changes lane when that helps itself and is safe.
    """
    if v.kind != Kind.PV:
        raise ValueError(f"vehicle {v.id} is not the priority vehicle")
    leader, _ = neighbours(vehicles, v, v.lane)
    return idm_acceleration(cfg, v, leader), mobil_lane_change(cfg, vehicles, v)


def cav_acceleration(cfg: ScenarioConfig, v: Vehicle) -> float:
    """Proportional speed tracking toward the commanded target speed."""
    a = cfg.cav_accel_gain * (v.target_speed - v.vx)
    return min(max(a, -cfg.cav_decel_max), cfg.cav_accel_max)


def apply_action(cfg: ScenarioConfig, v: Vehicle, action: int) -> bool:
    """Set the CAV's target speed or start a lane change.

    Returns True when a lane change was started. Infeasible lane changes
    fall back to holding the current target speed.
    """
    if v.kind != Kind.CAV:
        raise ValueError(f"vehicle {v.id} is not a CAV")
    action = Action(action)
    v.last_action = int(action)
    if action == Action.FASTER:
        v.target_speed = min(v.target_speed + cfg.speed_step, cfg.v_max)
    elif action == Action.SLOWER:
        v.target_speed = max(v.target_speed - cfg.speed_step, 0.0)
    elif action in (Action.LANE_LEFT, Action.LANE_RIGHT):
        target = v.lane + (1 if action == Action.LANE_LEFT else -1)
        if _cav_can_enter(cfg, v, target):
            start_lane_change(cfg, v, target)
            return True
    return False


def _cav_can_enter(cfg: ScenarioConfig, v: Vehicle, target: int) -> bool:
    if v.changing_lane:
        return False
    if v.lane == RAMP:
        # the ramp joins the right lane only inside the merge window
        return target == RIGHT and cfg.merge_start <= v.x < cfg.merge_end
    return target in (RIGHT, LEFT)


def start_lane_change(cfg: ScenarioConfig, v: Vehicle, target: int) -> None:
    v.target_lane = target
    duration = 1.0 / cfg.policy_hz
    v.vy = (lane_center(cfg, target) - lane_center(cfg, v.lane)) / duration


def finish_lane_change(cfg: ScenarioConfig, v: Vehicle) -> None:
    if v.changing_lane and not v.crashed:
        v.lane = v.target_lane
        v.y = lane_center(cfg, v.lane)
        v.vy = 0.0
