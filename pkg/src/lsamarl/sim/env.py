"""Two-lane highway with an on-ramp merge, CAV agents, HDVs and one priority vehicle."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, ScenarioConfig
from .vehicles import (
    LEFT,
    RAMP,
    RIGHT,
    Kind,
    Vehicle,
    apply_action,
    cav_acceleration,
    finish_lane_change,
    hdv_control,
    idm_acceleration,
    lane_center,
    neighbours,
    pv_control,
    start_lane_change,
)

BARRIER = -1


@dataclass
class StepEvents:
    crashes: list = field(default_factory=list)
    crashed_cavs: list = field(default_factory=list)
    lane_changes: list = field(default_factory=list)
    finished: list = field(default_factory=list)
    active: list = field(default_factory=list)


@dataclass
class WorldState:
    cfg: ScenarioConfig
    vehicles: list
    rng: np.random.Generator
    t: int = 0
    sim_substep: int = 0
    done: bool = False
    events: StepEvents = field(default_factory=StepEvents)
    trajectory: Optional[list] = None

    @property
    def cavs(self) -> list:
        return [v for v in self.vehicles if v.kind == Kind.CAV]

    @property
    def pv(self) -> Optional[Vehicle]:
        for v in self.vehicles:
            if v.kind == Kind.PV:
                return v
        return None

    def active_agents(self) -> list:
        return [not (v.crashed or v.finished) for v in self.cavs]

    def fingerprint(self) -> bytes:
        """Exact byte encoding of the dynamic state, for determinism checks."""
        parts = [struct.pack("<qqq", self.t, self.sim_substep, int(self.done))]
        for v in self.vehicles:
            parts.append(struct.pack("<qqqq5d??q", v.id, int(v.kind), v.lane, v.target_lane,
                                     v.x, v.y, v.vx, v.vy, v.target_speed,
                                     v.crashed, v.finished, v.last_action))
        return b"".join(parts)


# ---------------------------------------------------------------------------
# reset


def _slots(lo: float, hi: float, spacing: float) -> list:
    return list(np.arange(lo, hi + 1e-9, spacing))


def reset(cfg: ScenarioConfig, seed: Optional[int] = None, record: bool = False):
    """Spawn a fresh episode; returns (state, one observation per CAV)."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n_ramp = cfg.n_ramp_cav
    n_high_cav = cfg.n_cav - n_ramp
    ramp_slots = _slots(*cfg.spawn_ramp, cfg.spawn_spacing)
    high_slots = [(lane, x) for lane in (RIGHT, LEFT) for x in _slots(*cfg.spawn_highway, cfg.spawn_spacing)]
    if cfg.spawn_spacing - 2 * cfg.spawn_jitter <= cfg.vehicle_length:
        raise ConfigError("spawn spacing leaves no room for jitter without overlap")
    if n_ramp > len(ramp_slots) or n_high_cav + cfg.n_hdv > len(high_slots):
        raise ConfigError(
            f"spawn ranges hold {len(ramp_slots)} ramp and {len(high_slots)} highway slots; "
            f"need {n_ramp} and {n_high_cav + cfg.n_hdv}")

    ramp_pick = sorted(rng.choice(len(ramp_slots), size=n_ramp, replace=False).tolist())
    high_pick = rng.choice(len(high_slots), size=n_high_cav + cfg.n_hdv, replace=False).tolist()

    vehicles = []
    vid = 0

    def jitter() -> float:
        return float(rng.uniform(-cfg.spawn_jitter, cfg.spawn_jitter))

    for k in ramp_pick:
        x = float(ramp_slots[k]) + jitter()
        v = float(rng.uniform(*cfg.cav_speed_range))
        vehicles.append(Vehicle(vid, Kind.CAV, RAMP, x, lane_center(cfg, RAMP), v, target_speed=v))
        vid += 1
    for k in high_pick[:n_high_cav]:
        lane, x = high_slots[k]
        v = float(rng.uniform(*cfg.cav_speed_range))
        vehicles.append(Vehicle(vid, Kind.CAV, lane, float(x) + jitter(), lane_center(cfg, lane), v, target_speed=v))
        vid += 1
    for k in high_pick[n_high_cav:]:
        lane, x = high_slots[k]
        v = float(rng.uniform(*cfg.hdv_speed_range))
        vehicles.append(Vehicle(vid, Kind.HDV, lane, float(x) + jitter(), lane_center(cfg, lane), v,
                                target_speed=cfg.hdv_target_speed))
        vid += 1
    x_pv = float(rng.uniform(*cfg.spawn_pv))
    vehicles.append(Vehicle(vid, Kind.PV, LEFT, x_pv, lane_center(cfg, LEFT), cfg.pv_speed,
                            target_speed=min(2.0 * cfg.hdv_target_speed, cfg.v_max)))

    state = WorldState(cfg=cfg, vehicles=vehicles, rng=rng, trajectory=[] if record else None)
    if collision_check(state):
        raise ConfigError("initial placement overlaps; widen spawn ranges")
    return state, observe_all(state)


# ---------------------------------------------------------------------------
# geometry


def on_road(cfg: ScenarioConfig, v: Vehicle) -> bool:
    return v.x <= cfg.highway_length


def collision_check(state: WorldState) -> list:
    """Overlapping pairs of on-road vehicle footprints, each pair once as (lower id, higher id)."""
    cfg = state.cfg
    length, width = cfg.vehicle_length, cfg.vehicle_width
    live = sorted((v for v in state.vehicles if on_road(cfg, v)), key=lambda v: v.x)
    pairs = []
    for i, a in enumerate(live):
        for b in live[i + 1:]:
            if b.x - a.x >= length:
                break
            if abs(a.y - b.y) < width:
                pairs.append((min(a.id, b.id), max(a.id, b.id)))
    pairs.sort()
    return pairs


def _hits_ramp_end(cfg: ScenarioConfig, v: Vehicle) -> bool:
    on_ramp = v.y > 0.5 * (lane_center(cfg, RIGHT) + lane_center(cfg, RAMP))
    return on_ramp and v.x + 0.5 * cfg.vehicle_length >= cfg.merge_end


# ---------------------------------------------------------------------------
# observation


def _angle_features(v: Vehicle) -> tuple:
    zeta = math.atan2(v.vy, v.vx)
    return math.cos(zeta), math.sin(zeta)


def observe(state: WorldState, agent_id: int) -> np.ndarray:
    """N x X local observation of one CAV: itself first, then nearest vehicles in range."""
    cfg = state.cfg
    cavs = state.cavs
    if not 0 <= agent_id < len(cavs):
        raise KeyError(f"unknown agent id {agent_id}")
    ego = cavs[agent_id]
    angles = cfg.features == "add_angles"
    obs = np.zeros((cfg.n_obs, cfg.n_features))
    obs[0, 0] = 1.0
    obs[0, 4] = ego.vx / cfg.v_max
    obs[0, 5] = ego.vy / cfg.v_max
    if angles:
        obs[0, 6:8] = _angle_features(ego)

    radius = cfg.sensing_radius
    near = []
    for v in state.vehicles:
        if v is ego or not on_road(cfg, v):
            continue
        d = math.hypot(v.x - ego.x, v.y - ego.y)
        if d <= radius:
            near.append((d, v.id, v))
    if cfg.observe_ramp_end:
        end = ramp_end_marker(state)
        d = math.hypot(end.x - ego.x, end.y - ego.y)
        if d <= radius:
            near.append((d, end.id, end))
    near.sort(key=lambda item: (item[0], item[1]))
    for row, (_, _, v) in enumerate(near[:cfg.n_obs - 1], start=1):
        obs[row, 0] = 1.0
        obs[row, 1] = 1.0 if v.kind == Kind.PV else 0.0
        obs[row, 2] = (v.x - ego.x) / radius
        obs[row, 3] = (v.y - ego.y) / radius
        obs[row, 4] = (v.vx - ego.vx) / cfg.v_max
        obs[row, 5] = (v.vy - ego.vy) / cfg.v_max
        if angles:
            obs[row, 6:8] = _angle_features(v)
    np.clip(obs, -1.0, 1.0, out=obs)
    return apply_feature_mask(obs, cfg.features)


def ramp_end_marker(state: WorldState) -> Vehicle:
    """Stationary pseudo-vehicle standing where the ramp lane ends.

    It is only ever observed, never simulated; its id sorts after every
    real vehicle so real vehicles win distance ties.
    """
    cfg = state.cfg
    return Vehicle(len(state.vehicles), Kind.HDV, RAMP, cfg.merge_end + 0.5 * cfg.vehicle_length,
                   lane_center(cfg, RAMP), 0.0)


def apply_feature_mask(obs: np.ndarray, mask: str) -> np.ndarray:
    """Zero the masked feature columns in place (shape is kept)."""
    if mask == "no_position":
        obs[..., 2:4] = 0.0
    elif mask == "no_presence_priority":
        obs[..., 0:2] = 0.0
    elif mask == "no_velocity":
        obs[..., 4:6] = 0.0
    return obs


def observe_all(state: WorldState) -> list:
    return [observe(state, i) for i in range(state.cfg.n_cav)]


# ---------------------------------------------------------------------------
# reward


def reward(state: WorldState, events: StepEvents) -> float:
    """Shared cooperative reward in [0, 1] for the step described by ``events``.

    With no penalty events the value is the mean normalized CAV speed, so
    an all-``v_max`` step scores 1 and a mid-speed step scores 0.5. CAVs
    that have left the road are not counted.
    """
    cfg = state.cfg
    cavs = state.cavs
    # crashed CAVs stay on the road at zero speed and keep dragging the speed term down
    considered = [v for v, act in zip(cavs, events.active) if act or v.crashed]
    moving = [v for v, act in zip(cavs, events.active) if act and not v.crashed]
    n_active = max(1, sum(events.active))
    span = cfg.v_max - cfg.v_min
    speed = stall = 0.0
    if considered:
        speed = sum(min(max((v.vx - cfg.v_min) / span, 0.0), 1.0) for v in considered) / len(considered)
    if moving:
        stall = sum(v.vx < cfg.v_stall for v in moving) / len(moving)
    crash = 1.0 if events.crashed_cavs else 0.0
    weave = len(events.lane_changes) / n_active
    r = (cfg.reward_offset + cfg.w_speed * (2.0 * speed - 1.0) - cfg.w_crash * crash
         - cfg.w_stall * stall - cfg.w_weave * weave - cfg.w_pv * pv_blocking(state))
    return min(max(r, 0.0), 1.0)


def pv_blocking(state: WorldState) -> float:
    """Closeness in [0, 1] of the nearest CAV ahead of the PV in the lane it wants."""
    cfg = state.cfg
    pv = state.pv
    if pv is None or pv.crashed or not on_road(cfg, pv):
        return 0.0
    worst = 0.0
    for v in state.cavs:
        if v.crashed or v.finished or not v.occupies(pv.target_lane) or v.x <= pv.x:
            continue
        gap = v.x - pv.x - cfg.vehicle_length
        worst = max(worst, min(max(1.0 - gap / cfg.d_pv, 0.0), 1.0))
    return worst


# ---------------------------------------------------------------------------
# transition


class EpisodeDone(RuntimeError):
    pass


def step(state: WorldState, joint_actions: Sequence[int]):
    """Advance one policy step.

    ``joint_actions`` has one entry per CAV in agent-id order; entries for
    crashed or finished CAVs are ignored. Returns
    ``(state, observations, reward, done, info)``; ``state`` is updated in place.
    """
    cfg = state.cfg
    if state.done:
        raise EpisodeDone("step() called on a finished episode; call reset()")
    cavs = state.cavs
    if len(joint_actions) != len(cavs):
        raise ValueError(f"expected {len(cavs)} actions, got {len(joint_actions)}")

    events = StepEvents(active=state.active_agents())
    for v, a, act in zip(cavs, joint_actions, events.active):
        if act and apply_action(cfg, v, int(a)):
            events.lane_changes.append(v.id)
        elif not act:
            v.last_action = -1

    movers = [v for v in state.vehicles if not v.crashed]
    for v in movers:
        if v.kind == Kind.CAV or v.finished:
            continue
        control = hdv_control if v.kind == Kind.HDV else pv_control
        _, offset = control(cfg, state.vehicles, v)
        if offset:
            start_lane_change(cfg, v, v.lane + offset)

    dt = cfg.dt
    crashed_ids = set()
    for _ in range(cfg.substeps):
        accels = []
        for v in movers:
            if v.crashed:
                accels.append(0.0)
            elif v.kind == Kind.CAV:
                accels.append(cav_acceleration(cfg, v))
            else:
                accels.append(_scripted_accel(state, v))
        for v, a in zip(movers, accels):
            if v.crashed:
                continue
            v.vx = min(max(v.vx + a * dt, 0.0), cfg.v_max)
            v.x += v.vx * dt
            v.y += v.vy * dt
        state.sim_substep += 1

        new_pairs = []
        for a_id, b_id in collision_check(state):
            a, b = state.vehicles[a_id], state.vehicles[b_id]
            if a.crashed and b.crashed:
                continue
            new_pairs.append((a_id, b_id))
        for v in movers:
            if not v.crashed and v.kind == Kind.CAV and on_road(cfg, v) and _hits_ramp_end(cfg, v):
                new_pairs.append((v.id, BARRIER))
        for pair in new_pairs:
            for vid in pair:
                if vid != BARRIER:
                    _crash(state.vehicles[vid])
                    crashed_ids.add(vid)
        events.crashes.extend(new_pairs)

    for v in movers:
        finish_lane_change(cfg, v)
        if not v.finished and not on_road(cfg, v):
            v.finished = True
            if v.kind == Kind.CAV and not v.crashed:
                events.finished.append(v.id)

    events.crashed_cavs = sorted(i for i in crashed_ids if state.vehicles[i].kind == Kind.CAV)
    r = reward(state, events)
    state.t += 1
    state.events = events
    all_out = all(v.crashed or v.finished for v in cavs)
    state.done = state.t >= cfg.horizon or all_out
    truncated = state.done and not all(v.crashed for v in cavs)

    if state.trajectory is not None:
        for v in state.vehicles:
            state.trajectory.append((state.t, v.id, v.kind.name, v.lane, v.x, v.y, v.vx, v.vy, v.last_action, r))

    info = {
        "crashes": events.crashes,
        "crashed_cavs": events.crashed_cavs,
        "lane_changes": events.lane_changes,
        "finished": events.finished,
        "active": state.active_agents(),
        "truncated": truncated,
    }
    return state, observe_all(state), r, state.done, info


def _scripted_accel(state: WorldState, v: Vehicle) -> float:
    cfg = state.cfg
    leader, _ = neighbours(state.vehicles, v, v.lane)
    a = idm_acceleration(cfg, v, leader)
    if v.changing_lane:
        target_leader, _ = neighbours(state.vehicles, v, v.target_lane)
        a = min(a, idm_acceleration(cfg, v, target_leader))
    return a


def _crash(v: Vehicle) -> None:
    v.crashed = True
    v.vx = 0.0
    v.vy = 0.0


TRAJECTORY_HEADER = ("step", "vehicle_id", "kind", "lane", "x", "y", "vx", "vy", "action", "reward")


def write_trajectory(state: WorldState, path) -> None:
    if state.trajectory is None:
        raise ValueError("state was reset without record=True")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_HEADER)
        writer.writerows(state.trajectory)
