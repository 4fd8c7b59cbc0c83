import csv

import numpy as np
import pytest

from lsamarl.sim import (
    Action,
    ConfigError,
    EpisodeDone,
    Kind,
    ScenarioConfig,
    apply_action,
    collision_check,
    dump_config,
    hdv_control,
    load_config,
    observe,
    pv_control,
    reset,
    reward,
    scenario_config,
    step,
    write_trajectory,
)
from lsamarl.sim.env import StepEvents, ramp_end_marker
from lsamarl.sim.vehicles import LEFT, RAMP, RIGHT, idm_acceleration

from conftest import place, world


# reset ----------------------------------------------------------------------

def test_reset_scenario1_counts():
    state, obs = reset(scenario_config(1), seed=0)
    assert len(obs) == 2
    assert len(state.vehicles) == 7
    kinds = [v.kind for v in state.vehicles]
    assert kinds.count(Kind.CAV) == 2 and kinds.count(Kind.HDV) == 4 and kinds.count(Kind.PV) == 1


def test_reset_deterministic():
    cfg = scenario_config(3)
    a, _ = reset(cfg, seed=11)
    b, _ = reset(cfg, seed=11)
    c, _ = reset(cfg, seed=12)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()


def test_reset_scenario5_observation_shape():
    _, obs = reset(scenario_config(5), seed=4)
    assert len(obs) == 6
    for o in obs:
        assert o.shape == (6, 6)
        assert o[0, 0] == 1.0


def test_reset_places_pv_behind_traffic_in_left_lane():
    state, _ = reset(scenario_config(4), seed=2)
    pv = state.pv
    assert pv.lane == LEFT
    assert all(pv.x < v.x for v in state.vehicles if v is not pv)
    assert pv.target_speed == 2 * state.cfg.hdv_target_speed


def test_reset_rejects_overfull_spawn_ranges():
    cfg = ScenarioConfig(n_cav=2, n_hdv=30)
    with pytest.raises(ConfigError):
        reset(cfg, seed=0)


def test_invalid_scenario_id():
    with pytest.raises(ConfigError):
        scenario_config(9)


# step -------------------------------------------------------------------------

def test_idle_on_empty_road_is_pure_speed_term(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 50, 21.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 120, 27.0)])
    _, _, r, done, info = step(state, [Action.IDLE, Action.IDLE])
    assert not info["crashes"] and not done
    assert r == pytest.approx((21.0 + 27.0) / 2 / open_cfg.v_max, abs=1e-12)


def test_forced_overlap_crashes_and_floors_reward(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 100, 20.0),
                             place(open_cfg, 1, Kind.CAV, RIGHT, 101, 20.0)])
    _, _, r, done, info = step(state, [Action.IDLE, Action.IDLE])
    assert info["crashes"] == [(0, 1)]
    assert r == 0.0
    assert done
    assert all(v.crashed and v.vx == 0.0 for v in state.vehicles)


def test_crash_of_one_cav_keeps_episode_running(open_cfg):
    cfg = open_cfg.replace(n_hdv=1)
    state = world(cfg, [place(cfg, 0, Kind.CAV, RIGHT, 100, 20.0),
                        place(cfg, 1, Kind.CAV, LEFT, 100, 20.0),
                        place(cfg, 2, Kind.HDV, RIGHT, 102, 0.0)])
    _, _, r, done, info = step(state, [Action.IDLE, Action.IDLE])
    assert info["crashed_cavs"] == [0]
    assert r == 0.0 and not done
    assert info["active"] == [False, True]
    x_before = state.vehicles[0].x
    step(state, [Action.FASTER, Action.IDLE])
    assert state.vehicles[0].x == x_before


def test_action_count_mismatch(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 50, 20.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 90, 20.0)])
    with pytest.raises(ValueError):
        step(state, [Action.IDLE])


def test_step_after_done_rejected():
    state, _ = reset(scenario_config(1).replace(horizon=2), seed=0)
    done = False
    while not done:
        state, _, _, done, _ = step(state, [Action.IDLE] * 2)
    assert state.t == 2
    with pytest.raises(EpisodeDone):
        step(state, [Action.IDLE] * 2)


def test_episode_ends_when_all_cavs_leave_road(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 505, 30.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 510, 30.0)])
    _, _, _, done, info = step(state, [Action.IDLE, Action.IDLE])
    assert done and info["truncated"]
    assert sorted(info["finished"]) == [0, 1]


def test_random_steps_bounded_and_deterministic():
    for scenario in range(1, 6):
        cfg = scenario_config(scenario)
        traces = []
        for _ in range(2):
            rng = np.random.default_rng(scenario)
            state, obs = reset(cfg, seed=scenario)
            trace = []
            for _ in range(60):
                if state.done:
                    state, obs = reset(cfg, seed=state.t)
                state, obs, r, done, _ = step(state, rng.integers(0, 5, cfg.n_cav).tolist())
                assert 0.0 <= r <= 1.0
                assert all(np.all(np.abs(o) <= 1.0) for o in obs)
                assert len(state.vehicles) == cfg.n_cav + cfg.n_hdv + 1
                trace.append((state.fingerprint(), r))
            traces.append(trace)
        assert traces[0] == traces[1]


def test_trajectory_csv(tmp_path):
    state, _ = reset(scenario_config(1), seed=0, record=True)
    step(state, [Action.FASTER, Action.IDLE])
    path = tmp_path / "traj.csv"
    write_trajectory(state, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "vehicle_id", "kind", "lane", "x", "y", "vx", "vy", "action", "reward"]
    assert len(rows) == 1 + 7
    assert rows[1][2] == "CAV" and rows[1][8] == str(int(Action.FASTER))


# observe ------------------------------------------------------------------------

def test_observe_alone_pads_with_zero_rows(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 50, 18.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 400, 18.0)])
    o = observe(state, 0)
    assert o.shape == (4, 6)
    np.testing.assert_array_equal(o[1:], 0.0)
    assert o[0].tolist() == [1.0, 0.0, 0.0, 0.0, 18.0 / 30.0, 0.0]


def test_observe_flags_priority_vehicle(open_cfg):
    cfg = open_cfg.replace(n_hdv=1)
    state = world(cfg, [place(cfg, 0, Kind.CAV, RIGHT, 100, 20.0),
                        place(cfg, 1, Kind.CAV, LEFT, 400, 20.0),
                        place(cfg, 2, Kind.HDV, RIGHT, 130, 15.0),
                        place(cfg, 3, Kind.PV, LEFT, 70, 25.0)])
    o = observe(state, 0)
    assert o[:, 1].sum() == 1.0
    pv_row = o[o[:, 1] == 1.0][0]
    assert pv_row[0] == 1.0
    assert pv_row[2] == pytest.approx(-30.0 / cfg.sensing_radius)


def test_observe_nearest_first(open_cfg):
    cfg = open_cfg.replace(n_hdv=2)
    state = world(cfg, [place(cfg, 0, Kind.CAV, RIGHT, 100, 20.0),
                        place(cfg, 1, Kind.CAV, LEFT, 400, 20.0),
                        place(cfg, 2, Kind.HDV, RIGHT, 120, 15.0),
                        place(cfg, 3, Kind.HDV, RIGHT, 110, 15.0)])
    o = observe(state, 0)
    assert o[1, 2] == pytest.approx(10.0 / cfg.sensing_radius)
    assert o[2, 2] == pytest.approx(20.0 / cfg.sensing_radius)
    assert o[1, 4] == pytest.approx(-5.0 / cfg.v_max)


def test_observe_ties_break_by_lower_id(open_cfg):
    cfg = open_cfg.replace(n_hdv=2, n_obs=2)
    state = world(cfg, [place(cfg, 0, Kind.CAV, RIGHT, 100, 20.0),
                        place(cfg, 1, Kind.CAV, LEFT, 400, 20.0),
                        place(cfg, 2, Kind.HDV, RIGHT, 120, 15.0),
                        place(cfg, 3, Kind.HDV, RIGHT, 80, 11.0)])
    o = observe(state, 0)
    assert o[1, 2] > 0  # id 2 ahead wins over id 3 behind at equal distance


def test_observe_unknown_agent(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 50, 18.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 400, 18.0)])
    with pytest.raises(KeyError):
        observe(state, 5)


def test_ramp_end_marker_is_visible_from_ramp():
    cfg = ScenarioConfig(n_cav=2, n_hdv=0)
    state = world(cfg, [place(cfg, 0, Kind.CAV, RAMP, 260, 20.0),
                        place(cfg, 1, Kind.CAV, LEFT, 40, 20.0)])
    o = observe(state, 0)
    marker = ramp_end_marker(state)
    assert o[1, 0] == 1.0
    assert o[1, 2] == pytest.approx((marker.x - 260) / cfg.sensing_radius)
    assert o[1, 3] == 0.0
    assert o[1, 4] == pytest.approx(-20.0 / cfg.v_max)


@pytest.mark.parametrize("mask,cols", [("no_position", [2, 3]), ("no_velocity", [4, 5]),
                                       ("no_presence_priority", [0, 1])])
def test_feature_masks_zero_columns(mask, cols):
    cfg = scenario_config(2, features=mask)
    _, obs = reset(cfg, seed=3)
    for o in obs:
        assert o.shape == (4, 6)
        np.testing.assert_array_equal(o[:, cols], 0.0)


def test_add_angles_widens_observation():
    cfg = scenario_config(2, features="add_angles")
    state, obs = reset(cfg, seed=3)
    assert obs[0].shape == (4, 8)
    o = obs[0]
    present = o[:, 0] == 1.0
    np.testing.assert_allclose(o[present, 6] ** 2 + o[present, 7] ** 2, 1.0)
    np.testing.assert_array_equal(o[~present], 0.0)


# controllers ----------------------------------------------------------------------

def test_hdv_free_road_is_idm_free_term(open_cfg):
    cfg = open_cfg.replace(n_hdv=1)
    hdv = place(cfg, 2, Kind.HDV, RIGHT, 100, 10.0, target=15.0)
    state = world(cfg, [place(cfg, 0, Kind.CAV, LEFT, 400, 20.0), place(cfg, 1, Kind.CAV, LEFT, 450, 20.0), hdv])
    a, lc = hdv_control(cfg, state.vehicles, hdv)
    assert a == pytest.approx(3.0 * (1.0 - (10.0 / 15.0) ** 4), rel=1e-12)
    assert lc == 0


def test_hdv_behind_stopped_leader_at_desired_gap_brakes(open_cfg):
    cfg = open_cfg.replace(n_hdv=2)
    v = 12.0
    s_star = cfg.idm_jam_gap + v * cfg.idm_headway + v * v / (2 * np.sqrt(cfg.idm_accel * cfg.idm_comfort_decel))
    hdv = place(cfg, 2, Kind.HDV, RIGHT, 100, v, target=15.0)
    leader = place(cfg, 3, Kind.HDV, RIGHT, 100 + cfg.vehicle_length + s_star, 0.0, target=15.0)
    state = world(cfg, [place(cfg, 0, Kind.CAV, LEFT, 100, 12.0), place(cfg, 1, Kind.CAV, LEFT, 400, 20.0),
                        hdv, leader])
    a, lc = hdv_control(cfg, state.vehicles, hdv)
    assert a <= 0.0
    assert a == pytest.approx(idm_acceleration(cfg, hdv, leader))
    assert hdv_control(cfg, state.vehicles, hdv) == (a, lc)


def test_hdv_control_requires_hdv(open_cfg):
    cav = place(open_cfg, 0, Kind.CAV, RIGHT, 100, 20.0)
    with pytest.raises(ValueError):
        hdv_control(open_cfg, [cav], cav)


def test_pv_open_road_accelerates_toward_double_speed(open_cfg):
    cfg = open_cfg.replace(n_hdv=0)
    pv = place(cfg, 2, Kind.PV, LEFT, 0, 20.0, target=2 * cfg.hdv_target_speed)
    state = world(cfg, [place(cfg, 0, Kind.CAV, RIGHT, 200, 20.0), place(cfg, 1, Kind.CAV, RIGHT, 300, 20.0), pv])
    a, lc = pv_control(cfg, state.vehicles, pv)
    assert a > 0 and lc == 0
    for _ in range(8):
        step(state, [Action.IDLE, Action.IDLE])
    assert 25.0 < pv.vx <= 30.0


def test_pv_overtakes_slow_cav_when_adjacent_lane_free(open_cfg):
    pv = place(open_cfg, 2, Kind.PV, LEFT, 100, 28.0, target=30.0)
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, LEFT, 125, 12.0),
                             place(open_cfg, 1, Kind.CAV, RIGHT, 300, 20.0), pv])
    _, lc = pv_control(open_cfg, state.vehicles, pv)
    assert lc == -1


def test_pv_blocked_without_safe_gap_brakes(open_cfg):
    pv = place(open_cfg, 2, Kind.PV, LEFT, 100, 28.0, target=30.0)
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, LEFT, 125, 12.0),
                             place(open_cfg, 1, Kind.CAV, RIGHT, 103, 12.0), pv])
    a, lc = pv_control(open_cfg, state.vehicles, pv)
    assert lc == 0 and a < 0


# reward ---------------------------------------------------------------------------

def test_reward_crash_floor(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 100, 30.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 200, 30.0)])
    events = StepEvents(crashed_cavs=[0], active=[True, True])
    assert reward(state, events) == 0.0


def test_reward_all_at_vmax_is_one(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 100, 30.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 200, 30.0)])
    assert reward(state, StepEvents(active=[True, True])) == 1.0


def test_reward_pv_tailgating_is_penalised(open_cfg):
    cfg = open_cfg
    cavs = [place(cfg, 0, Kind.CAV, LEFT, 100, 20.0), place(cfg, 1, Kind.CAV, RIGHT, 300, 20.0)]
    gap = 0.5 * cfg.d_pv
    pv = place(cfg, 2, Kind.PV, LEFT, 100 - cfg.vehicle_length - gap, 25.0, target=30.0)
    with_pv = world(cfg, cavs + [pv])
    without = world(cfg, [place(cfg, 0, Kind.CAV, LEFT, 100, 20.0), place(cfg, 1, Kind.CAV, RIGHT, 300, 20.0)])
    events = StepEvents(active=[True, True])
    r_pv, r_free = reward(with_pv, events), reward(without, events)
    assert r_pv < r_free
    assert r_free - r_pv == pytest.approx(cfg.w_pv * 0.5)


def test_reward_weave_and_stall_terms(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 100, 3.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 200, 27.0)])
    events = StepEvents(lane_changes=[1], active=[True, True])
    expected = 0.5 + 0.5 * (2 * 0.5 - 1) - 0.5 * 0.5 - 0.1 * 0.5
    assert reward(state, events) == pytest.approx(expected)


# collisions -------------------------------------------------------------------------

def test_collision_none_when_apart(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 100, 20.0),
                             place(open_cfg, 1, Kind.CAV, RIGHT, 110, 20.0)])
    assert collision_check(state) == []


def test_collision_colocated_reported_once(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 100, 20.0),
                             place(open_cfg, 1, Kind.CAV, RIGHT, 100, 20.0)])
    assert collision_check(state) == [(0, 1)]


def test_collision_adjacent_lanes_have_clearance(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 100, 20.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 100, 20.0)])
    assert abs(state.vehicles[0].y - state.vehicles[1].y) - open_cfg.vehicle_width == pytest.approx(2.0)
    assert collision_check(state) == []


def test_ramp_end_crash(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RAMP, 300, 20.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 100, 20.0)])
    _, _, r, _, info = step(state, [Action.IDLE, Action.IDLE])
    assert (0, -1) in info["crashes"]
    assert state.vehicles[0].crashed and r == 0.0


# actions -----------------------------------------------------------------------------

def test_faster_clamps_at_vmax(open_cfg):
    v = place(open_cfg, 0, Kind.CAV, RIGHT, 100, 30.0)
    apply_action(open_cfg, v, Action.FASTER)
    assert v.target_speed == open_cfg.v_max


def test_slower_lowers_target(open_cfg):
    v = place(open_cfg, 0, Kind.CAV, RIGHT, 100, 20.0)
    apply_action(open_cfg, v, Action.SLOWER)
    assert v.target_speed == 15.0


def test_lane_right_from_rightmost_degrades_to_idle(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 100, 20.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 300, 20.0)])
    _, _, _, _, info = step(state, [Action.LANE_RIGHT, Action.IDLE])
    v = state.vehicles[0]
    assert v.lane == RIGHT and v.y == 4.0 and info["lane_changes"] == []


def test_lane_left_completes_within_step(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RIGHT, 100, 20.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 300, 20.0)])
    _, _, _, _, info = step(state, [Action.LANE_LEFT, Action.IDLE])
    v = state.vehicles[0]
    assert v.lane == LEFT and v.y == 0.0 and v.vy == 0.0
    assert info["lane_changes"] == [0]


def test_ramp_merge_only_inside_window(open_cfg):
    state = world(open_cfg, [place(open_cfg, 0, Kind.CAV, RAMP, 150, 20.0),
                             place(open_cfg, 1, Kind.CAV, LEFT, 300, 20.0)])
    step(state, [Action.LANE_LEFT, Action.IDLE])
    assert state.vehicles[0].lane == RAMP
    state.vehicles[0].x = 230.0
    step(state, [Action.LANE_LEFT, Action.IDLE])
    assert state.vehicles[0].lane == RIGHT


# config file -------------------------------------------------------------------------

def test_config_file_roundtrip(tmp_path):
    cfg = scenario_config(4, w_crash=3.0, features="no_velocity")
    path = tmp_path / "scenario.ini"
    dump_config(cfg, path)
    text = path.read_text()
    assert "[reward]" in text and "[road]" in text
    assert load_config(path) == cfg


def test_config_file_partial(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text("[scenario]\nscenario = 5\n[reward]\nw_pv = 0.25\n")
    cfg = load_config(path)
    assert (cfg.n_cav, cfg.n_hdv, cfg.n_obs, cfg.w_pv) == (6, 6, 6, 0.25)


def test_config_file_unknown_key(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text("[reward]\nw_bogus = 1\n")
    with pytest.raises(ConfigError):
        load_config(path)
