import numpy as np
import pytest

from lsamarl.sim import Kind, ScenarioConfig, Vehicle, WorldState
from lsamarl.sim.vehicles import lane_center


def place(cfg, vid, kind, lane, x, vx, target=None):
    return Vehicle(vid, kind, lane, float(x), lane_center(cfg, lane), float(vx),
                   target_speed=float(vx if target is None else target))


def world(cfg, vehicles):
    """A hand-built state; vehicle ids must equal list positions."""
    assert [v.id for v in vehicles] == list(range(len(vehicles)))
    return WorldState(cfg=cfg, vehicles=list(vehicles), rng=np.random.default_rng(0))


@pytest.fixture
def open_cfg():
    """Two CAVs, no traffic, no ramp-end marker in view."""
    return ScenarioConfig(n_cav=2, n_hdv=0, n_obs=4, observe_ramp_end=False)


@pytest.fixture
def K():
    return Kind


VERDICTS = []


def verdict(number, ok, detail):
    """Record one acceptance line; it is echoed again in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
