import numpy as np
import pytest

from pilot.problem import AgentPrediction, Borders, EgoState, NlpConfig, Scene, default_target_x


def straight_scene(N=10, dt=0.4, ego=None, agents=(), lo=-2.75, up=8.25, v_max=10.0, target_x=None):
    ego = ego or EgoState(0.0, 0.0, 0.0, 5.0)
    tx = default_target_x(ego.x, v_max, N, dt) if target_x is None else target_x
    return Scene(ego, np.array([[-100.0, 0.0], [1000.0, 0.0]]), Borders.straight(lo, up, -100.0, 1000.0),
                 tuple(agents), 0.0, v_max, N, dt, tx)


def static_agent(x, y, N, heading=0.0, half_length=2.25, half_width=0.95, id="a0"):
    return AgentPrediction(id, np.tile([x, y, heading], (N + 1, 1)), half_length, half_width)


def moving_agent(x, y, speed, N, dt, half_length=2.25, half_width=0.95, id="a1"):
    k = np.arange(N + 1)
    return AgentPrediction(id, np.column_stack([x + speed * dt * k, np.full(N + 1, y), np.zeros(N + 1)]),
                           half_length, half_width)


@pytest.fixture
def cfg():
    return NlpConfig()


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
