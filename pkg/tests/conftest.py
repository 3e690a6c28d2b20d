import numpy as np
import pytest
from hypothesis import strategies as st

from crowdgen.trajectory import KINDS, Agent, Scenario


def random_scenario(rng, n_agents=5, frames=60, extent=10.0, fps=5.0, scene_id="scene", kinds=KINDS):
    """Random walkers inside ``[0, extent)^2`` with random spawn frames and lifetimes."""
    agents = []
    for i in range(n_agents):
        spawn = int(rng.integers(0, frames))
        length = int(rng.integers(1, frames - spawn + 1))
        start = rng.uniform(1.0, extent - 1.0, 2)
        steps = rng.normal(0.0, 0.2, (length - 1, 2))
        traj = np.clip(np.vstack([start, start + np.cumsum(steps, axis=0)]), 0.01, extent - 0.01)
        agents.append(Agent(i, str(rng.choice(kinds)), spawn, traj))
    return Scenario(fps, frames, tuple(agents), scene_id)


def line_agent(aid, start, end, spawn, n, kind="pedestrian"):
    return Agent(aid, kind, spawn, np.linspace(start, end, n))


@st.composite
def scenarios(draw, max_agents=6, max_frames=40):
    seed = draw(st.integers(0, 2 ** 31 - 1))
    n = draw(st.integers(0, max_agents))
    frames = draw(st.integers(2, max_frames))
    return random_scenario(np.random.default_rng(seed), n, frames)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_TRAINING = {
    "emitter_epochs": "3", "emitter_batch": "64", "sim_epochs": "3", "sim_batch": "256",
}


@pytest.fixture(scope="session")
def tiny_corridor():
    """Corridor fixture with models trained for a few epochs: enough to exercise the plumbing."""
    import warnings

    from crowdgen.fixtures import corridor_fixture
    from crowdgen.pipeline import RunConfig, train

    fx = corridor_fixture(0, n_scenarios=2, frames=300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        config = RunConfig.from_pairs(dict(TINY_TRAINING, scene="corridor"))
    return fx, train(config, fx.scenarios, fx.layout, fx.navgraph)


ACCEPTANCE_LINES = []


def record_acceptance(label: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
