import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prmscale.env import EnvConfig, generate_expert_episodes, observe, reset
from prmscale.model import PrmConfig, PrmNetwork
from prmscale.numeric.rng import RngStream

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_cfg():
    return PrmConfig(hidden=16, n_layers=2, n_heads=2, d_dir=2)


@pytest.fixture(scope="session")
def tiny_net(tiny_cfg):
    net = PrmNetwork(tiny_cfg, seed=3)
    # give the zero-initialized reward head some weight so outputs vary
    gen = np.random.default_rng(0)
    for name, p in net.params.items():
        if name.startswith("rhead"):
            p.data = gen.normal(0, 0.3, p.data.shape)
    return net


@pytest.fixture(scope="session")
def episodes():
    return generate_expert_episodes(12, seed=5, exec_noise=0.05)


@pytest.fixture
def obs():
    state = reset(RngStream(11, "fixture").generator, EnvConfig())
    return observe(state)


def random_actions(n, d_dir=2, seed=0, scale=0.1):
    gen = np.random.default_rng(seed)
    poses = gen.normal(0, scale, (n, d_dir))
    grip = np.where(gen.random(n) < 0.5, -1.0, 1.0)
    return np.concatenate([poses, grip[:, None]], axis=1)


@pytest.fixture(scope="session")
def tuples(episodes):
    from prmscale.datagen import AnchorTupleSampler
    return AnchorTupleSampler(subsample=0.3, tuples_per_step=2, seed=1).fit(episodes).transform(episodes)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
