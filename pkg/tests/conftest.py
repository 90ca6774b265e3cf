import math

import numpy as np
import pytest

from morphsim.physics import CharacterModel, Joint, Link, default_character


def free_link() -> CharacterModel:
    return CharacterModel(links=(Link("body", 0.5, 2.0, 0.05),), joints=(), foot_links=())


def pendulum(frictionloss: float = 0.0) -> CharacterModel:
    """Fixed base with a two-link chain hanging from it."""
    links = (Link("base", 0.1, 1.0, 0.05), Link("upper", 0.6, 1.5, 0.03), Link("lower", 0.5, 1.0, 0.03))
    joints = (Joint("j1", 0, 1, -10.0, 10.0, frictionloss=frictionloss, anchor=1.0),
              Joint("j2", 1, 2, -10.0, 10.0, frictionloss=frictionloss, anchor=1.0))
    return CharacterModel(links=links, joints=joints, foot_links=(), fixed_root=True)


@pytest.fixture(scope="session")
def model():
    return default_character()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def standing_q(model=None, height=None):
    """Default character standing upright with both feet flat on the ground."""
    m = model or default_character()
    q = np.zeros(m.n_dof)
    legs = m.links[3].length + m.links[4].length
    q[1] = legs + m.links[5].geom_halfwidth if height is None else height
    return q


TAU = 2 * math.pi


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE.append


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
