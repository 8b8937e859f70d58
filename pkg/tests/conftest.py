import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from smfg.model import random_affine_model  # noqa: E402

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def small_model(seed, max_states=3, max_actions=3, max_horizon=3, leader_states=None,
                leader_actions=1, quadratic=None, coupling=0.5):
    rng = np.random.default_rng(seed)
    S = int(rng.integers(1, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    T = int(rng.integers(1, max_horizon + 1))
    Sl = int(rng.integers(1, 4)) if leader_states is None else leader_states
    quad = bool(rng.integers(0, 2)) if quadratic is None else quadratic
    return random_affine_model(rng, S, A, T, Sl, leader_actions, coupling=coupling,
                               quadratic=quad)


def random_policy(model, rng):
    return rng.dirichlet(np.ones(model.A), size=(model.T + 1, model.S))


@pytest.fixture
def configs():
    return CONFIGS
