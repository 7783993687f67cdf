import warnings

import numpy as np
import pytest

from gneselect.game import SlaterWarning, load_game

warnings.filterwarnings("ignore", category=SlaterWarning)


def pytest_configure(config):
    warnings.filterwarnings("ignore", category=SlaterWarning)


TWO_AGENT_COUPLED = {
    "name": "two-agent-coupled",
    "agents": [
        {"dim": 1,
         "cost": {"kind": "quadratic-coupled",
                  "blocks": [{"j": 1, "M": [[1.0]]}, {"j": 2, "M": [[0.3]]}],
                  "lin": [-1.5]},
         "box": {"lo": [0.0], "hi": [2.0]},
         "g": {"kind": "affine", "A": [[1.0]], "b": [0.4]}},
        {"dim": 1,
         "cost": {"kind": "quadratic-coupled",
                  "blocks": [{"j": 2, "M": [[1.2]]}, {"j": 1, "M": [[-0.3]]}],
                  "lin": [-1.0]},
         "box": {"lo": [0.0], "hi": [2.0]},
         "g": {"kind": "affine", "A": [[1.0]], "b": [0.4]}},
    ],
    "graph": {"edges": [[1, 2]]},
    "m": 1,
    "selection": {"kind": "weighted-quadratic", "scope": "omega",
                  "ref": 0.0, "weights": 0.5},
}

# closed form of its unique v-GNE: coupling active, x2 = 27/110, x1 = 61/110,
# shared multiplier 959/1100, consensus fiber nu = (-17/220, 17/220)
TWO_AGENT_FIX = np.array([
    61.0 / 110.0, 27.0 / 110.0,
    959.0 / 1100.0, 959.0 / 1100.0,
    -17.0 / 220.0, 17.0 / 220.0,
])

THREE_AGENT_PATH = {
    "name": "three-agent-path",
    "agents": [
        {"dim": 2,
         "cost": {"kind": "quadratic-coupled",
                  "blocks": [{"j": 1, "M": [[2.0, 0.3], [0.3, 1.5]]},
                             {"j": 2, "M": [[0.2], [0.1]]}],
                  "lin": [-2.0, 1.0]},
         "box": {"lo": [-1.0, -1.0], "hi": [2.0, 2.0]},
         "g": {"kind": "affine", "A": [[1.0, 0.5], [0.0, 1.0]], "b": [0.5, 1.0]}},
        {"dim": 1,
         "cost": {"kind": "quadratic-coupled",
                  "blocks": [{"j": 2, "M": [[1.0]]}, {"j": 1, "M": [[0.1, -0.2]]}],
                  "lin": [-2.0]},
         "box": {"lo": [0.0], "hi": [2.0]},
         "g": {"kind": "affine", "A": [[1.0], [0.3]], "b": [0.5, 0.2]}},
        {"dim": 1,
         "cost": {"kind": "quadratic-coupled", "blocks": [{"j": 3, "M": [[1.0]]}],
                  "lin": [0.5]},
         "box": {"lo": [-3.0], "hi": [3.0]},
         "g": {"kind": "affine", "A": [[0.0], [1.0]], "b": [0.3, 0.5]}},
    ],
    "graph": {"edges": [[1, 2], [2, 3]]},
    "m": 2,
    "selection": {"kind": "weighted-quadratic", "scope": "omega",
                  "ref": 0.1, "weights": 0.5},
}

SKEW_GAME = {
    "name": "skew",
    "agents": [
        {"dim": 1,
         "cost": {"kind": "quadratic-coupled",
                  "blocks": [{"j": 1, "M": [[0.0]]}, {"j": 2, "M": [[1.0]]}],
                  "lin": [0.0]},
         "box": {"lo": [-1.0], "hi": [1.0]}},
        {"dim": 1,
         "cost": {"kind": "quadratic-coupled",
                  "blocks": [{"j": 2, "M": [[0.0]]}, {"j": 1, "M": [[-1.0]]}],
                  "lin": [0.0]},
         "box": {"lo": [-1.0], "hi": [1.0]}},
    ],
    "graph": {"edges": [[1, 2]]},
    "m": 0,
}

QUAD_G_GAME = {
    "name": "quad-g",
    "agents": [
        {"dim": 1,
         "cost": {"kind": "quadratic-coupled", "blocks": [{"j": 1, "M": [[1.0]]}],
                  "lin": [-1.2]},
         "box": {"lo": [-1.5], "hi": [1.5]},
         "g": {"kind": "quad", "D": [[1.0]], "a": [[0.2]], "b": [0.6]}},
        {"dim": 1,
         "cost": {"kind": "quadratic-coupled", "blocks": [{"j": 2, "M": [[1.0]]}],
                  "lin": [-1.0]},
         "box": {"lo": [-1.5], "hi": [1.5]},
         "g": {"kind": "quad", "D": [[1.0]], "a": [[0.0]], "b": [0.6]}},
    ],
    "graph": {"edges": [[1, 2]]},
    "m": 1,
    "metadata": {"b_lambda": 5.0},
    "selection": {"kind": "weighted-quadratic", "scope": "omega",
                  "ref": 0.0, "weights": 0.5},
}

PROJECTION_GAME = {
    "name": "projection",
    "agents": [
        {"dim": 2, "box": {"lo": [0.0, -1.0], "hi": [1.0, 1.0]},
         "g": {"kind": "affine", "A": [[1.0, 0.0]], "b": [0.4]}},
        {"dim": 1, "box": {"lo": [0.0], "hi": [1.0]},
         "g": {"kind": "affine", "A": [[1.0]], "b": [0.4]}},
        {"dim": 1, "box": {"lo": [-0.5], "hi": [0.5]},
         "g": {"kind": "affine", "A": [[0.0]], "b": [0.2]}},
    ],
    "graph": {"edges": [[1, 2], [2, 3]]},
    "m": 1,
    "selection": {"kind": "weighted-quadratic", "scope": "x",
                  "ref": [1.5, 0.2, 1.5, 2.0], "weights": 1.0},
}


def doc_copy(doc):
    import copy

    return copy.deepcopy(doc)


@pytest.fixture(scope="session")
def two_agent_spec():
    return load_game(doc_copy(TWO_AGENT_COUPLED))


@pytest.fixture(scope="session")
def three_agent_spec():
    return load_game(doc_copy(THREE_AGENT_PATH))


@pytest.fixture(scope="session")
def skew_spec():
    return load_game(doc_copy(SKEW_GAME))


@pytest.fixture(scope="session")
def quad_g_spec():
    return load_game(doc_copy(QUAD_G_GAME))


@pytest.fixture(scope="session")
def projection_spec():
    return load_game(doc_copy(PROJECTION_GAME))


def random_state(spec, rng, scale=1.0, nonneg_lam=True):
    om = scale * rng.standard_normal(spec.n_omega)
    if nonneg_lam and spec.m:
        sl = slice(spec.n, spec.n + spec.nagents * spec.m)
        om[sl] = np.abs(om[sl])
    return om
