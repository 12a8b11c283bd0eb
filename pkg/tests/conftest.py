import json

import hypothesis
import numpy as np
import pytest

from meanref_lq import pipeline
from meanref_lq.core import parse_problem
from meanref_lq.schema import SolverSettings

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.register_profile("default", deadline=None)
hypothesis.settings.load_profile("default")

# mean must be held above L on the later part of [0, T]; no terminal atom since G = 0
BINDING = {
    "T": 1.0,
    "N": 200,
    "A": 0.0,
    "B": 1.0,
    "C": 0.0,
    "D": 1.0,
    "Q": 1.0,
    "R": 1.0,
    "G": 0.0,
    "L": 0.9,
    "x": 1.0,
}

UNCONSTRAINED = {**BINDING, "L": -1e6, "C": 0.3, "G": 0.5}


@pytest.fixture
def binding_doc():
    return dict(BINDING)


@pytest.fixture
def make_spec():
    def make(**overrides):
        return parse_problem({**BINDING, **overrides})

    return make


@pytest.fixture
def problem_file(tmp_path):
    def write(doc=None, name="problem.json", **overrides):
        path = tmp_path / name
        path.write_text(json.dumps({**(doc if doc is not None else BINDING), **overrides}), encoding="utf-8")
        return path

    return write


@pytest.fixture(scope="session")
def binding_outcome():
    return pipeline.solve(parse_problem(BINDING), SolverSettings())


@pytest.fixture(scope="session")
def unconstrained_outcome():
    return pipeline.solve(parse_problem(UNCONSTRAINED), SolverSettings())
