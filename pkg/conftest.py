"""Shared fixtures: the anchor instance and its constrained variants"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from analysis.generator import GeneratorBundle
from market.constraints import Box, ConstraintSet, Singleton
from market.model import MarketModel, ProblemWeights
from market.penalty import PenaltySpec

SAMPLE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "sample_configs")
THETA = 0.2


def make_bundle(portfolio=None, consumption=None, convention="calibrated", alpha=0.0, delta=0.0,
                beta=1.0, x=1.0, b=THETA, sigma=1.0, penalty=None):
    model = MarketModel.constant([b], [[sigma]])
    weights = ProblemWeights.constant(alpha, 1.0, beta, delta, 1.0, x)
    penalty = penalty or PenaltySpec("quadratic", 1, kappa1=0.5)
    portfolio = portfolio or ConstraintSet.whole(1)
    consumption = consumption or ConstraintSet((Singleton(0.0),), 1)
    return GeneratorBundle(model, weights, penalty, portfolio, consumption, convention)


@pytest.fixture
def anchor_bundle():
    return make_bundle()


@pytest.fixture
def literal_bundle():
    return make_bundle(convention="literal-paper")


@pytest.fixture
def box_bundle():
    return make_bundle(portfolio=ConstraintSet((Box(0.0, 0.1),), 1))


@pytest.fixture
def consumption_bundle():
    """alpha > 0 with consumption unconstrained on (0, inf)"""
    return make_bundle(alpha=0.5, delta=0.05, consumption=ConstraintSet((Box(0.0, np.inf),), 1))


@pytest.fixture
def sample_dir():
    return SAMPLE_DIR
