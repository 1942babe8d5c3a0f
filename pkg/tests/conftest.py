import dataclasses

import numpy as np
import pytest

from svilab.asymptotics import predicted_covariance
from svilab.problems import build_two_ball_instance, build_quadratic_instance


@pytest.fixture(scope="session")
def two_ball():
    return build_two_ball_instance()


@pytest.fixture(scope="session")
def two_ball_predicted(two_ball):
    return predicted_covariance(two_ball.vi, two_ball.nlp, two_ball.x_star)


@pytest.fixture(scope="session")
def quadratic():
    return build_quadratic_instance(dim=3, mu=np.array([0.5, -1.0, 2.0]))


@pytest.fixture(scope="session")
def two_ball_noise_free(two_ball):
    """Two-ball instance with z frozen to zero: the deterministic problem."""
    vi = dataclasses.replace(
        two_ball.vi,
        draw=lambda rng, n: np.zeros((n, 3)),
        noise_covariance=np.zeros((3, 3)),
    )
    return dataclasses.replace(two_ball, vi=vi)
