import math

import numpy as np
import pytest

from finsler_eigen.anisotropy import EllipseNorm, LqNorm, SmoothedPolytopeNorm

HEX_DIRS = [[1.0, 0.0], [0.5, math.sqrt(3) / 2], [-0.5, math.sqrt(3) / 2]]


def hex_norm(delta=0.1):
    return SmoothedPolytopeNorm(HEX_DIRS, delta)


def canonical_norms():
    return {
        "l2": LqNorm(2.0),
        "l4": LqNorm(4.0),
        "ellipse": EllipseNorm([[4.0, 0.0], [0.0, 1.0]]),
        "hex": hex_norm(),
    }


@pytest.fixture(params=sorted(canonical_norms()))
def norm(request):
    return canonical_norms()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
