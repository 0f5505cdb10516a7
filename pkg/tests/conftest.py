import numpy as np
import pytest

from spectral_gmds import fixtures
from spectral_gmds.geodesics import distance_matrix, farthest_point_sample
from spectral_gmds.interp import interpolate_distances
from spectral_gmds.laplacian import mesh_eigenbasis


@pytest.fixture(scope="session")
def sphere3():
    return fixtures.icosphere(3)


@pytest.fixture(scope="session")
def sphere4():
    return fixtures.icosphere(4)


@pytest.fixture(scope="session")
def blob800():
    return fixtures.blob(800)


@pytest.fixture(scope="session")
def tapered_pair():
    """Flat and folded tapered strip, the folded copy shuffled and moved."""
    flat = fixtures.bent_plane(20, 20, 0.0, taper=0.5)
    bent, truth = fixtures.shuffled_copy(fixtures.bent_plane(20, 20, np.pi / 3, taper=0.5), seed=3)
    return flat, bent, truth


def spectral_shape(mesh, M, fraction=None, count=None, mu=None):
    """Eigenbasis plus interpolated distance coefficients of ``mesh``."""
    b = mesh_eigenbasis(mesh, M)
    idx, fields = farthest_point_sample(mesh, fraction=fraction, count=count, return_fields=True)
    return b, interpolate_distances(b, distance_matrix(mesh, idx, fields), mu)


@pytest.fixture(scope="session")
def blob_shape():
    mesh = fixtures.blob(600)
    b, sd = spectral_shape(mesh, 20, fraction=0.1)
    return mesh, b, sd
