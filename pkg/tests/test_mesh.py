import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tumorsim.shape.mesh import (icosphere, perturb_mesh, place_mesh, quaternion_to_matrix,
                                 radii_digest, random_quaternion)
from tumorsim.shape.noise import NoiseParams


@pytest.mark.parametrize("level", range(5))
def test_icosphere_combinatorics(level):
    m = icosphere(level)
    assert len(m.vertices) == 10 * 4 ** level + 2
    assert len(m.faces) == 20 * 4 ** level
    assert len(m.edges()) == 30 * 4 ** level
    assert m.euler_characteristic() == 2


@pytest.mark.parametrize("level", range(4))
def test_icosphere_unit_and_outward(level):
    m = icosphere(level)
    np.testing.assert_allclose(m.radii, 1.0, atol=1e-15)
    v = m.vertices[m.faces]
    normals = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert np.all(np.einsum("ij,ij->i", normals, v.mean(axis=1)) > 0)


def test_icosphere_edges_shared_by_two_faces():
    m = icosphere(2)
    f = m.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    # each directed edge appears once and its reverse appears once: closed, consistently oriented
    as_set = {tuple(e) for e in directed}
    assert len(as_set) == len(directed)
    assert all((b, a) in as_set for a, b in as_set)


def test_icosphere_level_limits():
    with pytest.raises(ValueError):
        icosphere(-1)
    with pytest.raises(ValueError):
        icosphere(7)


def test_perturb_keeps_directions():
    base = icosphere(2)
    m = perturb_mesh(base, NoiseParams(seed=3))
    unit = m.vertices / m.radii[:, None]
    np.testing.assert_allclose(unit, base.vertices, atol=1e-12)
    assert np.all(m.radii > 0)


def test_perturb_rejects_nonpositive_radius_risk():
    with pytest.raises(ValueError):
        perturb_mesh(icosphere(1), NoiseParams(amplitude=0.6, octaves=3, persistence=0.5))


def test_radii_digest_stable_and_sensitive():
    a = perturb_mesh(icosphere(2), NoiseParams(seed=1))
    b = perturb_mesh(icosphere(2), NoiseParams(seed=1))
    c = perturb_mesh(icosphere(2), NoiseParams(seed=2))
    assert radii_digest(a) == radii_digest(b) != radii_digest(c)
    assert len(radii_digest(a)) == 16


def test_quaternion_rejects_non_unit():
    with pytest.raises(ValueError):
        quaternion_to_matrix((1.0, 0.1, 0.0, 0.0))


def test_quaternion_known_rotation():
    s = np.sqrt(0.5)
    r = quaternion_to_matrix((s, 0, 0, s))  # 90 degrees about z
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_random_quaternion_gives_rotation(seed):
    r = quaternion_to_matrix(random_quaternion(np.random.default_rng(seed)))
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_place_mesh_center_and_extent():
    m = place_mesh(icosphere(3), (10, 12, 14), 5.0, scale=(1.0, 2.0, 1.0), spacing=(1.0, 1.0, 2.0))
    np.testing.assert_allclose(m.center, [10, 12, 28])
    lo, hi = m.bounds()
    np.testing.assert_allclose(hi - lo, [10, 20, 10], atol=1e-9)
    with pytest.raises(ValueError):
        place_mesh(icosphere(0), (0, 0, 0), 0.0)
