import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dipac.chamfer import chamfer, chamfer_brute, chamfer_grad, nearest
from dipac.core import ParticleState, ValidationError, particles_from_pointcloud


def pts(n):
    return arrays(np.float64, (n, 3), elements=st.floats(-1.0, 1.0, width=64))


cloud = st.integers(1, 30).flatmap(pts)


def test_identity():
    rng = np.random.default_rng(1)
    P = rng.random((40, 3))
    assert chamfer(P, P) == 0.0


def test_hand_values():
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    assert chamfer([[0, 0, 0], [2, 0, 0]], [[0, 0, 0]]) == 2.0


def test_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(20):
        P, Q = rng.random((50, 3)), rng.random((50, 3))
        assert abs(chamfer(P, Q) - chamfer_brute(P, Q)) <= 1e-12


def test_accepts_states():
    rng = np.random.default_rng(3)
    x = rng.random((10, 3))
    s = ParticleState.at_rest(x, 1.0, 1.0)
    assert chamfer(s, x + 0.1) == chamfer(x, x + 0.1)


def test_gradient_matches_fd():
    rng = np.random.default_rng(4)
    P, Q = rng.random((12, 3)), rng.random((9, 3))
    v, g = chamfer_grad(P, Q)
    assert v == chamfer(P, Q)
    h = 1e-7
    for i in range(12):
        for k in range(3):
            Pp, Pm = P.copy(), P.copy()
            Pp[i, k] += h
            Pm[i, k] -= h
            fd = (chamfer(Pp, Q) - chamfer(Pm, Q)) / (2 * h)
            assert fd == pytest.approx(g[i, k], abs=1e-6)


def test_nearest_ties_lowest_index():
    d2, idx = nearest(np.zeros((1, 3)), np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
    assert idx[0] == 0 and d2[0] == 1.0


@given(cloud, cloud)
def test_symmetric(P, Q):
    assert chamfer(P, Q) == chamfer(Q, P)


@given(cloud)
def test_self_zero(P):
    assert chamfer(P, P) == 0.0


@given(cloud, cloud, st.randoms(use_true_random=False))
def test_permutation_invariant(P, Q, r):
    ip = list(range(len(P)))
    iq = list(range(len(Q)))
    r.shuffle(ip)
    r.shuffle(iq)
    assert chamfer(P[ip], Q[iq]) == pytest.approx(chamfer(P, Q), rel=1e-13, abs=1e-15)


@given(cloud, cloud, arrays(np.float64, 3, elements=st.floats(-1.0, 1.0)))
def test_translation_invariant(P, Q, t):
    assert abs(chamfer(P + t, Q + t) - chamfer(P, Q)) <= 1e-12


@given(cloud, cloud)
def test_brute_force_agreement(P, Q):
    assert abs(chamfer(P, Q) - chamfer_brute(P, Q)) <= 1e-12


# -- point clouds -----------------------------------------------------------


def test_cube_corners_fill_lattice():
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], float)
    s = particles_from_pointcloud(corners, 0.5)
    assert s.n == 27
    assert sorted(set(np.round(s.x.ravel(), 12))) == [0.0, 0.5, 1.0]


def test_flat_sheet_has_no_interior():
    g = np.stack(np.meshgrid(np.arange(6) * 0.1, np.arange(4) * 0.1, indexing="ij"),
                 axis=-1).reshape(-1, 2)
    sheet = np.column_stack([g, np.full(len(g), 0.3)])
    s = particles_from_pointcloud(sheet, 0.1)
    assert s.n == len(sheet)
    assert np.allclose(np.sort(s.x, axis=0), np.sort(sheet, axis=0))


def test_empty_cloud_rejected():
    with pytest.raises(ValidationError):
        particles_from_pointcloud(np.zeros((0, 3)), 0.1)


def test_pointcloud_fresh_state():
    rng = np.random.default_rng(5)
    s = particles_from_pointcloud(rng.random((30, 3)), 0.2)
    assert np.array_equal(s.F, np.broadcast_to(np.eye(3), s.F.shape))
    assert not s.C.any() and not s.v.any()


@given(arrays(np.float64, (12, 3), elements=st.floats(0.0, 1.0)),
       st.floats(0.1, 0.5))
def test_pointcloud_count_deterministic(points, spacing):
    try:
        a = particles_from_pointcloud(points, spacing)
    except ValidationError:
        return  # degenerate (collinear) input
    b = particles_from_pointcloud(points.copy(), spacing)
    assert a.n == b.n and np.array_equal(a.x, b.x)
