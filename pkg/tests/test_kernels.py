import numpy as np
import pytest

from autorig import kernels


@pytest.fixture
def restore_backend():
    prev = kernels.active_backend()
    yield
    kernels.set_backend(prev)


def has_numba():
    try:
        import numba  # noqa: F401
        return True
    except ImportError:
        return False


def brute_nearest_sqdist(a, b):
    return np.array([((p - b) ** 2).sum(axis=1).min() for p in a])


def brute_point_segment(points, seg_a, seg_b):
    out = np.empty((len(points), len(seg_a)))
    for i, p in enumerate(points):
        for j in range(len(seg_a)):
            ab = seg_b[j] - seg_a[j]
            len2 = float(ab @ ab)
            t = 0.0 if len2 == 0.0 else float(np.clip((p - seg_a[j]) @ ab / len2, 0.0, 1.0))
            out[i, j] = np.linalg.norm(p - (seg_a[j] + t * ab))
    return out


def test_nearest_sqdist_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.normal(size=(rng.integers(1, 700), 3))
        b = rng.normal(size=(rng.integers(1, 50), 3))
        assert np.allclose(kernels.nearest_sqdist(a, b), brute_nearest_sqdist(a, b), atol=1e-12)


def test_point_segment_dist_matches_brute_force():
    rng = np.random.default_rng(1)
    points = rng.normal(size=(600, 3))
    seg_a = rng.normal(size=(9, 3))
    seg_b = rng.normal(size=(9, 3))
    seg_b[3] = seg_a[3]  # zero-length segment degrades to point distance
    got = kernels.point_segment_dist(points, seg_a, seg_b)
    assert np.allclose(got, brute_point_segment(points, seg_a, seg_b), atol=1e-12)
    assert np.isfinite(got).all()


def test_point_segment_endpoints_and_interior():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    pts = np.array([[-1.0, 0.0, 0.0], [0.5, 2.0, 0.0], [2.0, 0.0, 0.0], [0.25, 0.0, 0.0]])
    d = kernels.point_segment_dist(pts, a, b)[:, 0]
    assert np.allclose(d, [1.0, 2.0, 1.0, 0.0], atol=1e-15)


def test_lbs_identity_is_bit_exact():
    rng = np.random.default_rng(2)
    points = rng.normal(size=(257, 3))
    weights = rng.dirichlet(np.ones(5), size=257)
    rot = np.broadcast_to(np.eye(3), (5, 3, 3)).copy()
    trans = np.zeros((5, 3))
    out = kernels.lbs_blend(points, weights, rot, trans)
    assert np.array_equal(out, points)


def test_lbs_one_hot_is_rigid():
    rng = np.random.default_rng(3)
    points = rng.normal(size=(40, 3))
    k = 4
    rot = np.stack([np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(k)])
    trans = rng.normal(size=(k, 3))
    weights = np.zeros((40, k))
    pick = rng.integers(0, k, size=40)
    weights[np.arange(40), pick] = 1.0
    out = kernels.lbs_blend(points, weights, rot, trans)
    expect = np.einsum("nij,nj->ni", rot[pick], points) + trans[pick]
    assert np.allclose(out, expect, atol=1e-12)


def test_lbs_matches_naive_blend():
    rng = np.random.default_rng(4)
    points = rng.normal(size=(30, 3))
    k = 6
    rot = rng.normal(size=(k, 3, 3))
    trans = rng.normal(size=(k, 3))
    weights = rng.dirichlet(np.ones(k), size=30)
    naive = np.zeros_like(points)
    for i in range(30):
        for j in range(k):
            naive[i] += weights[i, j] * (rot[j] @ points[i] + trans[j])
    assert np.allclose(kernels.lbs_blend(points, weights, rot, trans), naive, atol=1e-12)


def test_backend_switching(restore_backend):
    kernels.set_backend("numpy")
    assert kernels.active_backend() == "numpy"
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")


@pytest.mark.skipif(not has_numba(), reason="numba not installed")
def test_backend_parity(restore_backend):
    rng = np.random.default_rng(5)
    points = rng.normal(size=(300, 3))
    cloud = rng.normal(size=(80, 3))
    seg_a = rng.normal(size=(7, 3))
    seg_b = rng.normal(size=(7, 3))
    weights = rng.dirichlet(np.ones(7), size=300)
    rot = np.stack([np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(7)])
    trans = rng.normal(size=(7, 3))

    results = {}
    for name in ("numpy", "numba"):
        kernels.set_backend(name)
        assert kernels.active_backend() == name
        results[name] = (
            kernels.nearest_sqdist(points, cloud),
            kernels.point_segment_dist(points, seg_a, seg_b),
            kernels.lbs_blend(points, weights, rot, trans),
        )
    for got, ref in zip(results["numba"], results["numpy"]):
        assert np.allclose(got, ref, atol=1e-12)
