import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smogup.geometry import (NormalizationTransform, TriangleMesh, closest_point_on_triangles, extract_patches,
                             farthest_point_sample, knn, knn_indices, merge_patches, normalize,
                             point_mesh_distance, sample_mesh)


def brute_knn(points, q, k):
    d = ((points - q) ** 2).sum(axis=1)
    return sorted(range(len(points)), key=lambda i: (d[i], i))[:k]


def brute_fps(points, m, start=0):
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i in range(len(points)):
            if i in chosen:
                continue
            d = min(((points[i] - points[j]) ** 2).sum() for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def test_knn_collinear():
    pts = [(0, 0, 0), (1, 0, 0), (3, 0, 0)]
    assert knn(pts, (0, 0, 0), 2) == [0, 1]


def test_knn_self_and_duplicates():
    pts = np.array([[0, 0, 0], [1, 1, 1], [1, 1, 1], [2, 0, 0]], dtype=float)
    assert knn(pts, pts[3], 1) == [3]
    assert knn(pts, pts[2], 1) == [1]
    assert knn(pts, pts[2], 2) == [1, 2]


def test_knn_random_matches_scan(rng):
    pts = rng.random((50, 3))
    q = rng.random(3)
    assert knn(pts, q, 5) == brute_knn(pts, q, 5)


def test_knn_errors():
    pts = np.zeros((3, 3))
    with pytest.raises(ValueError, match="insufficient points"):
        knn(pts, (0, 0, 0), 4)
    with pytest.raises(ValueError, match="empty query"):
        knn(pts, (0, 0, 0), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.integers(0, 10**6), st.booleans())
def test_knn_exhaustive_property(n, seed, grid):
    rng = np.random.default_rng(seed)
    # grid coordinates produce many exact ties
    pts = rng.integers(0, 4, (n, 3)).astype(float) if grid else rng.normal(size=(n, 3))
    qs = pts[rng.integers(0, n, 5)] if grid else rng.normal(size=(5, 3))
    k = int(rng.integers(1, n + 1))
    got = knn_indices(pts, qs, k)
    for q, row in zip(qs, got):
        assert list(row) == brute_knn(pts, q, k)


def test_knn_large_coordinates_exact(rng):
    # the dot-product expansion loses precision far from the origin
    pts = 1e6 + rng.random((300, 3)) * 1e-3
    q = pts[:10] + 1e-7
    got = knn_indices(pts, q, 3)
    for qq, row in zip(q, got):
        assert list(row) == brute_knn(pts, qq, 3)


def test_fps_line():
    pts = [(x, 0, 0) for x in range(5)]
    assert farthest_point_sample(pts, 2, 0) == [0, 4]


def test_fps_exhaustion_is_permutation(rng):
    pts = rng.random((20, 3))
    assert sorted(farthest_point_sample(pts, 20, 3)) == list(range(20))


def test_fps_matches_reference(rng):
    pts = rng.random((30, 3))
    assert farthest_point_sample(pts, 8, 0) == brute_fps(pts, 8)
    assert farthest_point_sample(pts, 8, 5) == brute_fps(pts, 8, 5)


def test_fps_greedy_optimality(rng):
    pts = rng.random((60, 3))
    sel = farthest_point_sample(pts, 15, 2)
    for t in range(1, len(sel)):
        prev = pts[sel[:t]]
        mind = ((pts[:, None] - prev[None]) ** 2).sum(-1).min(axis=1)
        rest = [i for i in range(len(pts)) if i not in sel[:t]]
        assert mind[sel[t]] >= mind[rest].max()


def test_fps_errors():
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((3, 3)), 4)
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((3, 3)), 2, 3)


def test_normalize_example():
    out, tf = normalize([(2, 0, 0), (4, 0, 0)])
    np.testing.assert_allclose(out, [(-1, 0, 0), (1, 0, 0)])
    np.testing.assert_allclose(tf.centroid, (3, 0, 0))
    assert tf.scale == 1.0


def test_normalize_idempotent(rng):
    once, _ = normalize(rng.normal(size=(40, 3)))
    twice, _ = normalize(once)
    np.testing.assert_allclose(twice, once, atol=1e-9)


def test_normalize_invariants_and_roundtrip(rng):
    x = rng.normal(size=(100, 3)) * 7 + 3
    y, tf = normalize(x)
    assert np.linalg.norm(y.mean(axis=0)) < 1e-9
    assert abs(np.linalg.norm(y, axis=1).max() - 1) < 1e-9
    np.testing.assert_allclose(tf.invert(y), x, rtol=1e-6)
    np.testing.assert_allclose(tf.apply(x), y, atol=1e-12)


def test_normalize_degenerate():
    y, tf = normalize([(1, 2, 3)] * 4)
    assert tf.scale == 1.0
    np.testing.assert_allclose(tf.centroid, (1, 2, 3))
    np.testing.assert_allclose(y, 0)
    with pytest.raises(ValueError):
        NormalizationTransform(np.zeros(3), 0.0)


def test_mesh_validation():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(ValueError):
        TriangleMesh(np.eye(3), [[1, 1, 1]])


def test_sample_mesh_containment():
    mesh = TriangleMesh([(0, 0, 0), (1, 0, 0), (0, 1, 0)], [[0, 1, 2]])
    pts = sample_mesh(mesh, 1000, seed=3)
    assert pts.shape == (1000, 3)
    assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 1] >= 0) and np.all(pts.sum(axis=1) <= 1 + 1e-12)
    np.testing.assert_array_equal(pts[:, 2], 0)


def test_sample_mesh_area_weighting():
    verts = [(0, 0, 0), (3, 0, 0), (0, 1, 0), (10, 0, 0), (11, 0, 0), (10, 1, 0)]
    mesh = TriangleMesh(verts, [[0, 1, 2], [3, 4, 5]])
    _, faces = sample_mesh(mesh, 10000, seed=1, return_faces=True)
    count = int((faces == 0).sum())
    sd = np.sqrt(10000 * 0.75 * 0.25)
    assert abs(count - 7500) < 3 * sd


def test_sample_mesh_deterministic_and_on_surface():
    mesh = _tetra()
    a = sample_mesh(mesh, 500, seed=9)
    np.testing.assert_array_equal(a, sample_mesh(mesh, 500, seed=9))
    assert point_mesh_distance(a, mesh).max() < 1e-9


def test_sample_mesh_zero_area():
    with pytest.raises(ValueError, match="zero total area"):
        sample_mesh(TriangleMesh([(0, 0, 0), (1, 0, 0), (2, 0, 0)], [[0, 1, 2]]), 5)


def _tetra():
    v = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
    return TriangleMesh(v, [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])


def test_point_triangle_interior_height():
    mesh = TriangleMesh([(-10, -10, 0), (10, -10, 0), (0, 10, 0)], [[0, 1, 2]])
    np.testing.assert_allclose(point_mesh_distance([(0.1, 0.2, 0.7)], mesh), [0.7])


def test_closest_point_regions_against_dense_oracle(rng):
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0.2, 0]), np.array([0.3, 1.1, 0.4])
    # barycentric supersampling of the triangle, edges included
    s = np.linspace(0, 1, 301)
    u, v = np.meshgrid(s, s)
    keep = u + v <= 1
    dense = a + u[keep, None] * (b - a) + v[keep, None] * (c - a)
    p = rng.uniform(-1.5, 2.5, (200, 3))
    got = np.linalg.norm(p - closest_point_on_triangles(p, a, b, c), axis=1)
    ref = np.sqrt(((p[:, None] - dense[None]) ** 2).sum(-1).min(axis=1))
    assert np.all(got <= ref + 1e-12)
    np.testing.assert_allclose(got, ref, atol=5e-3)


def test_closest_point_is_minimum(rng):
    tri = rng.normal(size=(3, 3))
    for p in rng.normal(size=(50, 3)) * 2:
        q = closest_point_on_triangles(p, *tri)
        d = np.linalg.norm(p - q)
        w = rng.dirichlet(np.ones(3), 2000)
        assert d <= np.linalg.norm(p - w @ tri, axis=1).min() + 1e-12


def test_extract_patches_whole_cloud(rng):
    pts = rng.random((256, 3))
    patches = extract_patches(pts, 256, 1)
    assert len(patches) == 1
    assert sorted(patches[0].indices) == list(range(256))


def test_extract_patches_coverage(rng):
    pts = rng.random((512, 3))
    patches = extract_patches(pts, 256, 2)
    assert len(patches) >= 4
    assert all(p.count == 256 for p in patches)
    assert set(np.concatenate([p.indices for p in patches])) == set(range(512))


def test_extract_patches_respects_components(rng):
    a = rng.random((256, 3))
    b = rng.random((256, 3)) + 100
    patches = extract_patches(np.vstack([a, b]), 256, 1)
    for p in patches:
        side = p.indices < 256
        assert side.all() or (~side).all()


def test_extract_patches_too_large():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((10, 3)), 11)


def test_merge_identity(rng):
    pts = rng.random((1024, 3))
    ident = NormalizationTransform(np.zeros(3), 1.0)
    out = merge_patches([pts], [ident], 1024)
    assert sorted(map(tuple, out)) == sorted(map(tuple, pts))


def test_merge_duplicates_spread(rng):
    pts = rng.random((200, 3))
    ident = NormalizationTransform(np.zeros(3), 1.0)
    out = merge_patches([pts, pts], [ident, ident], 200)
    assert len(out) == 200
    # FPS never takes an exact duplicate while unseen points remain
    assert len({tuple(p) for p in out}) == 200


def test_merge_denormalizes():
    tf = NormalizationTransform(np.array([1.0, 2, 3]), 2.0)
    out = merge_patches([np.zeros((1, 3))], [tf], 1)
    np.testing.assert_allclose(out, [[1, 2, 3]])


def test_merge_errors(rng):
    ident = NormalizationTransform(np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        merge_patches([], [], 1)
    with pytest.raises(ValueError, match="insufficient points"):
        merge_patches([rng.random((1024, 3))] * 4, [ident] * 4, 8192)
