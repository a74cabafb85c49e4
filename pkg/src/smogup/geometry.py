"""Point cloud and triangle mesh utilities.

Point clouds are plain ``(N, 3)`` float arrays. Everything here is a pure
function of its inputs; randomness only enters through explicit seeds.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

# rows per chunk when building query x points distance blocks
_BLOCK = 1 << 20


def as_points(points, name="points"):
    """Validate and return ``points`` as a float64 ``(N, 3)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name}: expected an (N, 3) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite coordinates")
    return arr


def _sq_dists_sum(queries, points):
    diff = queries[:, None, :] - points[None, :, :]
    diff *= diff
    return diff[..., 0] + diff[..., 1] + diff[..., 2]


def knn_indices(points, queries, k):
    """Indices of the ``k`` nearest ``points`` for every query row.

    Exact Euclidean search, ascending by distance with ties broken by the
    lower index. Returns an ``(Q, k)`` integer array.

    Candidates come from the BLAS expansion ``|q|^2 + |p|^2 - 2 q.p``; the
    winners are then re-ranked on exactly computed differences. Rows where
    the expansion cannot separate the k-th neighbour from the rest (within
    its rounding bound) are redone with a full exact sort.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n = len(points)
    if k <= 0:
        raise ValueError("empty query: k must be positive")
    if k > n:
        raise ValueError(f"insufficient points: k={k} > {n}")
    out = np.empty((len(queries), k), dtype=np.intp)
    pp = (points * points).sum(axis=1)
    rows = max(1, _BLOCK // max(n, 1))
    for s in range(0, len(queries), rows):
        q = queries[s:s + rows]
        qq = (q * q).sum(axis=1)
        if k == n:
            out[s:s + rows] = np.argsort(_sq_dists_sum(q, points), axis=1, kind="stable")
            continue
        approx = q @ points.T
        approx *= -2.0
        approx += pp
        approx += qq[:, None]
        part = np.argpartition(approx, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(approx, part, axis=1).max(axis=1)
        tol = 1e-10 * (1.0 + qq + pp.max())
        ambiguous = (approx <= (kth + tol)[:, None]).sum(axis=1) > k
        diff = q[:, None, :] - points[part]
        exact = (diff * diff).sum(axis=2)
        order = np.lexsort((part, exact), axis=1)
        block = np.take_along_axis(part, order, axis=1)
        for r in np.flatnonzero(ambiguous):
            block[r] = np.argsort(_sq_dists_sum(q[r:r + 1], points)[0], kind="stable")[:k]
        out[s:s + rows] = block
    return out


def knn(points, query, k):
    """The ``k`` nearest neighbours of a single 3D ``query`` point."""
    pts = as_points(points)
    q = as_points(query, "query")
    return [int(i) for i in knn_indices(pts, q, k)[0]]


def nearest_sq_dists(queries, points):
    """Squared distance from each query to its nearest point, plus the index."""
    idx = knn_indices(points, queries, 1)[:, 0]
    diff = queries - points[idx]
    return (diff * diff).sum(axis=1), idx


def _fps_iter(points, start_index):
    n = len(points)
    mind = np.full(n, np.inf)
    i = start_index
    for _ in range(n):
        yield i
        diff = points - points[i]
        mind = np.minimum(mind, (diff * diff).sum(axis=1))
        mind[i] = -1.0
        i = int(np.argmax(mind))


def farthest_point_sample(points, m, start_index=0):
    """Greedy farthest point sampling; ties go to the lower index."""
    points = as_points(points)
    n = len(points)
    if m < 1 or m > n:
        raise ValueError(f"insufficient points: cannot pick {m} of {n}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")
    it = _fps_iter(points, start_index)
    return [next(it) for _ in range(m)]


@dataclass(frozen=True)
class NormalizationTransform:
    centroid: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points):
        return (np.asarray(points) - self.centroid) / self.scale

    def invert(self, points):
        return np.asarray(points) * self.scale + self.centroid


def normalize(points):
    """Center on the centroid and scale so the farthest point has norm 1."""
    points = as_points(points)
    if len(points) == 0:
        raise ValueError("cannot normalize an empty cloud")
    centroid = points.mean(axis=0)
    centered = points - centroid
    scale = float(np.sqrt((centered * centered).sum(axis=1).max()))
    if scale <= 1e-300:
        scale = 1.0
    tf = NormalizationTransform(centroid, scale)
    return centered / scale, tf


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = as_points(self.vertices, "vertices") if len(self.vertices) else np.zeros((0, 3))
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if np.any((faces[:, 0] == faces[:, 1]) & (faces[:, 1] == faces[:, 2])):
            raise ValueError("degenerate face with three identical indices")
        self.faces = faces

    def triangles(self):
        """``(F, 3, 3)`` array of corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self):
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)


def sample_mesh(mesh, n, seed=0, return_faces=False):
    """Area-weighted uniform sampling of ``n`` points on the mesh surface."""
    if n < 1:
        raise ValueError("n must be at least 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = mesh.triangles()[face]
    pts = ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
           + (r1 * r2)[:, None] * t[:, 2])
    return (pts, face) if return_faces else pts


def closest_point_on_triangles(p, a, b, c):
    """Closest point on triangles ``abc`` to points ``p`` (broadcasting).

    Region-based closed form: vertex, edge and face regions are tested in
    order and the first match wins.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        res = a + ab * v[..., None] + ac * w[..., None]
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        res = np.where(((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0))[..., None],
                       b + (c - b) * w_bc[..., None], res)
        w_ac = d2 / (d2 - d6)
        res = np.where(((vb <= 0) & (d2 >= 0) & (d6 <= 0))[..., None], a + ac * w_ac[..., None], res)
        res = np.where(((d6 >= 0) & (d5 <= d6))[..., None], np.broadcast_to(c, res.shape), res)
        v_ab = d1 / (d1 - d3)
        res = np.where(((vc <= 0) & (d1 >= 0) & (d3 <= 0))[..., None], a + ab * v_ab[..., None], res)
        res = np.where(((d3 >= 0) & (d4 <= d3))[..., None], np.broadcast_to(b, res.shape), res)
        res = np.where(((d1 <= 0) & (d2 <= 0))[..., None], np.broadcast_to(a, res.shape), res)
    return res


def point_mesh_distance(points, mesh):
    """Exact Euclidean distance from every point to the nearest mesh face."""
    points = as_points(points)
    if len(mesh.faces) == 0:
        raise ValueError("empty mesh")
    tri = mesh.triangles()
    best = np.full(len(points), np.inf)
    rows = max(1, _BLOCK // (4 * len(tri)))
    for s in range(0, len(points), rows):
        p = points[s:s + rows, None, :]
        q = closest_point_on_triangles(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        d = np.sqrt(((p - q) ** 2).sum(-1))
        d = np.where(np.isfinite(d), d, np.inf)
        best[s:s + rows] = d.min(axis=1)
    return best


@dataclass
class Patch:
    points: np.ndarray
    seed_index: int
    indices: np.ndarray = field(repr=False)

    @property
    def count(self):
        return len(self.points)


def _knn_graph(points, k):
    n = len(points)
    k = min(k, n - 1)
    if k < 1:
        return csr_matrix((n, n))
    nbr = knn_indices(points, points, k + 1)
    rows = np.repeat(np.arange(n), k + 1)
    cols = nbr.reshape(-1)
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    # explicit zero weights would read as missing edges
    w = np.linalg.norm(points[rows] - points[cols], axis=1) + 1e-12
    g = csr_matrix((w, (rows, cols)), shape=(n, n))
    return g.maximum(g.T)


def extract_patches(cloud, patch_size=256, target_coverage=1, k=16):
    """Overlapping geodesic patches seeded by farthest point sampling.

    Each patch holds the ``patch_size`` points closest to its seed along the
    k-NN graph (Dijkstra). Seeds whose graph component is too small fall back
    to plain Euclidean k-NN. Seeds are added in FPS order until
    ``patches * patch_size >= target_coverage * N`` and every point is covered.
    """
    cloud = as_points(cloud, "cloud")
    n = len(cloud)
    if patch_size > n:
        raise ValueError(f"insufficient points: patch_size {patch_size} > {n}")
    if target_coverage < 1:
        raise ValueError("target_coverage must be >= 1")
    wanted = math.ceil(target_coverage * n / patch_size)
    graph = _knn_graph(cloud, k)
    covered = np.zeros(n, dtype=bool)
    patches = []
    for seed in _fps_iter(cloud, 0):
        if len(patches) >= wanted and covered.all():
            break
        if len(patches) >= wanted and covered[seed]:
            continue
        geo = dijkstra(graph, directed=False, indices=seed)
        if np.isfinite(geo).sum() >= patch_size:
            idx = np.argsort(geo, kind="stable")[:patch_size]
        else:
            idx = knn_indices(cloud, cloud[seed:seed + 1], patch_size)[0]
        covered[idx] = True
        patches.append(Patch(cloud[idx], int(seed), idx))
    return patches


def merge_patches(upsampled_patches, transforms, target_count, start_index=0):
    """De-normalize patch outputs, concatenate, and FPS down to ``target_count``."""
    if len(upsampled_patches) == 0:
        raise ValueError("no patches to merge")
    if len(transforms) != len(upsampled_patches):
        raise ValueError("one transform per patch is required")
    merged = np.concatenate(
        [tf.invert(as_points(p)) for p, tf in zip(upsampled_patches, transforms)]
    )
    if target_count > len(merged):
        raise ValueError(f"insufficient points: {len(merged)} < target {target_count}")
    return merged[farthest_point_sample(merged, target_count, start_index)]
