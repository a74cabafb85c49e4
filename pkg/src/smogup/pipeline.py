"""Whole-shape workflows built from the patch-level pieces: patch-wise
upsampling with merge, dataset loading, and evaluation over shape sets."""

import math
from pathlib import Path

import numpy as np

from . import io
from .geometry import NormalizationTransform, as_points, extract_patches, merge_patches, normalize, sample_mesh
from .losses import evaluate
from .network import round_count, upsample
from .trainer import make_training_pairs

CLOUD_SUFFIXES = (".xyz",)
MESH_SUFFIXES = (".off", ".ply")
_IDENTITY = NormalizationTransform(np.zeros(3), 1.0)


def upsample_cloud(cloud, r, model, seed=0, patch_size=256, coverage=1.0):
    """Upsample a full shape to exactly ``round(r * N)`` points.

    Clouds larger than one patch are split into geodesic patches, each is
    upsampled independently (with its own seed stream), and the union is
    thinned back with farthest point sampling.
    """
    pts = as_points(cloud)
    if not r > 0:
        raise ValueError("ratio must be positive")
    n = len(pts)
    target = round_count(r, n)
    if target == 0:
        raise ValueError(f"ratio {r} on {n} points gives an empty output")
    if n <= patch_size:
        return upsample(pts, r, model, seed)
    patches = extract_patches(pts, patch_size, coverage)
    per_patch = max(round_count(r, patch_size), math.ceil(target / len(patches)))
    outs = []
    for i, patch in enumerate(patches):
        rng = np.random.default_rng([seed, i])
        outs.append(upsample(patch.points, per_patch / patch_size, model, rng))
    return merge_patches(outs, [_IDENTITY] * len(outs), target)


def shape_files(path):
    """Sorted shape files under ``path`` (or ``[path]`` for a single file)."""
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"no such file or directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in CLOUD_SUFFIXES + MESH_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no .xyz/.off/.ply files in {path}")
    return files


def load_dense(path, count, seed=0):
    """Point cloud from an XYZ file, or ``count`` area-weighted samples of a mesh."""
    path = Path(path)
    if path.suffix.lower() in MESH_SUFFIXES:
        mesh = io.read_mesh(path)
        if len(mesh.faces) == 0:
            return mesh.vertices
        return sample_mesh(mesh, count, seed)
    return io.read_xyz(path)


def training_pairs(dataset, patch_size=256, ratio=4, num_pairs=0, seed=0, mesh_samples=None):
    """Input/target patch pairs cut from every shape in ``dataset``."""
    target = ratio * patch_size
    mesh_samples = mesh_samples or max(8 * target, 4096)
    pairs = []
    for i, f in enumerate(shape_files(dataset)):
        dense = load_dense(f, mesh_samples, seed + i)
        if len(dense) < target:
            raise ValueError(f"{f}: {len(dense)} points, need at least {target} per target patch")
        count = len(extract_patches(dense, target)) if num_pairs <= 0 else num_pairs
        pairs += make_training_pairs(dense, count, patch_size, ratio, seed + i)
    return pairs


def evaluate_pair(pred, gt, mesh=None, normalized=True):
    """Metrics after mapping both clouds (and the mesh) by the GT normalization."""
    pred, gt = as_points(pred, "prediction"), as_points(gt, "ground truth")
    if normalized:
        gt, tf = normalize(gt)
        pred = tf.apply(pred)
        if mesh is not None:
            mesh = type(mesh)(tf.apply(mesh.vertices), mesh.faces)
    return evaluate(pred, gt, mesh)
