"""Training losses (autodiff) and evaluation metrics (numpy).

Nearest-neighbour indices inside the losses are recomputed every forward
pass and treated as constants, so gradients are piecewise exact.
"""

import csv
from dataclasses import dataclass
import math

import numpy as np

from . import autodiff as ad
from .geometry import as_points, knn_indices, nearest_sq_dists, point_mesh_distance


@dataclass(frozen=True)
class ProjectionConfig:
    sharpness: float = 1e3
    neighbor_count: int = 4

    def __post_init__(self):
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")
        if self.neighbor_count < 1:
            raise ValueError("neighbor_count must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 0.01
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


def _tensor(x):
    if isinstance(x, ad.Tensor):
        if x.ndim != 2 or x.shape[1] != 3:
            raise ValueError(f"expected an (N, 3) cloud, got shape {x.shape}")
        return x
    return ad.tensor(as_points(x))


def _nonempty(*clouds):
    for c in clouds:
        if c.shape[0] == 0:
            raise ValueError("empty point cloud")


def project(x, z, cfg=ProjectionConfig()):
    """Soft projection of every row of ``x`` onto cloud ``z``.

    Weighted mean of the ``k`` nearest points with weights
    ``exp(-sharpness * d^2)``, normalized (computed as a softmax so that far
    points do not underflow to 0/0).
    """
    x, z = _tensor(x), _tensor(z)
    _nonempty(x, z)
    k = min(cfg.neighbor_count, z.shape[0])
    nbr = knn_indices(z.data, x.data, k)
    zk = ad.gather(z, nbr)
    diff = x.reshape(-1, 1, 3) - zk
    d2 = ad.sum(diff * diff, axis=2)
    w = ad.softmax(d2 * (-cfg.sharpness), axis=1)
    return ad.sum(w.reshape(-1, k, 1) * zk, axis=1)


def project_point(x, z, cfg=ProjectionConfig()):
    """Projection of a single 3D point; returns a length-3 array."""
    return project(as_points(x, "x"), z, cfg).data[0]


def projection_distance(x, z, cfg=ProjectionConfig()):
    """Mean squared distance between points of ``x`` and their projections onto ``z``."""
    x = _tensor(x)
    dev = x - project(x, z, cfg)
    return ad.mean(ad.sum(dev * dev, axis=1))


def projection_loss(x, z, cfg=ProjectionConfig()):
    return projection_distance(x, z, cfg) + projection_distance(z, x, cfg)


def _directed_mean_min_sq(x, z):
    idx = knn_indices(z.data, x.data, 1)[:, 0]
    diff = x - ad.gather(z, idx)
    return ad.mean(ad.sum(diff * diff, axis=1))


def acd(x, z):
    """Augmented Chamfer distance: the larger of the two directed mean-min terms."""
    x, z = _tensor(x), _tensor(z)
    _nonempty(x, z)
    a = _directed_mean_min_sq(x, z)
    b = _directed_mean_min_sq(z, x)
    return a if a.data >= b.data else b


def loss_terms(coarse4, refined4, gt4, recon, inp, w=LossWeights(), cfg=ProjectionConfig(),
               upsample_loss="projection"):
    """Weighted total plus the unweighted terms.

    A term whose weight is zero is still evaluated (for logging) but kept
    off the tape.
    """
    if upsample_loss == "projection":
        def up(a, b):
            return projection_loss(a, b, cfg)
    elif upsample_loss == "acd":
        up = acd
    else:
        raise ValueError(f"unknown upsampling loss {upsample_loss!r}")

    def term(weight, fn, *args):
        if weight == 0:
            with ad.no_grad():
                return fn(*args), False
        return fn(*args), True

    pc, pc_on = term(w.lambda1, up, coarse4, gt4)
    pr, pr_on = (term(w.lambda2, up, refined4, gt4) if refined4 is not None
                 else (ad.tensor(0.0), False))
    ra, ra_on = term(w.lambda3, acd, recon, inp)
    parts = [t * lam for t, lam, on in ((pc, w.lambda1, pc_on), (pr, w.lambda2, pr_on),
                                        (ra, w.lambda3, ra_on)) if on]
    total = parts[0] if parts else ad.tensor(0.0)
    for p in parts[1:]:
        total = total + p
    return total, {"loss_proj_coarse": pc.item(), "loss_proj_refined": pr.item(), "loss_acd": ra.item()}


def total_loss(coarse4, refined4, gt4, recon, inp, w=LossWeights(), cfg=ProjectionConfig()):
    """``l1 * L_proj(coarse, gt) + l2 * L_proj(refined, gt) + l3 * ACD(recon, input)``."""
    return loss_terms(coarse4, refined4, gt4, recon, inp, w, cfg)[0]


# evaluation metrics


def _clouds(x, z):
    x, z = as_points(x), as_points(z)
    if len(x) == 0 or len(z) == 0:
        raise ValueError("empty point cloud")
    return x, z


def chamfer(x, z):
    """Sum of the two directed mean nearest-neighbour squared distances."""
    x, z = _clouds(x, z)
    return float(nearest_sq_dists(x, z)[0].mean() + nearest_sq_dists(z, x)[0].mean())


def hausdorff(x, z):
    """Symmetric Hausdorff distance (unsquared)."""
    x, z = _clouds(x, z)
    return float(math.sqrt(max(nearest_sq_dists(x, z)[0].max(), nearest_sq_dists(z, x)[0].max())))


def p2f(x, mesh):
    """Mean and standard deviation of point-to-surface distances."""
    d = point_mesh_distance(x, mesh)
    return float(d.mean()), float(d.std())


@dataclass
class MetricReport:
    """Raw metric values; :meth:`row` renders them in units of 1e-3."""

    cd: float
    hd: float
    p2f_mean: float = None
    p2f_std: float = None

    def row(self, shape):
        def fmt(v):
            return "" if v is None else f"{v * 1e3:.3f}"
        return [shape, fmt(self.cd), fmt(self.hd), fmt(self.p2f_mean), fmt(self.p2f_std)]


METRIC_CSV_HEADER = ["shape", "cd", "hd", "p2f_mean", "p2f_std"]


def evaluate(pred, gt, mesh=None):
    rep = MetricReport(chamfer(pred, gt), hausdorff(pred, gt))
    if mesh is not None:
        rep.p2f_mean, rep.p2f_std = p2f(pred, mesh)
    return rep


def mean_report(reports):
    def avg(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None
    return MetricReport(avg([r.cd for r in reports]), avg([r.hd for r in reports]),
                        avg([r.p2f_mean for r in reports]), avg([r.p2f_std for r in reports]))


def write_metric_csv(fh, named_reports, with_mean=False):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(METRIC_CSV_HEADER)
    for name, rep in named_reports:
        w.writerow(rep.row(name))
    if with_mean:
        w.writerow(mean_report([r for _, r in named_reports]).row("mean"))
