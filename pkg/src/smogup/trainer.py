"""Training loop: two forward passes (upsampling and reconstruction), one
backward pass, global-norm clipping and AdamW under a cosine schedule."""

import csv
from dataclasses import dataclass, fields, asdict
import logging
import math
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import network as nw
from .geometry import as_points, extract_patches, farthest_point_sample, normalize
from .losses import LossWeights, ProjectionConfig, loss_terms

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "lr", "loss", "loss_proj_coarse", "loss_proj_refined", "loss_acd", "grad_norm"]


class TrainingAborted(RuntimeError):
    def __init__(self, msg, item_index=None):
        super().__init__(msg)
        self.item_index = item_index


@dataclass
class TrainConfig:
    train_ratio: int = 4
    batch_size: int = 8
    iterations: int = 2000
    lr_start: float = 5e-4
    lr_end: float = 1e-6
    weight_decay: float = 0.1
    grad_clip_norm: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment_rotation: bool = True
    augment_jitter: bool = True
    perturbation_sigma: float = 0.005
    lambda1: float = 0.01
    lambda2: float = 0.01
    lambda3: float = 1.0
    sharpness: float = 1e3
    proj_neighbors: int = 4
    upsample_loss: str = "projection"
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr_start > self.lr_end > 0:
            raise ValueError("need lr_start > lr_end > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    @property
    def projection(self):
        return ProjectionConfig(self.sharpness, self.proj_neighbors)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        kinds = {f.name: f.type for f in fields(cls)}
        return cls(**{k: nw._coerce(v, kinds[k]) for k, v in d.items() if k in kinds})


@dataclass
class TrainingPair:
    input: np.ndarray
    target: np.ndarray


def cosine_lr(step, cfg):
    """Cosine decay from ``lr_start`` at step 0 to ``lr_end`` at the last step."""
    last = cfg.iterations - 1
    t = min(max(step, 0), last)
    if last == 0:
        return cfg.lr_start
    w = 0.5 * (1.0 + math.cos(math.pi * t / last))
    return w * cfg.lr_start + (1.0 - w) * cfg.lr_end


def global_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grad_norm(grads, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


class AdamState:
    def __init__(self, params):
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.skipped = 0


def adamw_step(params, grads, state, lr, cfg):
    """One decoupled-weight-decay Adam update, in place.

    A non-finite gradient skips the update and bumps ``state.skipped``.
    Returns True when the update was applied.
    """
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return False
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1 - b1 ** t
    bc2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        data = p.data
        if cfg.weight_decay:
            data -= data.dtype.type(lr * cfg.weight_decay) * data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        data -= (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.eps)
    return True


def random_rotation(rng):
    """Uniform rotation matrix from a uniformly sampled unit quaternion."""
    u1, u2, u3 = rng.random(3)
    a, b = math.sqrt(1 - u1), math.sqrt(u1)
    w, x, y, z = (a * math.sin(2 * math.pi * u2), a * math.cos(2 * math.pi * u2),
                  b * math.sin(2 * math.pi * u3), b * math.cos(2 * math.pi * u3))
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def augment(pair, rng, sigma=0.005, rotate=True, rotation=None):
    """Shared random rotation for input and target; Gaussian jitter on the input only."""
    if rotation is None:
        rotation = random_rotation(rng) if rotate else np.eye(3)
    inp = pair.input @ rotation.T
    tgt = pair.target @ rotation.T
    if sigma > 0:
        inp = inp + rng.normal(0.0, sigma, inp.shape)
    return TrainingPair(inp, tgt)


def item_rng(seed, step, item):
    return np.random.default_rng(np.random.SeedSequence([seed, step, item]))


class ForwardResult(NamedTuple):
    loss: ad.Tensor
    terms: dict
    coarse: ad.Tensor
    refined: ad.Tensor
    recon: ad.Tensor


def forward_losses(model, inp, target, cfg, seed=None, samples=None, components=None):
    """Both training passes on one normalized pair, sharing backbone and encoder.

    The upsampling-pass queries are ``train_ratio * N`` draws from the
    detached mixture (seeded by ``seed``) unless ``samples`` and their
    ``components`` are given, as gradient checks do.
    """
    with ad.use_dtype(model.dtype):
        bb = nw.extract_features(inp, model)
        memory = nw.encoder_forward(bb.features, model)
        smog_out = nw.smog_head(bb.features, model, nw.component_indices(inp, model))
        if samples is None:
            m = cfg.train_ratio * len(bb.features.data)
            samples, components, _ = nw.draw_queries(smog_out, m, model, seed)
        rows = smog_out.feature_index[np.asarray(components, dtype=np.intp)]

        decoded = nw.decoder_forward(memory, nw.fourier_encode(samples, model), model)
        coarse = nw.coord_head(decoded, model)
        refined = None
        if model.config.refinement:
            refined = nw.refine(coarse, bb.features, rows, model, cfg.train_ratio).points

        recon = nw.coord_head(nw.decoder_forward(memory, nw.fourier_encode(smog_out.means, model), model), model)
        loss, terms = loss_terms(coarse, refined, target, recon, inp, cfg.weights, cfg.projection,
                                 cfg.upsample_loss)
    return ForwardResult(loss, terms, coarse, refined, recon)


def prepare_pair(pair, cfg, rng, augmentation=True):
    """Normalize by the input's transform, then augment."""
    inp, tf = normalize(pair.input)
    tgt = tf.apply(as_points(pair.target, "target"))
    p = TrainingPair(inp, tgt)
    if augmentation and (cfg.augment_rotation or cfg.augment_jitter):
        p = augment(p, rng, cfg.perturbation_sigma if cfg.augment_jitter else 0.0, cfg.augment_rotation)
    return p


class StepResult(NamedTuple):
    loss: float
    terms: dict
    grad_norm: float
    lr: float
    applied: bool


def train_step(batch, model, state, cfg, step):
    """One optimization step over ``batch`` (list of :class:`TrainingPair`)."""
    if not batch:
        raise ValueError("empty batch")
    params = model.parameters()
    model.zero_grad()
    total = 0.0
    terms = {"loss_proj_coarse": 0.0, "loss_proj_refined": 0.0, "loss_acd": 0.0}
    for i, pair in enumerate(batch):
        rng = item_rng(cfg.seed, step, i)
        p = prepare_pair(pair, cfg, rng)
        try:
            res = forward_losses(model, p.input, p.target, cfg, rng)
        except ad.NumericalError as exc:
            raise TrainingAborted(f"step {step}, batch item {i}: {exc}", i) from exc
        if not math.isfinite(res.loss.item()):
            raise TrainingAborted(f"step {step}, batch item {i}: non-finite loss", i)
        ad.backward(res.loss * (1.0 / len(batch)))
        total += res.loss.item() / len(batch)
        for k in terms:
            terms[k] += res.terms[k] / len(batch)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    norm = clip_grad_norm(grads, cfg.grad_clip_norm)
    lr = cosine_lr(step, cfg)
    applied = adamw_step(params, grads, state, lr, cfg)
    return StepResult(total, terms, norm, lr, applied)


class Trainer:
    """Runs :func:`train_step` over a dataset with logging and checkpoints."""

    def __init__(self, model, cfg, pairs, state=None, start_step=0):
        if not pairs:
            raise ValueError("no training pairs")
        self.model = model
        self.cfg = cfg
        self.pairs = pairs
        self.state = state or AdamState(model.parameters())
        self.step = start_step
        self.history = []

    def batch_for(self, step):
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, step, 1 << 20]))
        if len(self.pairs) == 1:
            return [self.pairs[0]] * self.cfg.batch_size
        idx = rng.choice(len(self.pairs), size=self.cfg.batch_size,
                         replace=len(self.pairs) < self.cfg.batch_size)
        return [self.pairs[i] for i in idx]

    def run(self, until=None, log_writer=None, checkpoint_fn=None, callback=None):
        until = self.cfg.iterations if until is None else min(until, self.cfg.iterations)
        while self.step < until:
            res = train_step(self.batch_for(self.step), self.model, self.state, self.cfg, self.step)
            row = [self.step, res.lr, res.loss, res.terms["loss_proj_coarse"],
                   res.terms["loss_proj_refined"], res.terms["loss_acd"], res.grad_norm]
            self.history.append(row)
            if log_writer is not None:
                log_writer.writerow([row[0]] + [f"{v:.9g}" for v in row[1:]])
            if callback is not None:
                callback(self, res)
            self.step += 1
            if checkpoint_fn is not None and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                checkpoint_fn(self)
            if self.step % 100 == 0:
                log.info("step %d loss %.6g lr %.3g", self.step, res.loss, res.lr)
        return self.history


def open_log(path, append=False):
    fh = open(path, "a" if append else "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    if not append:
        w.writerow(LOG_HEADER)
    return fh, w


def read_log(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def make_training_pairs(dense, num_pairs, input_size=256, ratio=4, seed=0):
    """Cut ``num_pairs`` patches of ``ratio * input_size`` points out of a dense
    cloud and subsample each to ``input_size`` inputs."""
    dense = as_points(dense)
    target_size = ratio * input_size
    patches = extract_patches(dense, target_size, 1)
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(num_pairs):
        patch = patches[i % len(patches)].points
        start = int(rng.integers(len(patch)))
        inp = patch[farthest_point_sample(patch, input_size, start)]
        pairs.append(TrainingPair(inp, patch))
    return pairs
