"""Learnable components of the upsampler.

Parameters live in a flat, ordered ``name -> Tensor`` mapping on
:class:`Model`; the forward functions below read them by prefix. Layer
``x @ W + b`` uses ``W`` of shape ``(fan_in, fan_out)``.
"""

from dataclasses import dataclass, fields, asdict
import math
from typing import NamedTuple
import warnings

import numpy as np

from . import autodiff as ad
from .geometry import as_points, farthest_point_sample, knn_indices, normalize
from .smog import SmogParams, inverse_softplus, sample_smog, sample_uniform_sphere

# no-grad forward passes are chunked to keep intermediates around this many values
_CHUNK_VALUES = 1 << 22


@dataclass
class ModelConfig:
    dim: int = 128
    k_backbone: int = 32
    heads: int = 4
    enc_layers: int = 1
    enc_hidden: int = 64
    dec_layers: int = 2
    dec_hidden: int = 128
    num_freqs: int = 8
    smog_hidden: int = 128
    coord_hidden: int = 128
    refine_hidden: int = 64
    covariance: str = "clamped"
    init_variance: float = 0.01
    sampling: str = "smog"
    component_fraction: float = 1.0
    refinement: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.covariance not in ("clamped", "rotdiag"):
            raise ValueError(f"unknown covariance construction {self.covariance!r}")
        if self.sampling not in ("smog", "uniform"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if not 0 < self.component_fraction <= 1:
            raise ValueError("component_fraction must be in (0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, val in d.items():
            if key not in kinds:
                continue
            kw[key] = _coerce(val, kinds[key])
        return cls(**kw)


def _coerce(val, kind):
    if not isinstance(val, str):
        return val
    if kind in (bool, "bool"):
        return val.strip().lower() in ("1", "true", "yes", "on")
    if kind in (int, "int"):
        return int(val)
    if kind in (float, "float"):
        return float(val)
    return val


class Model:
    """Container for all learnable weights plus the architecture config."""

    def __init__(self, config=None, dtype=np.float32, params=None):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype).type
        if params is None:
            params = _init_params(self.config, self.dtype)
        self.params = params

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype):
        dtype = np.dtype(dtype).type
        params = {k: ad.Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                  for k, v in self.params.items()}
        return Model(self.config, dtype, params)

    def copy(self):
        return self.astype(self.dtype)


class _Init:
    def __init__(self, cfg, dtype):
        self.rng = np.random.default_rng(cfg.seed)
        self.dtype = dtype
        self.params = {}

    def add(self, name, arr):
        self.params[name] = ad.Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)

    def linear(self, name, fan_in, fan_out, zero=False, bias=None):
        bound = 1.0 / math.sqrt(fan_in)
        if zero:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            w = self.rng.uniform(-bound, bound, (fan_in, fan_out))
            b = self.rng.uniform(-bound, bound, fan_out)
        if bias is not None:
            b = np.asarray(bias, dtype=np.float64) + np.zeros(fan_out)
        self.add(name + ".w", w)
        self.add(name + ".b", b)

    def norm(self, name, dim):
        self.add(name + ".g", np.ones(dim))
        self.add(name + ".b", np.zeros(dim))

    def ptl(self, name, d_in, dim):
        self.linear(name + ".alpha", d_in, dim)
        self.linear(name + ".beta", d_in, dim)
        self.linear(name + ".psi", d_in, dim)
        self.linear(name + ".gamma.0", dim, dim)
        self.linear(name + ".gamma.1", dim, dim)
        self.linear(name + ".eta.0", 3, dim)
        self.linear(name + ".eta.1", dim, dim)

    def attention(self, name, dim):
        for part in ("q", "k", "v", "o"):
            self.linear(f"{name}.{part}", dim, dim)


def _init_params(cfg, dtype):
    b = _Init(cfg, dtype)
    d = cfg.dim
    b.linear("backbone.embed.0", 3, d)
    b.linear("backbone.embed.1", d, d)
    b.ptl("backbone.ptl", d, d)

    h = cfg.smog_hidden
    b.linear("smog.0", d, h)
    b.linear("smog.1", h, h)
    b.linear("smog.mean", h, 3)
    raw_var = float(inverse_softplus(cfg.init_variance))
    if cfg.covariance == "clamped":
        cov_bias = [raw_var, raw_var, 0.0]
    else:
        cov_bias = [0.0, raw_var, raw_var]
    b.linear("smog.cov", h, 3, bias=cov_bias)

    for i in range(cfg.enc_layers):
        p = f"encoder.{i}"
        b.norm(p + ".ln1", d)
        b.attention(p + ".attn", d)
        b.norm(p + ".ln2", d)
        b.linear(p + ".mlp.0", d, cfg.enc_hidden)
        b.linear(p + ".mlp.1", cfg.enc_hidden, d)
    b.norm("encoder.ln", d)

    b.linear("query", 6 * cfg.num_freqs, d)
    for i in range(cfg.dec_layers):
        p = f"decoder.{i}"
        b.norm(p + ".ln1", d)
        b.attention(p + ".self", d)
        b.norm(p + ".ln2", d)
        b.attention(p + ".cross", d)
        b.norm(p + ".ln3", d)
        b.linear(p + ".mlp.0", d, cfg.dec_hidden)
        b.linear(p + ".mlp.1", cfg.dec_hidden, d)
    b.norm("decoder.ln", d)

    b.linear("coord.0", d, cfg.coord_hidden)
    b.linear("coord.1", cfg.coord_hidden, 3)

    b.linear("refine.in", d, d)
    b.ptl("refine.ptl", d, d)
    b.linear("refine.out", d, d)
    b.linear("refine.res.0", d, cfg.refine_hidden)
    b.linear("refine.res.1", cfg.refine_hidden, 3, zero=True)
    return b.params


# building blocks


def linear(model, name, x):
    w, b = model[name + ".w"], model[name + ".b"]
    if x.ndim == 2:
        return x @ w + b
    lead = x.shape[:-1]
    y = x.reshape(-1, x.shape[-1]) @ w + b
    return y.reshape(lead + (w.shape[1],))


def mlp2(model, name, x):
    return linear(model, name + ".1", ad.relu(linear(model, name + ".0", x)))


def norm(model, name, x):
    return ad.layer_norm(x) * model[name + ".g"] + model[name + ".b"]


def _const(x, model):
    if isinstance(x, ad.Tensor):
        return x
    return ad.Tensor(np.asarray(x, dtype=model.dtype), dtype=model.dtype)


def _chunks(n, per_row):
    if ad.is_grad_enabled():
        return [slice(0, n)]
    step = max(1, _CHUNK_VALUES // max(per_row, 1))
    return [slice(s, min(n, s + step)) for s in range(0, n, step)]


def ptl_forward(points, features, model, k, prefix="backbone.ptl", neighbors=None):
    """Vector-attention Point Transformer layer over ``k`` nearest neighbours.

    ``points`` are the ``(N, 3)`` coordinates used for neighbourhoods and
    relative positional encodings; ``features`` the ``(N, D_in)`` inputs to
    the value/query/key maps. Softmax runs over the neighbour axis
    independently for every channel.
    """
    pts = _const(points, model)
    x = _const(features, model)
    n = pts.shape[0]
    if k > n:
        raise ValueError(f"insufficient points: k={k} > {n}")
    if neighbors is None:
        neighbors = knn_indices(pts.data, pts.data, k)
    v = linear(model, prefix + ".alpha", x)
    q = linear(model, prefix + ".beta", x)
    key = linear(model, prefix + ".psi", x)
    dim = v.shape[1]

    outs = []
    for rows in _chunks(n, k * dim * 4):
        nbr = neighbors[rows]
        m = nbr.shape[0]
        rel = pts[rows].reshape(m, 1, 3) - ad.gather(pts, nbr)
        delta = mlp2(model, prefix + ".eta", rel)
        logits = mlp2(model, prefix + ".gamma", q[rows].reshape(m, 1, dim) - ad.gather(key, nbr) + delta)
        attn = ad.softmax(logits, axis=1)
        outs.append(ad.sum(attn * (ad.gather(v, nbr) + delta), axis=1))
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)


class BackboneOutput(NamedTuple):
    features: ad.Tensor
    neighbors: np.ndarray
    k: int
    k_reduced: bool


def extract_features(points, model):
    """Per-point features: coordinate embedding MLP then one PTL."""
    pts = _const(points, model)
    n = pts.shape[0]
    k = model.config.k_backbone
    reduced = n < k
    if reduced:
        warnings.warn(f"only {n} points; backbone neighbourhood reduced from {k} to {n}")
        k = n
    nbr = knn_indices(pts.data, pts.data, k)
    emb = mlp2(model, "backbone.embed", pts)
    feats = ptl_forward(pts, emb, model, k, "backbone.ptl", nbr)
    return BackboneOutput(feats, nbr, k, reduced)


class SmogOutput(NamedTuple):
    means: ad.Tensor
    var_theta: ad.Tensor
    var_phi: ad.Tensor
    cov: ad.Tensor
    feature_index: np.ndarray

    def params(self):
        """Detached mixture parameters with equal weights."""
        m = self.means.data.astype(np.float64)
        m = m / np.linalg.norm(m, axis=1, keepdims=True)
        a = self.var_theta.data.astype(np.float64)
        b = self.cov.data.astype(np.float64)
        c = self.var_phi.data.astype(np.float64)
        cov = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
        return SmogParams.uniform(m, cov)


def covariance_from_raw(raw, mode="clamped"):
    """Tensor version of the two PSD constructions; ``raw`` is ``(K, 3)``.

    Returns ``(var_theta, var_phi, cov)`` tensors of shape ``(K,)``.
    """
    if mode == "clamped":
        a = ad.softplus(raw[:, 0]) + 1e-6
        c = ad.softplus(raw[:, 1]) + 1e-6
        bound = ad.sqrt(a * c)
        b = ad.clamp(raw[:, 2], -1.0 * bound, bound)
        return a, c, b
    angle = raw[:, 0]
    d1 = ad.softplus(raw[:, 1]) + 1e-6
    d2 = ad.softplus(raw[:, 2]) + 1e-6
    co, si = ad.cos(angle), ad.sin(angle)
    a = co * co * d1 + si * si * d2
    c = si * si * d1 + co * co * d2
    b = co * si * (d1 - d2)
    return a, c, b


def component_indices(points, model):
    """Which input points spawn mixture components (all of them by default)."""
    pts = np.asarray(_const(points, model).data, dtype=np.float64)
    n = len(pts)
    frac = model.config.component_fraction
    if frac >= 1:
        return np.arange(n)
    k = max(1, int(math.floor(frac * n + 0.5)))
    return np.asarray(farthest_point_sample(pts, k), dtype=np.intp)


def smog_head(features, model, feature_index=None):
    """Mixture parameters from per-point features: unit means, PSD covariances."""
    f = features
    if feature_index is not None and len(feature_index) != f.shape[0]:
        f = ad.gather(features, feature_index)
    else:
        feature_index = np.arange(f.shape[0])
    h = ad.relu(linear(model, "smog.1", ad.relu(linear(model, "smog.0", f))))
    raw_mean = linear(model, "smog.mean", h)
    sq = ad.sum(raw_mean * raw_mean, axis=1).reshape(-1, 1)
    if np.any(sq.data < 1e-10):
        raise ValueError("degenerate mean: mean head produced a zero vector")
    means = raw_mean / (ad.sqrt(sq) + 1e-8)
    a, c, b = covariance_from_raw(linear(model, "smog.cov", h), model.config.covariance)
    return SmogOutput(means, a, c, b, np.asarray(feature_index))


def fourier_features(points, num_freqs=8):
    """``(M, 6L)`` sin/cos features at dyadic frequencies ``2^l * pi``.

    Column layout: all sines then all cosines, each ordered by coordinate
    then frequency.
    """
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    pts = points if isinstance(points, ad.Tensor) else ad.tensor(points)
    freqs = np.pi * 2.0 ** np.arange(num_freqs)
    basis = np.zeros((3, 3 * num_freqs))
    for c in range(3):
        basis[c, c * num_freqs:(c + 1) * num_freqs] = freqs
    arg = pts @ ad.Tensor(basis.astype(pts.dtype), dtype=pts.dtype)
    return ad.concat([ad.sin(arg), ad.cos(arg)], axis=1)


def fourier_encode(points, model):
    """Decoder queries: Fourier features projected to the model width."""
    return linear(model, "query", fourier_features(_const(points, model), model.config.num_freqs))


def attention(model, name, x_q, x_kv):
    """Multi-head scaled dot-product attention."""
    heads = model.config.heads
    dim = x_q.shape[1]
    if x_kv.shape[1] != dim:
        raise ValueError(f"attention width mismatch: {dim} vs {x_kv.shape[1]}")
    dh = dim // heads
    n = x_kv.shape[0]
    k = linear(model, name + ".k", x_kv).reshape(n, heads, dh).transpose(1, 2, 0)
    v = linear(model, name + ".v", x_kv).reshape(n, heads, dh).transpose(1, 0, 2)
    q_all = linear(model, name + ".q", x_q)
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for rows in _chunks(x_q.shape[0], heads * n * 3):
        q = q_all[rows]
        m = q.shape[0]
        q = q.reshape(m, heads, dh).transpose(1, 0, 2)
        a = ad.softmax((q @ k) * scale, axis=-1)
        outs.append((a @ v).transpose(1, 0, 2).reshape(m, dim))
    o = outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)
    return linear(model, name + ".o", o)


def _check_width(x, model, what):
    if x.ndim != 2 or x.shape[1] != model.config.dim:
        raise ValueError(f"{what}: expected width {model.config.dim}, got shape {x.shape}")


def encoder_forward(features, model):
    _check_width(features, model, "encoder input")
    x = features
    for i in range(model.config.enc_layers):
        p = f"encoder.{i}"
        h = norm(model, p + ".ln1", x)
        x = x + attention(model, p + ".attn", h, h)
        x = x + mlp2(model, p + ".mlp", norm(model, p + ".ln2", x))
    return norm(model, "encoder.ln", x)


def decoder_forward(memory, queries, model):
    """Self-attention over the queries, cross-attention to memory, MLP; pre-norm."""
    _check_width(memory, model, "decoder memory")
    _check_width(queries, model, "decoder queries")
    x = queries
    for i in range(model.config.dec_layers):
        p = f"decoder.{i}"
        h = norm(model, p + ".ln1", x)
        x = x + attention(model, p + ".self", h, h)
        x = x + attention(model, p + ".cross", norm(model, p + ".ln2", x), memory)
        x = x + mlp2(model, p + ".mlp", norm(model, p + ".ln3", x))
    return norm(model, "decoder.ln", x)


def coord_head(decoded, model):
    return mlp2(model, "coord", decoded)


def refine_neighbors(r):
    return max(4, int(math.floor(4 * r + 0.5)))


class RefineOutput(NamedTuple):
    points: ad.Tensor
    k: int
    k_reduced: bool


def refine(coarse, features, components, model, r):
    """Residual refinement of coarse points.

    Each coarse point carries the backbone feature of the mixture component
    that generated it; one Point Transformer block over the coarse
    neighbourhood plus an MLP predicts a 3D offset.
    """
    coarse = _const(coarse, model)
    m = coarse.shape[0]
    k = refine_neighbors(r)
    reduced = m < k
    if reduced:
        warnings.warn(f"only {m} coarse points; refinement neighbourhood reduced from {k} to {m}")
        k = m
    f = ad.gather(features, np.asarray(components, dtype=np.intp))
    h = ptl_forward(coarse, linear(model, "refine.in", f), model, k, "refine.ptl")
    y = f + linear(model, "refine.out", ad.relu(h))
    residual = mlp2(model, "refine.res", y)
    return RefineOutput(coarse + residual, k, reduced)


def round_count(r, n):
    """Output size for ratio ``r`` on ``n`` points (round half up)."""
    return int(math.floor(r * n + 0.5))


class UpsampleResult(NamedTuple):
    points: np.ndarray
    coarse: np.ndarray
    samples: np.ndarray
    components: np.ndarray
    smog: SmogParams


def draw_queries(smog_out, m, model, seed):
    """Sphere samples and their generating component rows."""
    params = smog_out.params()
    if model.config.sampling == "uniform":
        samples = sample_uniform_sphere(m, seed)
        # nearest mean by angle owns the sample
        comp = np.argmax(samples @ params.means.T, axis=1)
        return samples, comp, params
    samples, comp = sample_smog(params, m, seed)
    return samples, comp, params


def upsample(points, r, model, seed=0, return_all=False):
    """Upsample a cloud by real ratio ``r`` to exactly ``round(r * N)`` points."""
    pts = as_points(points)
    if len(pts) == 0:
        raise ValueError("empty input cloud")
    if not r > 0:
        raise ValueError("ratio must be positive")
    m = round_count(r, len(pts))
    if m == 0:
        raise ValueError(f"ratio {r} on {len(pts)} points gives an empty output")
    normed, tf = normalize(pts)
    with ad.no_grad(), ad.use_dtype(model.dtype):
        bb = extract_features(normed, model)
        memory = encoder_forward(bb.features, model)
        smog_out = smog_head(bb.features, model, component_indices(normed, model))
        samples, comp, params = draw_queries(smog_out, m, model, seed)
        decoded = decoder_forward(memory, fourier_encode(samples, model), model)
        coarse = coord_head(decoded, model)
        rows = smog_out.feature_index[comp]
        if model.config.refinement:
            refined = refine(coarse, bb.features, rows, model, r).points
        else:
            refined = coarse
    out = tf.invert(refined.data.astype(np.float64))
    if not return_all:
        return out
    return UpsampleResult(out, tf.invert(coarse.data.astype(np.float64)), samples, comp, params)
