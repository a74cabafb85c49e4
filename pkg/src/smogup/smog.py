"""Spherical mixture of Gaussians.

Component means live on the unit sphere (Cartesian), covariances are 2x2
matrices over (azimuth theta, elevation phi) offsets from the mean's
spherical coordinates. Sampling perturbs the mean angles with a Gaussian
offset and folds the result back into the canonical ranges.

Convention: ``v = (sin phi cos theta, sin phi sin theta, cos phi)`` with
``theta in [0, 2 pi)`` and ``phi in [0, pi]``.
"""

import csv
from dataclasses import dataclass

import numpy as np

VAR_FLOOR = 1e-6
CHOL_JITTER = 1e-9
POLE_EPS = 1e-12
TWO_PI = 2 * np.pi


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    """Raw value whose softplus is ``y`` (``y > 0``)."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def build_covariance_clamped(raw_var_theta, raw_var_phi, raw_cov):
    """Covariance from raw outputs, with the off-diagonal clamped to
    ``[-s_theta s_phi, s_theta s_phi]``. Vectorized: returns ``(..., 2, 2)``."""
    a = softplus(np.asarray(raw_var_theta, dtype=np.float64)) + VAR_FLOOR
    c = softplus(np.asarray(raw_var_phi, dtype=np.float64)) + VAR_FLOOR
    bound = np.sqrt(a * c)
    b = np.clip(raw_cov, -bound, bound)
    return _assemble(a, b, c)


def build_covariance_rotdiag(angle, raw_d1, raw_d2):
    """Covariance ``R(angle) diag(d1, d2) R(angle)^T`` with softplus variances."""
    d1 = softplus(np.asarray(raw_d1, dtype=np.float64)) + VAR_FLOOR
    d2 = softplus(np.asarray(raw_d2, dtype=np.float64)) + VAR_FLOOR
    c, s = np.cos(angle), np.sin(angle)
    return _assemble(c * c * d1 + s * s * d2, c * s * (d1 - d2), s * s * d1 + c * c * d2)


def _assemble(a, b, c):
    a, b, c = np.broadcast_arrays(a, b, c)
    out = np.empty(a.shape + (2, 2))
    out[..., 0, 0] = a
    out[..., 0, 1] = b
    out[..., 1, 0] = b
    out[..., 1, 1] = c
    return out


def eigenvalues_2x2(m):
    """Closed-form eigenvalues ``(larger, smaller)`` of symmetric 2x2 matrices."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (2, 2):
        raise ValueError(f"expected (..., 2, 2) matrices, got {m.shape}")
    if np.any(np.abs(m[..., 0, 1] - m[..., 1, 0]) >= 1e-9):
        raise ValueError("matrix is not symmetric")
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 1, 1]
    tr = a + c
    # (a+c)^2 - 4(ac - b^2) rewritten as (a-c)^2 + 4b^2 to stay non-negative
    root = np.sqrt((a - c) ** 2 + 4 * b * b)
    return (tr + root) / 2, (tr - root) / 2


def cart_to_sph(v):
    """Unit vectors to ``(theta, phi)``; theta is 0 at the poles."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1) > 1e-6):
        raise ValueError("cart_to_sph expects unit vectors")
    z = np.clip(v[..., 2], -1.0, 1.0)
    phi = np.arccos(z)
    theta = np.mod(np.arctan2(v[..., 1], v[..., 0]), TWO_PI)
    theta = np.where(np.abs(z) > 1 - POLE_EPS, 0.0, theta)
    # mod can round up to exactly 2 pi for tiny negative angles
    theta = np.where(theta >= TWO_PI, 0.0, theta)
    return theta, phi


def sph_to_cart(theta, phi):
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    sp = np.sin(phi)
    return np.stack([sp * np.cos(theta), sp * np.sin(theta), np.cos(phi)], axis=-1)


def canonicalize(theta, phi):
    """Fold arbitrary angles into ``theta in [0, 2pi)``, ``phi in [0, pi]``.

    Elevations past a pole are reflected back and the azimuth is rotated
    by pi, which keeps the Cartesian point unchanged.
    """
    phi = np.mod(phi, TWO_PI)
    over = phi > np.pi
    phi = np.where(over, TWO_PI - phi, phi)
    theta = np.mod(np.where(over, theta + np.pi, theta), TWO_PI)
    theta = np.where(theta >= TWO_PI, 0.0, theta)
    return theta, phi


@dataclass
class SmogParams:
    """Mixture parameters: ``means (K, 3)``, ``covariances (K, 2, 2)``, ``weights (K,)``."""

    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray

    @classmethod
    def uniform(cls, means, covariances):
        k = len(means)
        return cls(np.asarray(means, dtype=np.float64),
                   np.asarray(covariances, dtype=np.float64), np.full(k, 1.0 / k))

    @property
    def count(self):
        return len(self.means)

    def validate(self):
        means = np.asarray(self.means)
        cov = np.asarray(self.covariances)
        w = np.asarray(self.weights)
        if means.ndim != 2 or means.shape[1] != 3 or cov.shape != (len(means), 2, 2) or w.shape != (len(means),):
            raise ValueError("inconsistent SMOG parameter shapes")
        if len(means) == 0:
            raise ValueError("SMOG needs at least one component")
        if np.any(np.abs(np.linalg.norm(means, axis=1) - 1) > 1e-6):
            raise ValueError("SMOG means must be unit vectors")
        lo = eigenvalues_2x2(cov)[1]
        if np.any(lo < -1e-9):
            raise ValueError(f"covariance not PSD (min eigenvalue {lo.min():.3g})")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        return self


def _cholesky_2x2(cov):
    a = cov[:, 0, 0] + CHOL_JITTER
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + CHOL_JITTER
    l11 = np.sqrt(a)
    l21 = b / l11
    l22 = np.sqrt(np.maximum(c - l21 * l21, 0.0))
    return l11, l21, l22


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_smog(params, m, seed=0):
    """Draw ``m`` points on the unit sphere from the mixture.

    Returns ``(samples (m, 3), component indices (m,))``. Components are
    drawn from the categorical over the weights, then each offset
    ``(d_theta, d_phi) ~ N(0, Sigma_i)`` is added to the mean's angles.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    params.validate()
    rng = _rng(seed)
    cdf = np.cumsum(params.weights)
    comp = np.searchsorted(cdf, rng.random(m) * cdf[-1], side="right")
    comp = np.minimum(comp, params.count - 1)
    z = rng.standard_normal((m, 2))
    l11, l21, l22 = _cholesky_2x2(np.asarray(params.covariances, dtype=np.float64))
    d_theta = l11[comp] * z[:, 0]
    d_phi = l21[comp] * z[:, 0] + l22[comp] * z[:, 1]
    theta0, phi0 = cart_to_sph(params.means)
    theta, phi = canonicalize(theta0[comp] + d_theta, phi0[comp] + d_phi)
    return sph_to_cart(theta, phi), comp


def sample_uniform_sphere(m, seed=0):
    """Uniform directions on the sphere (the mixture-free ablation)."""
    rng = _rng(seed)
    v = rng.standard_normal((m, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def angular_offsets(params, z):
    """Shortest ``(d_theta, d_phi)`` from every mean to every point: ``(P, K)`` each."""
    theta_z, phi_z = cart_to_sph(np.atleast_2d(z))
    theta_m, phi_m = cart_to_sph(params.means)
    d_theta = np.mod(theta_z[:, None] - theta_m[None, :] + np.pi, TWO_PI) - np.pi
    d_phi = phi_z[:, None] - phi_m[None, :]
    return d_theta, d_phi


def likelihood(params, z):
    """Mixture density at unit vector(s) ``z`` in (theta, phi) offset space."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    d_theta, d_phi = angular_offsets(params, z)
    cov = np.array(params.covariances, dtype=np.float64)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    singular = det < 1e-18
    cov[singular, 0, 0] += CHOL_JITTER
    cov[singular, 1, 1] += CHOL_JITTER
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    # quadratic form with the closed-form 2x2 inverse
    q = (c * d_theta ** 2 - 2 * b * d_theta * d_phi + a * d_phi ** 2) / det
    dens = np.exp(-0.5 * q) / (TWO_PI * np.sqrt(det))
    out = dens @ np.asarray(params.weights, dtype=np.float64)
    return float(out[0]) if single else out


SMOG_CSV_HEADER = ["i", "mu_x", "mu_y", "mu_z", "var_theta", "var_phi", "cov", "weight"]


def write_params_csv(fh, params):
    """Debug dump of the mixture, one component per row."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SMOG_CSV_HEADER)
    for i, (mu, cov, wt) in enumerate(zip(params.means, params.covariances, params.weights)):
        w.writerow([i, *(f"{v:.9g}" for v in mu), f"{cov[0, 0]:.9g}", f"{cov[1, 1]:.9g}",
                    f"{cov[0, 1]:.9g}", f"{wt:.9g}"])


def read_params_csv(fh):
    rows = list(csv.DictReader(fh))
    means = np.array([[float(r["mu_x"]), float(r["mu_y"]), float(r["mu_z"])] for r in rows])
    cov = _assemble(np.array([float(r["var_theta"]) for r in rows]),
                    np.array([float(r["cov"]) for r in rows]),
                    np.array([float(r["var_phi"]) for r in rows]))
    return SmogParams(means, cov, np.array([float(r["weight"]) for r in rows]))
