"""Ordinal-probit unary potentials.

A latent score beta.f + noise is cut by strictly increasing thresholds
psi_1 < ... < psi_{L-1} into L discrete levels; the probability of level l
is Phi(z_l) - Phi(z_{l-1}) with z_k = (psi_k - beta.f) / sigma and Phi the
standard normal cdf.

Parameters are stored unconstrained so plain SGD preserves the invariants:
psi_1 = raw_thresholds[0], psi_{k+1} = psi_k + exp(raw_thresholds[k]), and
sigma = exp(raw_log_sigma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

PROB_FLOOR = 1e-12

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _norm_pdf(z):
    return np.exp(-0.5 * z * z) / _SQRT_2PI


@dataclass
class OrdinalUnaryParams:
    """Threshold-model parameters for one output, in raw (unconstrained) form."""

    raw_thresholds: np.ndarray  # (L-1,)
    beta: np.ndarray            # (feature_dim,)
    raw_log_sigma: float = 0.0

    def __post_init__(self):
        self.raw_thresholds = np.asarray(self.raw_thresholds, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.raw_log_sigma = float(self.raw_log_sigma)

    @property
    def levels(self) -> int:
        return len(self.raw_thresholds) + 1

    @property
    def feature_dim(self) -> int:
        return len(self.beta)

    @property
    def thresholds(self) -> np.ndarray:
        """psi_1..psi_{L-1}, strictly increasing by construction."""
        raw = self.raw_thresholds
        if not len(raw):
            return raw.copy()
        psi = np.empty_like(raw)
        psi[0] = raw[0]
        psi[1:] = raw[0] + np.cumsum(np.exp(raw[1:]))
        return psi

    @property
    def sigma(self) -> float:
        return float(np.exp(self.raw_log_sigma))

    @classmethod
    def from_thresholds(cls, thresholds, beta, sigma=1.0) -> "OrdinalUnaryParams":
        """Build raw parameters from natural (psi, beta, sigma) values."""
        psi = np.asarray(thresholds, dtype=float)
        if len(psi) and np.any(np.diff(psi) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        raw = np.empty_like(psi)
        if len(psi):
            raw[0] = psi[0]
            raw[1:] = np.log(np.diff(psi))
        return cls(raw, np.asarray(beta, dtype=float), np.log(sigma))

    @classmethod
    def default_init(cls, levels: int, feature_dim: int, rng=None) -> "OrdinalUnaryParams":
        """Equal-mass thresholds under N(0,1), small random beta, sigma 1."""
        from scipy.special import ndtri

        psi = ndtri(np.arange(1, levels) / levels)
        if rng is None:
            beta = np.zeros(feature_dim)
        else:
            beta = rng.normal(scale=0.01, size=feature_dim)
        return cls.from_thresholds(psi, beta, 1.0)

    # flat raw-parameter vector: [raw_thresholds, beta, raw_log_sigma]
    @property
    def n_raw(self) -> int:
        return len(self.raw_thresholds) + len(self.beta) + 1

    def pack(self) -> np.ndarray:
        return np.concatenate([self.raw_thresholds, self.beta, [self.raw_log_sigma]])

    def unpack(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_raw,):
            raise ValueError(f"expected {self.n_raw} raw parameters, got {flat.shape}")
        k = len(self.raw_thresholds)
        self.raw_thresholds = flat[:k].copy()
        self.beta = flat[k:-1].copy()
        self.raw_log_sigma = float(flat[-1])

    def natural_vector(self) -> np.ndarray:
        """[psi, beta, sigma] — the vector the l2 regularizer acts on."""
        return np.concatenate([self.thresholds, self.beta, [self.sigma]])


def z_scores(f, phi: OrdinalUnaryParams) -> np.ndarray:
    """Standardized cut points, length L+1 with -inf/+inf sentinels."""
    f = np.asarray(f, dtype=float)
    if f.shape != (phi.feature_dim,):
        raise ValueError(f"feature vector shape {f.shape} != ({phi.feature_dim},)")
    eta = float(phi.beta @ f)
    z = np.empty(phi.levels + 1)
    z[0] = -np.inf
    z[-1] = np.inf
    z[1:-1] = (phi.thresholds - eta) / phi.sigma
    return z


def level_probs(f, phi: OrdinalUnaryParams) -> np.ndarray:
    """Pr(y = l) for l = 1..L; entries >= 0, summing to 1."""
    z = z_scores(f, phi)
    cdf = np.empty_like(z)
    cdf[0] = 0.0
    cdf[-1] = 1.0
    cdf[1:-1] = ndtr(z[1:-1])
    return np.maximum(np.diff(cdf), 0.0)


def unary_log_prob(f, phi: OrdinalUnaryParams, level: int) -> float:
    """log Pr(y = level), clamped below at log(PROB_FLOOR)."""
    _check_level(level, phi.levels)
    p = level_probs(f, phi)[level - 1]
    return float(np.log(max(p, PROB_FLOOR)))


def _check_level(level: int, levels: int) -> None:
    if not 1 <= level <= levels:
        raise ValueError(f"level {level} outside [1, {levels}]")


def _thresh_weight_to_raw_grad(phi: OrdinalUnaryParams, t_w: np.ndarray) -> np.ndarray:
    """Chain d/dpsi_k weights (indexed 0..L, sentinels ignored) into raw thresholds.

    psi_k depends on raw[0] with unit slope and on raw[j] (j>=1, j<k) with
    slope exp(raw[j]), so the raw gradient is a suffix sum of the psi weights.
    """
    n = len(phi.raw_thresholds)
    grad = np.zeros(n)
    if n == 0:
        return grad
    suffix = np.cumsum(t_w[1:n + 1][::-1])[::-1]  # suffix[j] = sum_{k>=j+1} t_w[k]
    grad[0] = suffix[0]
    if n > 1:
        grad[1:] = np.exp(phi.raw_thresholds[1:]) * suffix[1:]
    return grad


def unary_gradients(f, phi: OrdinalUnaryParams, level: int):
    """Gradients of unary_log_prob w.r.t. raw parameters and f.

    Returns (grad_raw, grad_f) with grad_raw laid out as pack(). Clamped
    probabilities (below PROB_FLOOR) yield zero gradients, matching the
    constant clamped log value.
    """
    _check_level(level, phi.levels)
    f = np.asarray(f, dtype=float)
    nll, graw, gF = _nll_grads_batch(
        f[None, :], np.array([level]), phi, want_f_grad=True)
    return -graw, -gF[0]


# ---------------------------------------------------------------------------
# batched internals, shared with the graph objective

def _z_batch(F: np.ndarray, phi: OrdinalUnaryParams) -> np.ndarray:
    """(N, L+1) z-scores with sentinel columns."""
    eta = F @ phi.beta
    z = np.empty((len(F), phi.levels + 1))
    z[:, 0] = -np.inf
    z[:, -1] = np.inf
    z[:, 1:-1] = (phi.thresholds[None, :] - eta[:, None]) / phi.sigma
    return z


def _cdf_batch(z: np.ndarray) -> np.ndarray:
    cdf = np.empty_like(z)
    cdf[:, 0] = 0.0
    cdf[:, -1] = 1.0
    cdf[:, 1:-1] = ndtr(z[:, 1:-1])
    return cdf


def _probs_batch(F: np.ndarray, phi: OrdinalUnaryParams) -> np.ndarray:
    return np.maximum(np.diff(_cdf_batch(_z_batch(F, phi)), axis=1), 0.0)


def _chain_z_weights(phi: OrdinalUnaryParams, F: np.ndarray, z: np.ndarray,
                     cut_indices, cut_weights, want_f_grad: bool = False):
    """Chain d(loss)/dz weights at selected cut points into raw params and F.

    cut_indices/cut_weights are parallel lists of (N,) arrays; weight
    cut_weights[j][i] applies to z[i, cut_indices[j][i]]. Weights at sentinel
    cuts (index 0 or L) must already be zero. z_k = (psi_k - beta.f)/sigma, so
    dz_k/dpsi_k = 1/sigma, dz_k/d(beta.f) = -1/sigma, dz_k/d(raw_log_sigma)
    = -z_k.
    """
    idx = np.arange(len(F))
    t_w = np.zeros(phi.levels + 1)
    w_eta = np.zeros(len(F))
    g_lsig = 0.0
    for k, w in zip(cut_indices, cut_weights):
        np.add.at(t_w, k, w / phi.sigma)
        w_eta -= w / phi.sigma
        zk = z[idx, k]
        zk = np.where(np.isfinite(zk), zk, 0.0)
        g_lsig -= float(np.sum(w * zk))
    grad_thr = _thresh_weight_to_raw_grad(phi, t_w)
    grad_beta = w_eta @ F
    grad_raw = np.concatenate([grad_thr, grad_beta, [g_lsig]])
    grad_F = w_eta[:, None] * phi.beta[None, :] if want_f_grad else None
    return grad_raw, grad_F


def _nll_grads_batch(F: np.ndarray, labels: np.ndarray, phi: OrdinalUnaryParams,
                     want_f_grad: bool = False):
    """Summed -log Pr(y_i) over the batch plus gradients.

    labels are 1-based. Returns (nll, grad_raw, grad_F) where grad_F is
    (N, d) or None.
    """
    N = len(F)
    z = _z_batch(F, phi)
    cdf = _cdf_batch(z)
    idx = np.arange(N)
    hi = labels          # threshold index l
    lo = labels - 1      # threshold index l-1
    p = cdf[idx, hi] - cdf[idx, lo]
    clamped = p < PROB_FLOOR
    nll = -float(np.sum(np.log(np.maximum(p, PROB_FLOOR))))

    p_safe = np.maximum(p, PROB_FLOOR)
    inv = np.where(clamped, 0.0, 1.0 / p_safe)

    # d(-logP)/dz at the two cut points; sentinel cuts carry zero density
    def cut_pdf(k):
        zk = z[idx, k]
        finite = np.isfinite(zk)
        return np.where(finite, _norm_pdf(np.where(finite, zk, 0.0)), 0.0)

    w_hi = -inv * cut_pdf(hi)
    w_lo = inv * cut_pdf(lo)
    grad_raw, grad_F = _chain_z_weights(phi, F, z, [hi, lo], [w_hi, w_lo],
                                        want_f_grad)
    return nll, grad_raw, grad_F
