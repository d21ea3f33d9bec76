"""Frank-copula pairwise potentials.

The copula C_theta(u, v) = -(1/theta) * log(1 + expm1(-theta*u)*expm1(-theta*v)
/ expm1(-theta)) couples two ordinal marginals into a discrete joint table via
rectangle inclusion-exclusion on the marginal cdf cut points. theta > 0 gives
positive dependence, theta < 0 negative; |theta| below THETA_INDEP_EPS is
treated as exact independence (the theta -> 0 limit), removing the removable
singularity at theta = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ordinal import (
    PROB_FLOOR,
    OrdinalUnaryParams,
    _cdf_batch,
    _chain_z_weights,
    _check_level,
    _norm_pdf,
    _nll_grads_batch,
    _z_batch,
    z_scores,
)

THETA_INDEP_EPS = 1e-6
THETA_MAX_DEFAULT = 35.0

# one-sided step for the theta derivative inside the independence branch;
# large enough that theta + step always lands on the analytic path
_THETA_FD_STEP = 2e-6


@dataclass
class CopulaEdgeParams:
    """Frank dependence parameter for one output pair in one dataset context."""

    theta: float
    edge: tuple[str, str]
    context: str = "default"

    def __post_init__(self):
        self.theta = float(self.theta)
        if not np.isfinite(self.theta):
            raise ValueError("theta must be finite")
        if self.edge[0] == self.edge[1]:
            raise ValueError(f"edge endpoints must differ, got {self.edge}")

    @property
    def independent(self) -> bool:
        return abs(self.theta) < THETA_INDEP_EPS


def _frank_interior(u, v, theta):
    """C_theta on interior points (0 < u, v < 1), |theta| >= THETA_INDEP_EPS."""
    a = np.expm1(-theta * u)
    b = np.expm1(-theta * v)
    d = np.expm1(-theta)
    x = a * b / d
    c = -np.log1p(x) / theta
    if theta > 0:
        # 1 + x cancels catastrophically under strong positive dependence;
        # the four-exponential numerator is cancellation-free there
        deep = x < -0.5
        if np.any(deep):
            ud = u[deep]
            vd = v[deep]
            n = (np.exp(-theta) + np.exp(-theta * (ud + vd))
                 - np.exp(-theta * ud) - np.exp(-theta * vd))
            c[deep] = -(np.log(-n) - np.log(-d)) / theta
    return c


def frank_cdf(u, v, theta: float):
    """Frank copula cdf; boundary values are returned exactly."""
    theta = float(theta)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    scalar = u.ndim == 0 and v.ndim == 0
    u, v = np.broadcast_arrays(u, v)
    if abs(theta) < THETA_INDEP_EPS:
        out = u * v
        return float(out) if scalar else out

    out = np.empty(u.shape)
    zero = (u == 0.0) | (v == 0.0)
    u_one = (u == 1.0) & ~zero
    v_one = (v == 1.0) & ~zero & ~u_one
    interior = ~(zero | u_one | v_one)
    out[zero] = 0.0
    out[u_one] = v[u_one]
    out[v_one] = u[v_one]
    if np.any(interior):
        out[interior] = _frank_interior(u[interior], v[interior], theta)
    return float(out) if scalar else out


def _frank_cdf_grads(u, v, theta: float):
    """(C, dC/du, dC/dv, dC/dtheta) elementwise; |theta| >= THETA_INDEP_EPS.

    On the boundary only the partials that can carry gradient downstream are
    populated: d/du at v == 1 and d/dv at u == 1 equal one, everything else
    on the boundary is zero (sentinel coordinates receive no gradient).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    u, v = np.broadcast_arrays(u, v)
    C = np.zeros(u.shape)
    Cu = np.zeros(u.shape)
    Cv = np.zeros(u.shape)
    Ct = np.zeros(u.shape)

    zero = (u == 0.0) | (v == 0.0)
    u_one = (u == 1.0) & ~zero
    v_one = (v == 1.0) & ~zero & ~u_one
    interior = ~(zero | u_one | v_one)

    C[u_one] = v[u_one]
    Cv[u_one] = 1.0
    C[v_one] = u[v_one]
    Cu[v_one] = 1.0

    if np.any(interior):
        ui = u[interior]
        vi = v[interior]
        a = np.expm1(-theta * ui)
        b = np.expm1(-theta * vi)
        d = np.expm1(-theta)
        x = a * b / d
        g = 1.0 + x
        ci = -np.log1p(x) / theta
        if theta > 0:
            deep = x < -0.5
            if np.any(deep):
                ud = ui[deep]
                vd = vi[deep]
                n = (np.exp(-theta) + np.exp(-theta * (ud + vd))
                     - np.exp(-theta * ud) - np.exp(-theta * vd))
                g[deep] = n / d
                ci[deep] = -(np.log(-n) - np.log(-d)) / theta
        denom = d * g
        C[interior] = ci
        Cu[interior] = (a + 1.0) * b / denom
        Cv[interior] = (b + 1.0) * a / denom
        dg_dtheta = (-(d + 1.0) * (1.0 - g) - ui * (a + 1.0) * b
                     - vi * a * (b + 1.0)) / d
        Ct[interior] = -ci / theta - dg_dtheta / (theta * g)
    return C, Cu, Cv, Ct


def _marginal_cut_cdfs(f, phi: OrdinalUnaryParams) -> np.ndarray:
    """u_k = Phi(z_k) for k = 0..L with exact 0/1 sentinels."""
    return _cdf_batch(_z_batch(np.asarray(f, dtype=float)[None, :], phi))[0]


def pairwise_joint_table(f, phi_r: OrdinalUnaryParams, phi_s: OrdinalUnaryParams,
                         e: CopulaEdgeParams) -> np.ndarray:
    """Joint Pr(y_r = a, y_s = b) as an (L_r, L_s) table.

    Rectangle inclusion-exclusion over the copula cdf at the marginal cut
    points; rows/columns sum to the respective marginal level probabilities.
    """
    u = _marginal_cut_cdfs(f, phi_r)
    v = _marginal_cut_cdfs(f, phi_s)
    if e.independent:
        return np.outer(np.diff(u), np.diff(v))
    grid = frank_cdf(u[:, None], v[None, :], e.theta)
    cells = grid[1:, 1:] + grid[:-1, :-1] - grid[:-1, 1:] - grid[1:, :-1]
    return np.maximum(cells, 0.0)


def pairwise_log_prob(f, phi_r, phi_s, e: CopulaEdgeParams,
                      l_r: int, l_s: int) -> float:
    """log Pr(y_r = l_r, y_s = l_s), clamped below at log(PROB_FLOOR)."""
    _check_level(l_r, phi_r.levels)
    _check_level(l_s, phi_s.levels)
    cell = pairwise_joint_table(f, phi_r, phi_s, e)[l_r - 1, l_s - 1]
    return float(np.log(max(cell, PROB_FLOOR)))


def copula_gradients(f, phi_r, phi_s, e: CopulaEdgeParams, l_r: int, l_s: int):
    """Gradients of pairwise_log_prob w.r.t. (theta, raw phi_r, raw phi_s, f)."""
    _check_level(l_r, phi_r.levels)
    _check_level(l_s, phi_s.levels)
    f = np.asarray(f, dtype=float)
    nll, g_theta, graw_r, graw_s, gF = _edge_nll_grads_batch(
        f[None, :], np.array([l_r]), np.array([l_s]), phi_r, phi_s, e.theta,
        want_f_grad=True)
    return -g_theta, -graw_r, -graw_s, -gF[0]


# ---------------------------------------------------------------------------
# batched internals, shared with the graph objective

def _edge_nll_batch(F, labels_r, labels_s, phi_r, phi_s, theta: float) -> float:
    """Summed pairwise -log Pr over the batch (no gradients)."""
    idx = np.arange(len(F))
    u = _cdf_batch(_z_batch(F, phi_r))
    v = _cdf_batch(_z_batch(F, phi_s))
    a1 = u[idx, labels_r]
    a0 = u[idx, labels_r - 1]
    b1 = v[idx, labels_s]
    b0 = v[idx, labels_s - 1]
    if abs(theta) < THETA_INDEP_EPS:
        p = (a1 - a0) * (b1 - b0)
    else:
        p = (frank_cdf(a1, b1, theta) + frank_cdf(a0, b0, theta)
             - frank_cdf(a0, b1, theta) - frank_cdf(a1, b0, theta))
    return -float(np.sum(np.log(np.maximum(p, PROB_FLOOR))))


def _edge_nll_grads_batch(F, labels_r, labels_s, phi_r, phi_s, theta: float,
                          want_f_grad: bool = False):
    """Summed pairwise NLL and gradients w.r.t. (theta, raw_r, raw_s, F)."""
    if abs(theta) < THETA_INDEP_EPS:
        nll_r, graw_r, gF_r = _nll_grads_batch(F, labels_r, phi_r, want_f_grad)
        nll_s, graw_s, gF_s = _nll_grads_batch(F, labels_s, phi_s, want_f_grad)
        nll = nll_r + nll_s
        nll_step = _edge_nll_batch(F, labels_r, labels_s, phi_r, phi_s,
                                   theta + _THETA_FD_STEP)
        g_theta = (nll_step - nll) / _THETA_FD_STEP
        gF = gF_r + gF_s if want_f_grad else None
        return nll, g_theta, graw_r, graw_s, gF

    N = len(F)
    idx = np.arange(N)
    z_r = _z_batch(F, phi_r)
    z_s = _z_batch(F, phi_s)
    u = _cdf_batch(z_r)
    v = _cdf_batch(z_s)
    a1 = u[idx, labels_r]
    a0 = u[idx, labels_r - 1]
    b1 = v[idx, labels_s]
    b0 = v[idx, labels_s - 1]

    C11, Cu11, Cv11, Ct11 = _frank_cdf_grads(a1, b1, theta)
    C01, Cu01, Cv01, Ct01 = _frank_cdf_grads(a0, b1, theta)
    C10, Cu10, Cv10, Ct10 = _frank_cdf_grads(a1, b0, theta)
    C00, Cu00, Cv00, Ct00 = _frank_cdf_grads(a0, b0, theta)

    p = C11 - C01 - C10 + C00
    clamped = p < PROB_FLOOR
    p_safe = np.maximum(p, PROB_FLOOR)
    nll = -float(np.sum(np.log(p_safe)))
    inv = np.where(clamped, 0.0, 1.0 / p_safe)

    g_theta = -float(np.sum(inv * (Ct11 - Ct01 - Ct10 + Ct00)))

    def cut_pdf(z, k):
        zk = z[idx, k]
        finite = np.isfinite(zk)
        return np.where(finite, _norm_pdf(np.where(finite, zk, 0.0)), 0.0)

    # d(-logP)/dz weights at the four cut points
    w_r_hi = -inv * (Cu11 - Cu10) * cut_pdf(z_r, labels_r)
    w_r_lo = -inv * (Cu00 - Cu01) * cut_pdf(z_r, labels_r - 1)
    w_s_hi = -inv * (Cv11 - Cv01) * cut_pdf(z_s, labels_s)
    w_s_lo = -inv * (Cv00 - Cv10) * cut_pdf(z_s, labels_s - 1)

    graw_r, gF_r = _chain_z_weights(phi_r, F, z_r, [labels_r, labels_r - 1],
                                    [w_r_hi, w_r_lo], want_f_grad)
    graw_s, gF_s = _chain_z_weights(phi_s, F, z_s, [labels_s, labels_s - 1],
                                    [w_s_hi, w_s_lo], want_f_grad)
    gF = gF_r + gF_s if want_f_grad else None
    return nll, g_theta, graw_r, graw_s, gF
