"""Asymptotically unbiased plug-in estimation of the spike weights.

The critical point's own (gamma, R_vv) are substituted into the limiting
system, turning it into a polynomial system for (beta, R_uu, R_uv).  In the
rank-two case the solutions are parameterized by the real roots of a single
univariate polynomial of degree (d-1)^2 + 1; candidates are kept only when
they back-substitute into the system, and the reported estimate maximizes
the asymptotic likelihood proxy beta' R_uu^{od} beta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.optimize import least_squares
from scipy.stats import qmc

from .critical import (CriticalPoint, SingularGramError, SolveReport, SummaryStats,
                       ZeroWeightError, find_critical_points, hadamard_power,
                       stats_from_critical, weight_matrix)
from .spectrum import spectral_limit_from_stats, stieltjes_matrix_edge
from .alignments import gamma_validity_bound
from .tensors import SymTensor


class UninformativeCriticalPointError(ValueError):
    """gamma_hat sits inside the plug-in spectral support: no refined estimate."""


class CriticalPointNonconvergence(RuntimeError):
    """The critical-point solver did not reach tolerance."""


@dataclass
class PluginMatrices:
    """M-hat, C-hat and the plug-in Stieltjes matrix, all from one critical point."""

    M_hat: np.ndarray
    C_hat: np.ndarray
    G_hat: np.ndarray
    W_hat: np.ndarray
    source_stats: SummaryStats
    d: int

    @property
    def s(self) -> int:
        return len(self.source_stats.gammas)


@dataclass
class PluginEstimate:
    betas_hat: np.ndarray
    R_uu_hat: np.ndarray
    R_uv_hat: np.ndarray
    residual: float
    objective: float

    def packed(self) -> np.ndarray:
        r = len(self.betas_hat)
        iu = np.triu_indices(r, k=1)
        return np.concatenate([self.betas_hat, self.R_uu_hat[iu],
                               self.R_uv_hat.ravel()])


@dataclass
class EstimationResult:
    status: str  # "ok" | "uninformative"
    estimate: PluginEstimate | None
    critical_point: CriticalPoint
    stats: SummaryStats
    report: SolveReport


def plugin_matrices(stats: SummaryStats, d: int) -> PluginMatrices:
    """M-hat and C-hat of the plug-in system, with G-hat at gamma_hat_s/(d-1)."""
    gammas = np.asarray(stats.gammas, dtype=np.float64)
    R_vv = np.asarray(stats.R_vv, dtype=np.float64)
    lim = spectral_limit_from_stats(R_vv, gammas, d)
    bound = gamma_validity_bound(lim.support_edge(), d)
    if abs(gammas[-1]) < bound * (1.0 - 1e-12):
        raise UninformativeCriticalPointError(
            f"uninformative critical point: |gamma_s|={abs(gammas[-1]):.6g} is "
            f"inside the plug-in support bound {bound:.6g}; no refined estimator")
    G = stieltjes_matrix_edge(gammas[-1] / (d - 1), lim)
    W = weight_matrix(R_vv, gammas, d)
    A = hadamard_power(R_vv, d - 1)
    GW = G @ W
    M = np.diag(gammas) @ A + hadamard_power(R_vv, d - 2) * GW / d
    C = R_vv @ M + (A @ GW).T / (d * (d - 1))
    return PluginMatrices(M, C, G, W, stats, d)


def plugin_residual(betas, R_uu, R_uv, pm: PluginMatrices) -> float:
    """Max-norm residual of the plug-in system at a candidate estimate."""
    betas = np.asarray(betas, dtype=np.float64)
    R_uu = np.asarray(R_uu, dtype=np.float64)
    R_uv = np.asarray(R_uv, dtype=np.float64)
    P = R_uv ** (pm.d - 1)
    E1 = R_uu @ np.diag(betas) @ P - R_uv @ pm.M_hat
    E2 = R_uv.T @ np.diag(betas) @ P - pm.C_hat
    return max(float(np.abs(E1).max()), float(np.abs(E2).max()))


def _flip_signal(i, betas, R_uu, R_uv, d):
    R_uu[i, :] *= -1.0
    R_uu[:, i] *= -1.0
    R_uv[i, :] *= -1.0
    if d % 2 == 1:
        betas[i] *= -1.0


def _canonicalize(betas, R_uu, R_uv, d):
    """Model symmetries only: sort by |beta|, make beta_1 > 0 (odd d) and, in
    the rank-two case, rho >= 0 by flipping the second signal."""
    betas = np.asarray(betas, dtype=np.float64).copy()
    R_uu = np.asarray(R_uu, dtype=np.float64).copy()
    R_uv = np.asarray(R_uv, dtype=np.float64).copy()
    order = np.argsort(-np.abs(betas), kind="stable")
    betas = betas[order]
    R_uu = R_uu[np.ix_(order, order)]
    R_uv = R_uv[order, :]
    if d % 2 == 1 and betas[0] < 0:
        _flip_signal(0, betas, R_uu, R_uv, d)
    if len(betas) == 2 and R_uu[0, 1] < 0:
        _flip_signal(1, betas, R_uu, R_uv, d)
    return betas, R_uu, R_uv


def _physical(betas, R_uu, R_uv):
    # correlation estimates must be realizable by unit vectors
    r = len(betas)
    iu = np.triu_indices(r, k=1)
    return (np.abs(R_uu[iu]).max(initial=0.0) <= 1.0 + 1e-6
            and np.abs(R_uv).max() <= 1.0 + 1e-6)


def _objective(betas, R_uu, d):
    return float(betas @ hadamard_power(R_uu, d) @ betas)


def _emit(betas, R_uu, R_uv, pm, tol):
    betas, R_uu, R_uv = _canonicalize(betas, R_uu, R_uv, pm.d)
    if not _physical(betas, R_uu, R_uv):
        return None
    resid = plugin_residual(betas, R_uu, R_uv, pm)
    if not np.isfinite(resid) or resid >= tol:
        return None
    return PluginEstimate(betas, R_uu, R_uv, resid,
                          _objective(betas, R_uu, pm.d))


def _dedup(cands):
    kept = []
    for c in sorted(cands, key=lambda c: tuple(np.round(c.packed(), 9))):
        if all(np.abs(c.packed() - k.packed()).max() > 1e-6 for k in kept):
            kept.append(c)
    return kept


# -- rank-two closed form ----------------------------------------------------------


def appendix_polynomial(C: np.ndarray, d: int) -> np.ndarray:
    """Ascending coefficients of
    (c11 X - c21)(c21 X^{d-1} - c22)^{d-1} + (c22 - c12 X)(c11 X^{d-1} - c12)^{d-1},
    expanded binomially over the c_ij monomials (degree (d-1)^2 + 1)."""
    c11, c12, c21, c22 = C[0, 0], C[0, 1], C[1, 0], C[1, 1]
    p = np.zeros((d - 1) ** 2 + 2)
    for k in range(d):
        comb = math.comb(d - 1, k)
        a = comb * c21 ** k * (-c22) ** (d - 1 - k)
        p[(d - 1) * k + 1] += c11 * a
        p[(d - 1) * k] += -c21 * a
        b = comb * c11 ** k * (-c12) ** (d - 1 - k)
        p[(d - 1) * k] += c22 * b
        p[(d - 1) * k + 1] += -c12 * b
    return p


def _real_d_root(x, d):
    return math.copysign(abs(x) ** (1.0 / d), x)


def solve_plugin_rank2(pm: PluginMatrices, tol: float = 1e-8) -> list[PluginEstimate]:
    """Closed-form rank-two candidates from the real roots of the appendix
    polynomial; every emitted estimate back-substitutes below `tol`."""
    if pm.s != 2:
        raise ValueError(f"rank-two path needs s=2 stats, got s={pm.s}")
    d = pm.d
    C = pm.C_hat
    if abs(np.linalg.det(C)) < 1e-12 * max(1.0, np.abs(C).max() ** 2):
        raise SingularGramError(float(np.linalg.det(C)))
    Cinv = np.linalg.inv(C)
    coeffs = appendix_polynomial(C, d)
    nz = np.nonzero(np.abs(coeffs) > 1e-300)[0]
    if len(nz) == 0:
        return []
    roots = npoly.polyroots(coeffs[:nz[-1] + 1])
    scale = max(1.0, float(np.abs(C).max()))
    cands = []
    for root in roots:
        if abs(root.imag) > 1e-8 * (1.0 + abs(root)):
            continue
        eta = float(root.real)
        den = C[1, 0] * eta ** (d - 1) - C[1, 1]
        if abs(den) < 1e-10 * scale:
            continue
        theta = (C[0, 0] * eta ** (d - 1) - C[0, 1]) / den
        b1 = np.array([1.0, eta ** (d - 1)]) @ Cinv @ np.array([1.0, eta])
        b2 = np.array([theta ** (d - 1), 1.0]) @ Cinv @ np.array([theta, 1.0])
        if abs(b1) < 1e-10 or abs(b2) < 1e-10:
            continue
        if d % 2 == 0 and (b1 <= 0 or b2 <= 0):
            continue
        xi1 = _real_d_root(b1, d) ** -1 if d % 2 == 1 else b1 ** (-1.0 / d)
        xi2 = _real_d_root(b2, d) ** -1 if d % 2 == 1 else b2 ** (-1.0 / d)
        Ntil = np.array([[xi1, xi1 * eta], [xi2 * theta, xi2]])
        K = Ntil @ pm.M_hat @ Cinv @ Ntil.T
        k12 = 0.5 * (K[0, 1] + K[1, 0])
        if abs(K[0, 0]) < 1e-12 or abs(K[1, 1]) < 1e-12:
            continue
        beta1 = abs(K[0, 0]) ** (d / 2.0)
        beta2 = abs(K[1, 1]) ** (d / 2.0) * (1.0 if k12 >= 0 else -1.0)
        if beta1 < 1e-10 or abs(beta2) < 1e-10:
            continue
        rho = abs(k12) / math.sqrt(abs(K[0, 0] * K[1, 1]))
        s1 = _real_d_root(beta1, d)
        s2 = _real_d_root(beta2, d)
        R_uv = np.diag([1.0 / s1, 1.0 / s2]) @ Ntil
        est = _emit(np.array([beta1, beta2]),
                    np.array([[1.0, rho], [rho, 1.0]]), R_uv, pm, tol)
        if est is not None:
            cands.append(est)
    return _dedup(cands)


def solve_plugin_rank1(pm: PluginMatrices, tol: float = 1e-8) -> list[PluginEstimate]:
    """Scalar closed form: alpha^2 = C/M, beta = M / alpha^{d-2}."""
    if pm.s != 1:
        raise ValueError(f"rank-one path needs s=1 stats, got s={pm.s}")
    m = float(pm.M_hat[0, 0])
    c = float(pm.C_hat[0, 0])
    if abs(m) < 1e-12 or c / m <= 0:
        return []
    alpha = math.sqrt(c / m)
    beta = m / alpha ** (pm.d - 2)
    est = _emit(np.array([beta]), np.eye(1), np.array([[alpha]]), pm, tol)
    return [est] if est is not None else []


# -- general multistart solver ------------------------------------------------------


def solve_plugin_general(pm: PluginMatrices, r: int | None = None,
                         n_starts: int = 64, tol: float = 1e-8,
                         seed: int = 0) -> list[PluginEstimate]:
    """Damped least squares on the plug-in system over (beta, R_uu, R_uv)."""
    s = pm.s
    r = s if r is None else r
    nt = r * (r - 1) // 2
    m = r * s + s * s
    gmax = float(np.abs(pm.source_stats.gammas).max())
    B = 3.0 * max(gmax, 1.0)

    def fun(x):
        betas = x[:r]
        R_uu = np.eye(r)
        iu = np.triu_indices(r, k=1)
        R_uu[iu] = x[r:r + nt]
        R_uu.T[iu] = R_uu[iu]
        R_uv = x[r + nt:].reshape(r, s)
        P = R_uv ** (pm.d - 1)
        E1 = R_uu @ np.diag(betas) @ P - R_uv @ pm.M_hat
        E2 = R_uv.T @ np.diag(betas) @ P - pm.C_hat
        return np.concatenate([E1.ravel(), E2.ravel()])

    lo = np.concatenate([[1e-8], np.full(r - 1, -B), np.full(nt, -0.999),
                         np.full(r * s, -1.1)])
    hi = np.concatenate([np.full(r, B), np.full(nt, 0.999), np.full(r * s, 1.1)])
    starts = []
    gam = np.abs(pm.source_stats.gammas)
    sep = 0.05 * np.ones((r, s))
    for i in range(min(r, s)):
        sep[i, i] = 0.9
    starts.append(np.concatenate([np.resize(gam, r), np.full(nt, 0.3), sep.ravel()]))
    sob = qmc.Sobol(r + nt + r * s, scramble=True, seed=seed)
    for row in sob.random(max(n_starts - len(starts), 0)):
        betas = 0.05 + (B - 0.05) * row[:r]
        betas = np.sort(betas)[::-1]
        taus = 1.8 * row[r:r + nt] - 0.9
        ruv = 2.0 * row[r + nt:].reshape(r, s) - 1.0
        starts.append(np.concatenate([betas, taus, ruv.ravel()]))
    cands = []
    for x0 in starts:
        x0 = np.clip(x0, lo + 1e-9, hi - 1e-9)
        try:
            res = least_squares(fun, x0, bounds=(lo, hi), method="trf",
                                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=400)
        except Exception:
            continue
        betas = res.x[:r]
        R_uu = np.eye(r)
        iu = np.triu_indices(r, k=1)
        R_uu[iu] = res.x[r:r + nt]
        R_uu.T[iu] = R_uu[iu]
        R_uv = res.x[r + nt:].reshape(r, s)
        est = _emit(betas, R_uu, R_uv, pm, tol)
        if est is not None:
            cands.append(est)
    return _dedup(cands)


def select_estimate(candidates) -> PluginEstimate:
    """argmax of beta' R_uu^{od} beta over the accepted candidates."""
    if not candidates:
        raise ValueError("no candidates to select from")
    return max(candidates, key=lambda c: c.objective)


def data_accept_tol(pm: PluginMatrices) -> float:
    """Back-substitution acceptance threshold for finite-N statistics.

    Finite-N stats never satisfy the (overdetermined) plug-in system exactly;
    the matched candidate lands orders of magnitude below this threshold while
    spurious roots sit orders above it, so the split is insensitive to the
    constant.
    """
    return 2e-3 * (1.0 + float(np.abs(pm.C_hat).max()))


def estimate_from_tensor(T: SymTensor, r: int, init: CriticalPoint | None = None,
                         seed: int = 0, solver_tol: float = 1e-8,
                         max_iter: int = 2000, accept_tol: float | None = None,
                         n_starts: int = 64) -> EstimationResult:
    """Full pipeline: critical point -> summary stats -> plug-in inversion.

    `accept_tol` defaults to a data-scaled back-substitution threshold (exact
    inputs can pass 1e-8).  Returns status "uninformative" (with the biased
    raw statistics attached as diagnostics) when the critical point carries no
    refined estimate; solver nonconvergence raises CriticalPointNonconvergence.
    """
    cp, report = find_critical_points(T, r, init=init, tol=solver_tol,
                                      max_iter=max_iter, seed=seed)
    if not report.converged:
        raise CriticalPointNonconvergence(
            f"critical-point solver stopped at residual {report.residual:.3e} "
            f"after {report.iterations} iterations")
    stats = stats_from_critical(cp)
    try:
        pm = plugin_matrices(stats, T.order)
    except UninformativeCriticalPointError:
        return EstimationResult("uninformative", None, cp, stats, report)
    tol = data_accept_tol(pm) if accept_tol is None else accept_tol
    if r == 2:
        cands = solve_plugin_rank2(pm, tol=tol)
    else:
        cands = solve_plugin_general(pm, r=r, n_starts=n_starts, tol=tol,
                                     seed=seed)
    if not cands:
        return EstimationResult("uninformative", None, cp, stats, report)
    return EstimationResult("ok", select_estimate(cands), cp, stats, report)
