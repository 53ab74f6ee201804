"""Limiting-alignment system relating critical points to the true signals.

Unknowns are the cross-overlaps R_uv, the estimate Gram R_vv and the weights
gamma.  With A = R_vv^{o(d-1)}, W = A^{-1} diag(gamma_s/gamma_i) and G the
matrix Stieltjes transform evaluated at the real point gamma_s/(d-1), the
system reads

    R_uu D_beta R_uv^{o(d-1)} = R_uv M
    R_uv^T D_beta R_uv^{o(d-1)} = R_vv M + (A G W)^T / (d(d-1))
    M = D_gamma A + R_vv^{o(d-2)} o (G W) / d

and is solvable only when |gamma_s| clears (d-1) times the support edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import qmc

from .critical import SingularGramError, ZeroWeightError, hadamard_power, weight_matrix
from .spectrum import (SpectralLimit, scale_factor, spectral_limit_from_stats,
                       stieltjes_matrix_edge)


class HypothesisViolationError(ValueError):
    """gamma_s/(d-1) falls inside the limiting spectral support."""

    def __init__(self, gap):
        self.gap = gap
        super().__init__(
            f"|gamma_s| is below (d-1)*|kappa_1| by {gap:.3e}; the Stieltjes "
            f"matrix is not evaluable there (hypothesis violation)")


@dataclass
class AlignmentSolution:
    """One root of the limiting-alignment system."""

    gammas: np.ndarray      # (s,)
    R_uv: np.ndarray        # (r, s)
    R_vv: np.ndarray        # (s, s)
    residual: float
    valid: bool
    kappas: np.ndarray = None

    def packed(self) -> np.ndarray:
        s = len(self.gammas)
        iu = np.triu_indices(s, k=1)
        return np.concatenate([self.gammas, self.R_uv.ravel(), self.R_vv[iu]])


def gamma_validity_bound(kappa1: float, d: int) -> float:
    """The theorem's hypothesis: |gamma_s| must exceed (d-1)|kappa_1|."""
    return (d - 1) * abs(kappa1)


def rank1_gamma_bound(d: int) -> float:
    """Validity bound in the rank-one case, 2(d-1)/sqrt(d(d-1))."""
    return (d - 1) * scale_factor(d)


def _system_blocks(gammas, R_uv, R_vv, betas, R_uu, d):
    """Residual matrices (E1, E2) of the two alignment equations, plus the limit."""
    gammas = np.asarray(gammas, dtype=np.float64)
    R_uv = np.asarray(R_uv, dtype=np.float64)
    R_vv = np.asarray(R_vv, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    R_uu = np.asarray(R_uu, dtype=np.float64)
    lim = spectral_limit_from_stats(R_vv, gammas, d)
    bound = gamma_validity_bound(lim.support_edge(), d)
    gap = bound - abs(gammas[-1])
    if gap > 1e-12 * max(1.0, bound):
        raise HypothesisViolationError(gap)
    G = stieltjes_matrix_edge(gammas[-1] / (d - 1), lim)
    A = hadamard_power(R_vv, d - 1)
    W = weight_matrix(R_vv, gammas, d)
    GW = G @ W
    M = np.diag(gammas) @ A + hadamard_power(R_vv, d - 2) * GW / d
    P = R_uv ** (d - 1)
    E1 = R_uu @ np.diag(betas) @ P - R_uv @ M
    E2 = R_uv.T @ np.diag(betas) @ P - R_vv @ M - (A @ GW).T / (d * (d - 1))
    return E1, E2, lim


def alignment_residual(candidate, betas, R_uu, d: int) -> float:
    """Max-norm of the concatenated alignment-equation residuals.

    `candidate` is an AlignmentSolution or a (gammas, R_uv, R_vv) triple.
    Raises HypothesisViolationError when G is not evaluable there.
    """
    if isinstance(candidate, AlignmentSolution):
        g, ruv, rvv = candidate.gammas, candidate.R_uv, candidate.R_vv
    else:
        g, ruv, rvv = candidate
    E1, E2, _ = _system_blocks(g, ruv, rvv, betas, R_uu, d)
    return max(float(np.abs(E1).max()), float(np.abs(E2).max()))


def asymptotic_squared_error(betas, R_uu, gammas, R_vv, d: int) -> float:
    """Limit of the normalized squared error: b' R_uu^{od} b - g' R_vv^{od} g."""
    betas = np.asarray(betas, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    if np.shape(R_uu) != (len(betas),) * 2 or np.shape(R_vv) != (len(gammas),) * 2:
        raise ValueError("Gram shapes must match the weight vectors")
    return float(betas @ hadamard_power(R_uu, d) @ betas
                 - gammas @ hadamard_power(R_vv, d) @ gammas)


# -- multistart solver ------------------------------------------------------------


def _unpack(x, r, s):
    ruv = x[:r * s].reshape(r, s)
    rvv = np.eye(s)
    iu = np.triu_indices(s, k=1)
    nt = len(iu[0])
    rvv[iu] = x[r * s:r * s + nt]
    rvv.T[iu] = rvv[iu]
    gammas = x[r * s + nt:]
    return gammas, ruv, rvv


def _pack(gammas, ruv, rvv):
    s = len(gammas)
    iu = np.triu_indices(s, k=1)
    return np.concatenate([ruv.ravel(), rvv[iu], gammas])


def _sort_components(gammas, ruv, rvv):
    order = np.argsort(-np.abs(gammas), kind="stable")
    return gammas[order], ruv[:, order], rvv[np.ix_(order, order)]


def _gauge_fix(gammas, ruv, rvv, d):
    """Flip v_j signs (and gamma_j for odd d) so each R_uv column's dominant
    entry is nonnegative; a pure gauge choice on equivalent critical points."""
    gammas, ruv, rvv = gammas.copy(), ruv.copy(), rvv.copy()
    for j in range(ruv.shape[1]):
        col = ruv[:, j]
        anchor = col[np.argmax(np.abs(col))] if np.abs(col).max() > 1e-9 else (
            gammas[j] if d % 2 == 1 else 1.0)
        if anchor < 0:
            ruv[:, j] *= -1.0
            rvv[j, :] *= -1.0
            rvv[:, j] *= -1.0
            if d % 2 == 1:
                gammas[j] *= -1.0
    return gammas, ruv, rvv


def _tie_canonical(gammas, ruv, rvv, betas, R_uu, d, tol):
    """Components with tied |gamma| can be relabeled freely; present each tie
    group with columns ordered by their dominant signal row."""
    s = len(gammas)
    mags = np.abs(gammas)
    order = np.arange(s)
    i = 0
    changed = False
    while i < s:
        j = i + 1
        while j < s and abs(mags[j] - mags[i]) <= 1e-7 * max(1.0, mags[i]):
            j += 1
        if j - i > 1:
            block = order[i:j]
            keys = [(int(np.argmax(np.abs(ruv[:, c]))), -float(np.abs(ruv[:, c]).max()))
                    for c in block]
            perm = sorted(range(len(block)), key=lambda k: keys[k])
            if perm != list(range(len(block))):
                order[i:j] = block[perm]
                changed = True
        i = j
    if not changed:
        return gammas, ruv, rvv
    g2, ruv2, rvv2 = gammas[order], ruv[:, order], rvv[np.ix_(order, order)]
    try:
        E1, E2, _ = _system_blocks(g2, ruv2, rvv2, betas, R_uu, d)
    except (HypothesisViolationError, SingularGramError, ZeroWeightError):
        return gammas, ruv, rvv
    if max(float(np.abs(E1).max()), float(np.abs(E2).max())) <= tol:
        return g2, ruv2, rvv2
    return gammas, ruv, rvv


def _start_points(betas, R_uu, r, s, d, n_starts, seed):
    bmax = float(np.abs(betas).max())
    gmax = max(2.0 * bmax, 1.5 * rank1_gamma_bound(d))
    rho = float(np.mean(R_uu[np.triu_indices(r, k=1)])) if r > 1 else 0.0
    starts = []
    # signal-separated, mixture-heavy, and near-edge warm starts
    sep_ruv = 0.02 * np.ones((r, s))
    for i in range(min(r, s)):
        sep_ruv[i, i] = 0.95
    starts.append((np.abs(betas[:s]) * 1.05 + 0.1, sep_ruv,
                   _toeplitz_unit(s, 0.9 * rho)))
    starts.append((np.full(s, max(bmax, 1.0)), np.full((r, s), 1.0 / math.sqrt(r)),
                   _toeplitz_unit(s, 0.5)))
    edge_g = 1.05 * rank1_gamma_bound(d)
    starts.append((np.full(s, edge_g), np.full((r, s), 0.3), np.eye(s)))
    nt = s * (s - 1) // 2
    dim = r * s + nt + s
    sob = qmc.Sobol(dim, scramble=True, seed=seed)
    n_extra = max(n_starts - len(starts), 0)
    if n_extra:
        u = sob.random(n_extra)
        for row in u:
            ruv = 2.0 * row[:r * s].reshape(r, s) - 1.0
            taus = 1.8 * row[r * s:r * s + nt] - 0.9
            g = 0.05 + (gmax - 0.05) * row[r * s + nt:]
            g = np.sort(g)[::-1]
            rvv = np.eye(s)
            iu = np.triu_indices(s, k=1)
            rvv[iu] = taus
            rvv.T[iu] = taus
            starts.append((g, ruv, rvv))
    return [(g, ruv, rvv) for g, ruv, rvv in starts], gmax


def _toeplitz_unit(s, off):
    return np.full((s, s), off) + (1.0 - off) * np.eye(s)


def solve_alignment_system(betas, R_uu, d: int, s: int | None = None,
                           n_starts: int = 64, tol: float = 1e-9,
                           seed: int = 0) -> list[AlignmentSolution]:
    """Deduplicated roots of the alignment system from deterministic multistarts.

    Damped least squares on the (overdetermined by s(s-1)/2) residual; a
    candidate is accepted only by the independent alignment_residual, and an
    empty list is the legitimate no-solution regime, not an error.
    """
    betas = np.asarray(betas, dtype=np.float64)
    R_uu = np.asarray(R_uu, dtype=np.float64)
    r = len(betas)
    if R_uu.shape != (r, r):
        raise ValueError(f"R_uu must be {r}x{r}, got {R_uu.shape}")
    if np.any(np.abs(np.diag(R_uu) - 1.0) > 1e-12):
        raise ValueError("R_uu must have unit diagonal")
    if np.linalg.eigvalsh(R_uu).min() <= 0:
        raise ValueError("R_uu must be positive definite")
    s = r if s is None else s
    if not 1 <= s <= r:
        raise ValueError(f"need 1 <= s <= r, got s={s}")
    nt = s * (s - 1) // 2
    m = r * s + s * s

    def fun(x):
        gammas, ruv, rvv = _unpack(x, r, s)
        try:
            E1, E2, _ = _system_blocks(gammas, ruv, rvv, betas, R_uu, d)
        except HypothesisViolationError as err:
            return np.full(m, 100.0 * (1.0 + err.gap))
        except (SingularGramError, ZeroWeightError):
            return np.full(m, 200.0)
        return np.concatenate([E1.ravel(), E2.ravel()])

    starts, gmax = _start_points(betas, R_uu, r, s, d, n_starts, seed)
    lo = np.concatenate([np.full(r * s, -1.05), np.full(nt, -0.999),
                         np.full(s, -1.2 * gmax)])
    hi = -lo
    found: list[AlignmentSolution] = []
    for g0, ruv0, rvv0 in starts:
        x0 = np.clip(_pack(g0, ruv0, rvv0), lo + 1e-9, hi - 1e-9)
        try:
            res = least_squares(fun, x0, bounds=(lo, hi), method="trf",
                                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=500)
        except Exception:
            continue
        gammas, ruv, rvv = _unpack(res.x, r, s)
        gammas, ruv, rvv = _sort_components(gammas, ruv, rvv)
        gammas, ruv, rvv = _gauge_fix(gammas, ruv, rvv, d)
        gammas, ruv, rvv = _tie_canonical(gammas, ruv, rvv, betas, R_uu, d, tol)
        try:
            E1, E2, lim = _system_blocks(gammas, ruv, rvv, betas, R_uu, d)
        except (HypothesisViolationError, SingularGramError, ZeroWeightError):
            continue
        resid = max(float(np.abs(E1).max()), float(np.abs(E2).max()))
        if not np.isfinite(resid) or resid >= tol:
            continue
        if np.abs(ruv).max() > 1.0 + 1e-8 or np.abs(rvv).max() > 1.0 + 1e-8:
            continue
        bound = gamma_validity_bound(lim.support_edge(), d)
        valid = abs(gammas[-1]) - bound > 1e-8 * max(1.0, abs(gammas[-1]))
        sol = AlignmentSolution(gammas, ruv, rvv, resid, valid, lim.kappas.copy())
        if all(np.abs(sol.packed() - kept.packed()).max() > 1e-6 for kept in found):
            found.append(sol)
    found.sort(key=lambda sol: tuple(np.round(sol.packed(), 9)))
    return found


def select_solution(solutions, betas, R_uu, d: int) -> AlignmentSolution:
    """Valid solution minimizing the asymptotic squared error (ties: larger |gamma_s|)."""
    valid = [sol for sol in solutions if sol.valid]
    if not valid:
        raise ValueError("no valid alignment solutions to select from")
    errs = [asymptotic_squared_error(betas, R_uu, sol.gammas, sol.R_vv, d)
            for sol in valid]
    best = min(range(len(valid)),
               key=lambda i: (errs[i], -abs(valid[i].gammas[-1])))
    return valid[best]


def detection_threshold(R_uu, d: int, beta_direction, bracket, tol: float = 1e-3,
                        s: int | None = None, n_starts: int = 64,
                        seed: int = 0) -> float:
    """Bisection in the overall signal strength for existence of valid solutions.

    beta = c * direction with the direction scaled to max-|entry| one; returns
    c with valid solutions just above and none just below, an empirical value.
    """
    direction = np.asarray(beta_direction, dtype=np.float64)
    direction = direction / np.abs(direction).max()

    def exists(c):
        sols = solve_alignment_system(c * direction, R_uu, d, s=s,
                                      n_starts=n_starts, seed=seed)
        return any(sol.valid for sol in sols)

    lo, hi = float(bracket[0]), float(bracket[1])
    if exists(lo):
        raise ValueError(f"bracket does not straddle: valid solutions already at c={lo}")
    if not exists(hi):
        raise ValueError(f"bracket does not straddle: no valid solutions at c={hi}")
    while hi - lo > tol * max(1.0, 0.5 * (hi + lo)):
        mid = 0.5 * (lo + hi)
        if exists(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)
