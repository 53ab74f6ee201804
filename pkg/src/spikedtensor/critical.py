"""Critical points of the rank-r symmetric approximation problem.

A tuple (gamma_1..gamma_r, v_1..v_r) of weights and unit vectors is a critical
point when every stationarity contraction vanishes.  Stacking the weighted
vectors turns the first-order conditions into an eigenvector equation for the
block matrix built here (`flatten`), which also drives the fixed-point solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensors import SymTensor, SpikeModel, correlated_unit_vectors, _rng


class SingularGramError(ValueError):
    """Hadamard power of the Gram matrix is numerically singular."""

    def __init__(self, smallest_eigenvalue):
        self.smallest_eigenvalue = smallest_eigenvalue
        super().__init__(
            f"Hadamard power of the Gram matrix is singular "
            f"(smallest eigenvalue {smallest_eigenvalue:.3e})")


class ZeroWeightError(ValueError):
    """A gamma weight is zero, so the weight matrix is undefined."""


@dataclass
class CriticalPoint:
    """Weights (|gamma| non-increasing) and unit vectors, one row per component."""

    gammas: np.ndarray
    vs: np.ndarray  # (r, N)

    def __post_init__(self):
        self.gammas = np.asarray(self.gammas, dtype=np.float64)
        self.vs = np.asarray(self.vs, dtype=np.float64)
        r = len(self.gammas)
        if self.vs.ndim != 2 or self.vs.shape[0] != r:
            raise ValueError(f"vs must be (r, N) with r={r}, got {self.vs.shape}")
        norms = np.linalg.norm(self.vs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            raise ValueError(f"vectors must be unit norm within 1e-10, got {norms}")
        mags = np.abs(self.gammas)
        if np.any(np.diff(mags) > 1e-9 * max(1.0, mags[0])):
            raise ValueError(f"|gamma| must be non-increasing, got {self.gammas}")

    @property
    def rank(self) -> int:
        return len(self.gammas)

    @property
    def dim(self) -> int:
        return self.vs.shape[1]


@dataclass
class SummaryStats:
    """Gram blocks and weights whose large-N limits the theory predicts."""

    R_vv: np.ndarray
    gammas: np.ndarray
    R_uv: np.ndarray | None = None  # (r, s): rows are signals, columns estimates
    R_uu: np.ndarray | None = None


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual: float
    trace: list = field(default_factory=list)
    restarts: int = 0
    perturbations: int = 0


def gram(vectors) -> np.ndarray:
    """Matrix of pairwise inner products of the given equal-length vectors."""
    V = np.asarray(vectors, dtype=np.float64)
    return V @ V.T


def hadamard_power(M, k: int) -> np.ndarray:
    """Entrywise k-th power."""
    return np.asarray(M, dtype=np.float64) ** k


def weight_matrix(R_vv, gammas, d: int) -> np.ndarray:
    """(R_vv^{o(d-1)})^{-1} diag(gamma_r/gamma_1, ..., gamma_r/gamma_{r-1}, 1)."""
    g = np.asarray(gammas, dtype=np.float64)
    if np.any(g == 0.0):
        raise ZeroWeightError(f"gamma weights must be nonzero, got {g}")
    A = hadamard_power(R_vv, d - 1)
    eigmin = float(np.linalg.eigvalsh(A).min())
    if eigmin < 1e-12:
        raise SingularGramError(eigmin)
    return np.linalg.solve(A, np.diag(g[-1] / g))


def _sqrt_inv(A) -> np.ndarray:
    lam, U = np.linalg.eigh(A)
    if lam.min() < 1e-12:
        raise SingularGramError(float(lam.min()))
    return (U / np.sqrt(lam)) @ U.T


def flatten(T: SymTensor, cp: CriticalPoint) -> np.ndarray:
    """(W_r (x) Id) blockdiag(<T, v_i^(x)(d-2)>), the rN x rN block matrix."""
    r, n = cp.rank, cp.dim
    W = weight_matrix(gram(cp.vs), cp.gammas, T.order)
    Bs = [T.mat(v) for v in cp.vs]
    out = np.zeros((r * n, r * n))
    for i in range(r):
        for j in range(r):
            out[i * n:(i + 1) * n, j * n:(j + 1) * n] = W[i, j] * Bs[j]
    return out


def symmetrized_flatten(T: SymTensor, cp: CriticalPoint) -> np.ndarray:
    """Symmetric matrix similar to flatten(T, cp), hence with the same spectrum.

    Conjugating by the square root of the Hadamard power turns the block
    matrix into blockwise S_ik S_kj (gamma_r/gamma_k) <T, v_k^(x)(d-2)> with
    S the inverse square root, which is symmetric because every block is.
    """
    r, n = cp.rank, cp.dim
    g = cp.gammas
    if np.any(g == 0.0):
        raise ZeroWeightError(f"gamma weights must be nonzero, got {g}")
    S = _sqrt_inv(hadamard_power(gram(cp.vs), T.order - 1))
    Cs = [(g[-1] / g[k]) * T.mat(cp.vs[k]) for k in range(r)]
    out = np.zeros((r * n, r * n))
    for i in range(r):
        for j in range(i, r):
            block = sum(S[i, k] * S[k, j] * Cs[k] for k in range(r))
            out[i * n:(i + 1) * n, j * n:(j + 1) * n] = block
            if j > i:
                out[j * n:(j + 1) * n, i * n:(i + 1) * n] = block.T
    return out


def _stationarity(T: SymTensor, gammas, vs, Bs=None):
    """Stationarity vectors <T - sum_j gamma_j v_j^(x)d, v_i^(x)(d-1)> for all i."""
    R = gram(vs) ** (T.order - 1)
    out = []
    for i, v in enumerate(vs):
        tv = Bs[i] @ v if Bs is not None else T.vec(v)
        out.append(tv - (gammas * R[i]) @ vs)
    return out


def kkt_residual(T: SymTensor, cp) -> float:
    """Max over components of |stationarity vector| + |  ||v_i|| - 1 |."""
    return _residual(T, np.asarray(cp.gammas, dtype=np.float64),
                     np.asarray(cp.vs, dtype=np.float64))


def _update_step(T, gammas, vs, collinear_eps=1e-8, rng=None, max_perturb=5):
    """One application of the stacked-vector map; returns (gammas, vs, Bs, nperturb)."""
    d = T.order
    nperturb = 0
    while True:
        A = gram(vs) ** (d - 1)
        eigmin = float(np.linalg.eigvalsh(A).min())
        if eigmin >= collinear_eps:
            break
        if rng is None or nperturb >= max_perturb:
            raise SingularGramError(eigmin)
        # push the most collinear later vector off the others, orthogonally
        R = np.abs(gram(vs) - np.eye(len(vs)))
        i, j = np.unravel_index(np.argmax(R), R.shape)
        j = max(i, j)
        w = rng.standard_normal(T.dim)
        w -= (w @ vs[j]) * vs[j]
        vs = vs.copy()
        vs[j] = vs[j] + 1e-3 * w / np.linalg.norm(w)
        vs[j] /= np.linalg.norm(vs[j])
        nperturb += 1
    if np.any(gammas == 0.0):
        raise ZeroWeightError(f"gamma hit zero during iteration: {gammas}")
    W = np.linalg.solve(A, np.diag(gammas[-1] / gammas))
    Bs = [T.mat(v) for v in vs]
    blocks = [B @ (g * v) for B, g, v in zip(Bs, gammas, vs)]
    new_gammas = np.empty_like(gammas)
    new_vs = np.empty_like(vs)
    for i in range(len(gammas)):
        b = sum(W[i, j] * blocks[j] for j in range(len(gammas))) / gammas[-1]
        nb = np.linalg.norm(b)
        if nb == 0.0:
            raise ZeroWeightError("iterate collapsed to zero")
        sign = 1.0 if b @ vs[i] >= 0 else -1.0
        new_gammas[i] = sign * nb
        new_vs[i] = b / (sign * nb)
    order = np.argsort(-np.abs(new_gammas), kind="stable")
    return new_gammas[order], new_vs[order], Bs, nperturb


def iterate_once(T: SymTensor, cp: CriticalPoint) -> CriticalPoint:
    """One step of the update map; identical to the solver's inner iteration."""
    gammas, vs, _, _ = _update_step(T, cp.gammas.copy(), cp.vs.copy())
    return CriticalPoint(gammas, vs)


def _random_init(T, r, rng_seed):
    vs = correlated_unit_vectors(np.eye(r), T.dim, rng_seed)
    return np.ones(r), vs


def find_critical_points(T: SymTensor, r: int, init: CriticalPoint | None = None,
                         tol: float = 1e-8, max_iter: int = 1000, seed: int = 0,
                         n_restarts: int = 3):
    """Fixed-point iteration for a critical point: rebuild the block matrix at
    the current iterate, apply it to the stacked vector, divide by gamma_r,
    renormalize blockwise, and re-sort by |gamma|.

    Returns (CriticalPoint, SolveReport).  Nonconvergence within max_iter is
    reported, not raised; persistent Gram singularity after bounded random
    restarts raises SingularGramError.
    """
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    rng = _rng(seed ^ 0x5EED)
    total_perturb = 0
    last_error = None
    for restart in range(n_restarts + 1):
        if init is not None and restart == 0:
            gammas, vs = init.gammas.copy(), init.vs.copy()
        else:
            gammas, vs = _random_init(T, r, seed + 7919 * restart)
        trace = []
        try:
            for it in range(max_iter + 1):
                res = _residual(T, gammas, vs)
                trace.append(res)
                if res <= tol:
                    cp = CriticalPoint(gammas, vs)
                    return cp, SolveReport(True, it, res, trace, restart, total_perturb)
                if it == max_iter:
                    break
                gammas, vs, _, nper = _update_step(
                    T, gammas, vs, rng=rng)
                total_perturb += nper
            cp = CriticalPoint(gammas, vs)
            return cp, SolveReport(False, max_iter, trace[-1], trace, restart,
                                   total_perturb)
        except (SingularGramError, ZeroWeightError) as err:
            last_error = err
            continue
    raise last_error


def _residual(T, gammas, vs):
    stat = _stationarity(T, gammas, vs)
    norms = np.linalg.norm(vs, axis=1)
    return max(float(np.linalg.norm(s)) + abs(float(nv) - 1.0)
               for s, nv in zip(stat, norms))


def summary_statistics(cp: CriticalPoint, model: SpikeModel) -> SummaryStats:
    """Exact Gram blocks between the estimates and the model's signals."""
    if cp.dim != model.N:
        raise ValueError(f"dimension mismatch: cp has N={cp.dim}, model N={model.N}")
    return SummaryStats(R_vv=gram(cp.vs), gammas=cp.gammas.copy(),
                        R_uv=model.us @ cp.vs.T, R_uu=gram(model.us))


def stats_from_critical(cp: CriticalPoint) -> SummaryStats:
    """Estimate-side statistics only (signals unknown), for the plug-in path."""
    return SummaryStats(R_vv=gram(cp.vs), gammas=cp.gammas.copy())


# -- serialization ---------------------------------------------------------------


def critical_point_record(cp: CriticalPoint, d: int, residual: float,
                          iterations: int, seed) -> dict:
    return {
        "d": d, "N": cp.dim, "r": cp.rank,
        "gammas": cp.gammas.tolist(),
        "vs": cp.vs.tolist(),
        "residual": residual,
        "iterations": iterations,
        "seed": seed,
    }


def save_critical_point(record: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(record, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_critical_point(path):
    with open(path) as fh:
        rec = json.load(fh)
    return CriticalPoint(np.array(rec["gammas"]), np.array(rec["vs"])), rec
