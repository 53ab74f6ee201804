"""Symmetric tensors with multiset storage and exact-variance Gaussian noise.

The observation model is a rank-r symmetric spike plus a symmetrized Gaussian
noise tensor scaled by 1/sqrt(N).  Entries are stored once per sorted index
tuple, so permutation symmetry is exact by construction and an order-4 tensor
of dimension 100 needs ~4.4e6 floats instead of 1e8.  Contractions iterate the
canonical entries with multiplicity weights; when the dense cube is small
enough it is materialized once and reused.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import chain, combinations_with_replacement, permutations

import numpy as np

MIN_ORDER = 3
MAX_ORDER = 6

# Above this many dense entries contractions stay on the multiset path.
_DENSE_ENTRY_LIMIT = 30_000_000
# Refuse to allocate canonical storage beyond this many entries.
_STORAGE_LIMIT = 150_000_000


class StorageError(ValueError):
    """Requested (N, d) needs more canonical entries than we allow."""


def multiset_size(dim: int, order: int) -> int:
    """Number of sorted index tuples of length `order` over range(dim)."""
    return math.comb(dim + order - 1, order)


@lru_cache(maxsize=8)
def _canonical_indices(dim: int, order: int) -> np.ndarray:
    """All nondecreasing index tuples, lexicographic, as an (M, order) int array."""
    m = multiset_size(dim, order)
    if m > _STORAGE_LIMIT:
        raise StorageError(
            f"symmetric tensor with N={dim}, d={order} needs {m} canonical "
            f"entries, above the supported limit {_STORAGE_LIMIT}")
    flat = np.fromiter(
        chain.from_iterable(combinations_with_replacement(range(dim), order)),
        dtype=np.int32, count=m * order)
    idx = flat.reshape(m, order)
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=8)
def _arrangement_counts(dim: int, order: int) -> np.ndarray:
    """Distinct rearrangements d!/prod(m_i!) of each canonical tuple."""
    idx = _canonical_indices(dim, order)
    run = np.ones(len(idx))
    denom = np.ones(len(idx))
    for p in range(1, order):
        eq = idx[:, p] == idx[:, p - 1]
        run = np.where(eq, run + 1.0, 1.0)
        denom *= np.where(eq, run, 1.0)
    counts = math.factorial(order) / denom
    counts.setflags(write=False)
    return counts


@lru_cache(maxsize=8)
def _canonical_keys(dim: int, order: int) -> np.ndarray:
    """Base-dim encoding of each canonical tuple; ascending, for searchsorted."""
    idx = _canonical_indices(dim, order)
    keys = np.zeros(len(idx), dtype=np.int64)
    for p in range(order):
        keys = keys * dim + idx[:, p]
    keys.setflags(write=False)
    return keys


def _encode(sorted_idx: np.ndarray, dim: int) -> np.ndarray:
    keys = np.zeros(sorted_idx.shape[0], dtype=np.int64)
    for p in range(sorted_idx.shape[1]):
        keys = keys * dim + sorted_idx[:, p]
    return keys


def noise_variance(index, order: int | None = None) -> float:
    """Variance 1/multinomial(d; multiplicities) of a symmetrized noise entry.

    The symmetric noise entry is the average of the i.i.d. standard Gaussian
    entries over all permutations of `index`, hence its variance is one over
    the number of distinct rearrangements.
    """
    index = tuple(index)
    d = len(index)
    if order is not None and order != d:
        raise ValueError(f"index has {d} components, expected {order}")
    num = 1
    for m in Counter(index).values():
        num *= math.factorial(m)
    return num / math.factorial(d)


class SymTensor:
    """Dense symmetric order-d tensor addressed by sorted index tuples."""

    def __init__(self, order: int, dim: int, values: np.ndarray, seed=None):
        if not MIN_ORDER <= order <= MAX_ORDER:
            raise ValueError(f"order must be in [{MIN_ORDER}, {MAX_ORDER}], got {order}")
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        values = np.ascontiguousarray(values, dtype=np.float64)
        m = multiset_size(dim, order)
        if values.shape != (m,):
            raise ValueError(f"expected {m} canonical values for N={dim}, d={order}, "
                             f"got shape {values.shape}")
        self.order = order
        self.dim = dim
        self.values = values
        self.seed = seed
        self._dense = None

    # -- storage views ------------------------------------------------------

    @property
    def index_table(self) -> np.ndarray:
        return _canonical_indices(self.dim, self.order)

    @property
    def arrangement_counts(self) -> np.ndarray:
        return _arrangement_counts(self.dim, self.order)

    def __getitem__(self, index) -> float:
        index = np.sort(np.asarray(index, dtype=np.int64))
        if index.shape != (self.order,):
            raise IndexError(f"need {self.order} indices")
        if index.min() < 0 or index.max() >= self.dim:
            raise IndexError(f"index out of range for dim {self.dim}")
        key = 0
        for p in range(self.order):
            key = key * self.dim + int(index[p])
        pos = np.searchsorted(_canonical_keys(self.dim, self.order), key)
        return float(self.values[pos])

    def dense_available(self) -> bool:
        return self.dim ** self.order <= _DENSE_ENTRY_LIMIT

    def to_dense(self) -> np.ndarray:
        """Materialize the full (N,)*d cube (cached); exactly symmetric."""
        if self._dense is None:
            if not self.dense_available():
                raise StorageError(
                    f"dense cube with {self.dim ** self.order} entries exceeds "
                    f"the {_DENSE_ENTRY_LIMIT} limit")
            dense = np.empty((self.dim,) * self.order)
            idx = self.index_table
            for perm in permutations(range(self.order)):
                dense[tuple(idx[:, p] for p in perm)] = self.values
            self._dense = dense
        return self._dense

    # -- algebra -------------------------------------------------------------

    def _like(self, values) -> "SymTensor":
        return SymTensor(self.order, self.dim, values)

    def __add__(self, other: "SymTensor") -> "SymTensor":
        if (other.order, other.dim) != (self.order, self.dim):
            raise ValueError("shape mismatch")
        return self._like(self.values + other.values)

    def __sub__(self, other: "SymTensor") -> "SymTensor":
        if (other.order, other.dim) != (self.order, self.dim):
            raise ValueError("shape mismatch")
        return self._like(self.values - other.values)

    def __mul__(self, scalar) -> "SymTensor":
        return self._like(self.values * float(scalar))

    __rmul__ = __mul__

    def frobenius_sq(self) -> float:
        """Squared Frobenius norm, summing each entry once with its multiplicity."""
        return float(np.dot(self.arrangement_counts, self.values ** 2))

    # -- contractions ---------------------------------------------------------

    def _check_vec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValueError(f"vector of length {v.shape} does not match dim {self.dim}")
        return v

    def full(self, v) -> float:
        """<T, v^(x) d>, the homogeneous form at v."""
        v = self._check_vec(v)
        V = v[self.index_table]
        return float(np.dot(self.values * self.arrangement_counts, np.prod(V, axis=1)))

    def vec(self, v) -> np.ndarray:
        """<T, v^(x)(d-1)> as a length-N vector (gradient of full at v, over d)."""
        v = self._check_vec(v)
        if self.dense_available():
            out = self.to_dense()
            for _ in range(self.order - 1):
                out = np.tensordot(out, v, axes=([0], [0]))
            return out
        idx = self.index_table
        w = self.values * self.arrangement_counts
        V = v[idx]
        out = np.zeros(self.dim)
        cols = list(range(self.order))
        for p in cols:
            keep = [t for t in cols if t != p]
            out += np.bincount(idx[:, p], weights=w * np.prod(V[:, keep], axis=1),
                               minlength=self.dim)
        return out / self.order

    def mat(self, v) -> np.ndarray:
        """<T, v^(x)(d-2)> as a symmetric N x N matrix (rescaled Hessian of full)."""
        v = self._check_vec(v)
        if self.dense_available():
            out = self.to_dense()
            for _ in range(self.order - 2):
                out = np.tensordot(out, v, axes=([0], [0]))
            return out
        idx = self.index_table
        d, n = self.order, self.dim
        w = self.values * self.arrangement_counts
        V = v[idx]
        H = np.zeros((n, n))
        cols = list(range(d))
        for p in range(d):
            for q in range(p + 1, d):
                keep = [t for t in cols if t != p and t != q]
                L = w * np.prod(V[:, keep], axis=1) if keep else w
                flat = idx[:, p].astype(np.int64) * n + idx[:, q]
                c = np.bincount(flat, weights=L, minlength=n * n).reshape(n, n)
                H += c + c.T
        return H / (d * (d - 1))

    def contract(self, vectors):
        """Contract against k <= d vectors.

        Returns a float when k = d, a vector when k = d-1, a symmetric matrix
        when k = d-2, and a SymTensor of order d-k otherwise.
        """
        vs = [self._check_vec(v) for v in vectors]
        k = len(vs)
        if not 1 <= k <= self.order:
            raise ValueError(f"can contract 1..{self.order} vectors, got {k}")
        same = all(v is vs[0] or np.array_equal(v, vs[0]) for v in vs[1:])
        if same:
            if k == self.order:
                return self.full(vs[0])
            if k == self.order - 1:
                return self.vec(vs[0])
            if k == self.order - 2:
                return self.mat(vs[0])
        if self.dense_available():
            out = self.to_dense()
            for v in vs:
                out = np.tensordot(out, v, axes=([0], [0]))
            return self._finish_contraction(out, self.order - k)
        return self._contract_multiset(vs)

    def _finish_contraction(self, dense_out, order_out):
        if order_out == 0:
            return float(dense_out)
        if order_out <= 2:
            return dense_out
        idx = _canonical_indices(self.dim, order_out)
        return SymTensor(order_out, self.dim, dense_out[tuple(idx.T)])

    def _contract_multiset(self, vs):
        # Slow generic path for tensors too large to densify: peel one vector
        # at a time, staying in canonical storage.
        values = self.values
        order = self.order
        for v in vs:
            values, order = _contract_one(values, order, self.dim, v)
        idx = _canonical_indices(self.dim, order) if order >= 1 else None
        if order == 0:
            return float(values[0])
        if order == 1:
            out = np.zeros(self.dim)
            out[idx[:, 0]] = values
            return out
        if order == 2:
            out = np.zeros((self.dim, self.dim))
            out[idx[:, 0], idx[:, 1]] = values
            out[idx[:, 1], idx[:, 0]] = values
            return out
        return SymTensor(order, self.dim, values)


def _contract_one(values, order, dim, v):
    """One canonical-storage contraction step: order -> order - 1."""
    keys = _canonical_keys(dim, order)
    if order == 1:
        # order-1 canonical storage is just the vector itself
        return np.array([np.dot(values, v)]), 0
    out_idx = _canonical_indices(dim, order - 1)
    out = np.zeros(len(out_idx))
    for i in range(dim):
        col = np.full((len(out_idx), 1), i, dtype=np.int32)
        merged = np.sort(np.hstack([out_idx, col]), axis=1)
        pos = np.searchsorted(keys, _encode(merged, dim))
        out += v[i] * values[pos]
    return out, order - 1


# -- sampling and model construction ------------------------------------------


def _rng(seed: int) -> np.random.Generator:
    # Philox: counter-based, identical streams across platforms.
    return np.random.Generator(np.random.Philox(seed))


def sample_noise(N: int, d: int, rng_seed: int) -> SymTensor:
    """Symmetric Gaussian noise: each canonical entry ~ N(0, noise_variance)."""
    idx = _canonical_indices(N, d)
    counts = _arrangement_counts(N, d)
    g = _rng(rng_seed).standard_normal(len(idx))
    return SymTensor(d, N, g / np.sqrt(counts), seed=rng_seed)


@dataclass
class SpikeModel:
    """Ground truth of the spiked model: weights, unit signal vectors, seed."""

    d: int
    N: int
    betas: np.ndarray
    us: np.ndarray  # (r, N), rows are unit vectors
    seed: int = 0

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.us = np.asarray(self.us, dtype=np.float64)
        if self.us.ndim != 2 or self.us.shape != (len(self.betas), self.N):
            raise ValueError(
                f"us must have shape (r, N)=({len(self.betas)}, {self.N}), "
                f"got {self.us.shape}")
        norms = np.linalg.norm(self.us, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError(f"signal vectors must be unit norm, got norms {norms}")
        mags = np.abs(self.betas)
        if np.any(np.diff(mags) > 1e-12):
            raise ValueError(f"|beta| must be non-increasing, got {self.betas}")

    @property
    def r(self) -> int:
        return len(self.betas)


def build_spiked(model: SpikeModel, with_noise: bool = True) -> SymTensor:
    """sum_i beta_i u_i^(x)d, plus N^(-1/2) * sample_noise when flagged."""
    idx = _canonical_indices(model.N, model.d)
    vals = np.zeros(len(idx))
    for beta, u in zip(model.betas, model.us):
        acc = u[idx[:, 0]].copy()
        for p in range(1, model.d):
            acc *= u[idx[:, p]]
        vals += beta * acc
    if with_noise:
        vals = vals + sample_noise(model.N, model.d, model.seed).values / math.sqrt(model.N)
    return SymTensor(model.d, model.N, vals, seed=model.seed)


def correlated_unit_vectors(target_gram, N: int, rng_seed: int) -> np.ndarray:
    """r unit vectors in R^N with pairwise inner products equal to target_gram.

    Built as L Q^T from a Cholesky factor L of the target and an orthonormal
    frame Q, so the Gram matrix is exact up to rounding.
    """
    G = np.asarray(target_gram, dtype=np.float64)
    r = G.shape[0]
    if G.shape != (r, r) or not np.allclose(G, G.T, atol=1e-12):
        raise ValueError("target_gram must be a symmetric square matrix")
    if np.any(np.abs(np.diag(G) - 1.0) > 1e-12):
        raise ValueError("target_gram must have unit diagonal")
    if r > N:
        raise ValueError(f"need r <= N, got r={r}, N={N}")
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        for k in range(1, r + 1):
            if np.linalg.det(G[:k, :k]) <= 0:
                raise ValueError(
                    f"target_gram is not positive definite: leading {k}x{k} "
                    f"minor has determinant {np.linalg.det(G[:k, :k]):.3e}") from None
        raise
    a = _rng(rng_seed).standard_normal((N, r))
    Q, _ = np.linalg.qr(a)
    return L @ Q.T


# -- plain-text serialization ---------------------------------------------------


def save_tensor(T: SymTensor, path) -> None:
    """Write (sorted index tuple, value) rows after a (d, N, seed) header."""
    with open(path, "w") as fh:
        fh.write("# symtensor v1\n")
        seed = "-" if T.seed is None else str(T.seed)
        fh.write(f"# d={T.order} N={T.dim} seed={seed}\n")
        idx = T.index_table
        for row, val in zip(idx, T.values):
            fh.write(" ".join(str(int(i)) for i in row))
            fh.write(f" {float(val)!r}\n")


def load_tensor(path) -> SymTensor:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != "# symtensor v1":
            raise ValueError(f"not a symtensor file: header {magic!r}")
        fields = dict(part.split("=") for part in fh.readline().strip("# \n").split())
        d, n = int(fields["d"]), int(fields["N"])
        seed = None if fields["seed"] == "-" else int(fields["seed"])
        m = multiset_size(n, d)
        vals = np.empty(m)
        idx = np.empty((m, d), dtype=np.int64)
        for k, line in enumerate(fh):
            parts = line.split()
            idx[k] = [int(p) for p in parts[:d]]
            vals[k] = float(parts[d])
        if k + 1 != m:
            raise ValueError(f"expected {m} rows, found {k + 1}")
    keys = _canonical_keys(n, d)
    pos = np.searchsorted(keys, _encode(np.sort(idx, axis=1), n))
    values = np.empty(m)
    values[pos] = vals
    return SymTensor(d, n, values, seed=seed)
