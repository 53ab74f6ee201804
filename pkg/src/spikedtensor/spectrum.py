"""Limiting spectral law of the flattened block matrix.

The bulk spectrum converges to an equal-weight mixture of semicircle laws
whose radii are the |kappa_i|, the eigenvalues of (2/sqrt(d(d-1))) W_s.  The
matrix Stieltjes transform G(z) shares the eigenbasis of W_s with eigenvalues
zeta(kappa_i), and satisfies the quadratic fixed-point equation
(1/(d(d-1))) G W G W + z G + Id = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .critical import (CriticalPoint, SingularGramError, gram, hadamard_power,
                       symmetrized_flatten)
from .tensors import SymTensor


def scale_factor(d: int) -> float:
    return 2.0 / np.sqrt(d * (d - 1))


@dataclass
class SpectralLimit:
    """kappa values (|kappa| non-increasing) and the change of basis P with
    P diag(kappa) P^{-1} = (2/sqrt(d(d-1))) W."""

    kappas: np.ndarray
    basis_P: np.ndarray
    d: int
    Pinv: np.ndarray

    @property
    def mixture_size(self) -> int:
        return len(self.kappas)

    def support_edge(self) -> float:
        return float(np.abs(self.kappas).max())

    def scaled_matrix(self) -> np.ndarray:
        return self.basis_P @ np.diag(self.kappas) @ self.Pinv


def kappa_spectrum(W, d: int) -> SpectralLimit:
    """Eigendecomposition of (2/sqrt(d(d-1))) W, |kappa| sorted descending.

    W must have a real spectrum (it does whenever it is an SPD inverse times
    a diagonal); complex eigenvalues beyond 1e-8 are rejected.
    """
    S = scale_factor(d) * np.asarray(W, dtype=np.float64)
    vals, vecs = np.linalg.eig(S)
    if np.abs(vals.imag).max() > 1e-8:
        raise ValueError(
            f"matrix has complex eigenvalues (max imaginary part "
            f"{np.abs(vals.imag).max():.3e}); outside the theorem's hypotheses")
    vals = vals.real
    if np.abs(vecs.imag).max() > 1e-8:
        raise ValueError("eigenbasis is not real")
    vecs = vecs.real
    order = np.argsort(-np.abs(vals), kind="stable")
    P = vecs[:, order]
    return SpectralLimit(vals[order], P, d, np.linalg.inv(P))


def spectral_limit_from_stats(R_vv, gammas, d: int) -> SpectralLimit:
    """Spectral limit built from (R_vv, gamma) through the symmetric route.

    W = A^{-1} D with A = R_vv^{o(d-1)} SPD is similar to the symmetric
    A^{-1/2} D A^{-1/2}, so the eigensystem is computed with eigh and P is
    exactly real and well conditioned.
    """
    g = np.asarray(gammas, dtype=np.float64)
    if np.any(g == 0.0):
        raise ValueError(f"gamma weights must be nonzero, got {g}")
    A = hadamard_power(R_vv, d - 1)
    lam, U = np.linalg.eigh(A)
    if lam.min() < 1e-12:
        raise SingularGramError(float(lam.min()))
    inv_sqrt = (U / np.sqrt(lam)) @ U.T
    sqrt_A = (U * np.sqrt(lam)) @ U.T
    D = np.diag(g[-1] / g)
    vals, V = np.linalg.eigh(inv_sqrt @ D @ inv_sqrt)
    vals = scale_factor(d) * vals
    order = np.argsort(-np.abs(vals), kind="stable")
    vals, V = vals[order], V[:, order]
    return SpectralLimit(vals, inv_sqrt @ V, d, V.T @ sqrt_A)


def kappa_rank2(nu: float, lam: float, d: int):
    """Closed-form kappa pair for s=2: roots of the scaled 2x2 weight matrix
    with gamma ratio nu and (d-1)-power overlap lam."""
    disc = (nu + 1.0) ** 2 - 4.0 * nu * (1.0 - lam ** 2)
    if disc < 0:
        raise ValueError(f"complex kappa pair (discriminant {disc:.3e})")
    root = np.sqrt(disc)
    denom = np.sqrt(d * (d - 1)) * (1.0 - lam ** 2)
    return (nu + 1.0 + root) / denom, (nu + 1.0 - root) / denom


# -- density, cdf, Stieltjes transform -------------------------------------------


def limit_density(x, lim: SpectralLimit):
    """Mixture of semicircle densities (2/(pi kappa^2)) sqrt((kappa^2 - x^2)_+).

    A kappa = 0 component is a point mass at 0 and contributes no density.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x, dtype=np.float64)
    for k in lim.kappas:
        if k == 0.0:
            continue
        out = out + (2.0 / (np.pi * k * k)) * np.sqrt(np.clip(k * k - x * x, 0.0, None))
    out = out / lim.mixture_size
    return out if out.shape else float(out)


def limit_cdf(x, lim: SpectralLimit):
    """Closed-form mixture CDF (semicircle antiderivative per component)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x, dtype=np.float64)
    for k in lim.kappas:
        if k == 0.0:
            out = out + (x >= 0.0)
            continue
        a = abs(k)
        xc = np.clip(x, -a, a)
        out = out + 0.5 + xc * np.sqrt(k * k - xc * xc) / (np.pi * k * k) \
            + np.arcsin(xc / a) / np.pi
    out = out / lim.mixture_size
    return out if out.shape else float(out)


def _zeta_complex(z: complex, kappa: float) -> complex:
    if kappa == 0.0:
        return -1.0 / z
    w = np.sqrt(z * z - kappa * kappa + 0j)
    zeta = (2.0 / (kappa * kappa)) * (-z + w)
    # Herglotz branch: Im zeta and Im z share a sign
    if zeta.imag * z.imag < 0:
        zeta = (2.0 / (kappa * kappa)) * (-z - w)
    return zeta


def _zeta_edge(x: float, kappa: float) -> float:
    if kappa == 0.0:
        return -1.0 / x
    gap = x * x - kappa * kappa
    if gap < 0:
        if gap < -1e-12 * max(1.0, x * x):
            raise ValueError(
                f"real evaluation point {x} lies inside the support radius {abs(kappa)}")
        gap = 0.0
    # limit from the upper half-plane: the square root carries sign(x)
    return (2.0 / (kappa * kappa)) * (-x + np.sign(x) * np.sqrt(gap))


def stieltjes_matrix(z: complex, lim: SpectralLimit) -> np.ndarray:
    """G(z) = P diag(zeta(kappa_i)) P^{-1} for z off the real axis."""
    z = complex(z)
    if z.imag == 0.0:
        raise ValueError("stieltjes_matrix requires Im z != 0; "
                         "use stieltjes_matrix_edge for real points outside the support")
    zetas = np.array([_zeta_complex(z, k) for k in lim.kappas])
    return (lim.basis_P * zetas) @ lim.Pinv


def stieltjes_matrix_edge(x: float, lim: SpectralLimit) -> np.ndarray:
    """Real G(x) for real x with |x| >= support edge (limit from above)."""
    x = float(x)
    edge = lim.support_edge()
    if abs(x) < edge * (1.0 - 1e-12):
        raise ValueError(f"real point {x} is inside the support [-{edge}, {edge}]")
    zetas = np.array([_zeta_edge(x, k) for k in lim.kappas])
    return (lim.basis_P * zetas) @ lim.Pinv


def g1(z, d: int):
    """Rank-one Stieltjes transform (d(d-1)/2)(-z + sqrt(z^2 - 4/(d(d-1)))).

    Complex z needs Im z != 0; real z is the edge evaluation and must satisfy
    |z| >= 2/sqrt(d(d-1)).
    """
    kappa = scale_factor(d)
    z = complex(z)
    if z.imag != 0.0:
        return _zeta_complex(z, kappa)
    return _zeta_edge(z.real, kappa)


def fixed_point_residual(G: np.ndarray, W, z: complex, d: int) -> float:
    """Max-norm of (1/(d(d-1))) G W G W + z G + Id."""
    W = np.asarray(W, dtype=np.float64)
    GW = G @ W
    R = GW @ GW / (d * (d - 1)) + z * G + np.eye(len(W))
    return float(np.abs(R).max())


# -- empirical spectra ---------------------------------------------------------


def empirical_spectrum(T: SymTensor, cp: CriticalPoint) -> np.ndarray:
    """Sorted eigenvalues of the (symmetrized) flattened block matrix."""
    return np.sort(np.linalg.eigvalsh(symmetrized_flatten(T, cp)))


def ks_distance(eigs, cdf) -> float:
    """sup_x |empirical CDF - cdf(x)|, exact at the sample points.

    `cdf` is a SpectralLimit or any callable CDF; left limits are taken one
    float below each sample so step-function comparisons are exact.
    """
    if isinstance(cdf, SpectralLimit):
        lim = cdf
        cdf = lambda x: limit_cdf(x, lim)
    xs = np.sort(np.asarray(eigs, dtype=np.float64))
    n = len(xs)
    hi = np.asarray(cdf(xs), dtype=np.float64)
    lo = np.asarray(cdf(np.nextafter(xs, -np.inf)), dtype=np.float64)
    i = np.arange(1, n + 1)
    return float(max(np.abs(hi - i / n).max(), np.abs(lo - (i - 1) / n).max()))


def noise_flattening_stats(r: int, vv_offdiag: float, gamma_ratio: float):
    """Gram/weight configuration used by the pure-noise spectrum experiments."""
    R_vv = np.full((r, r), vv_offdiag) + (1.0 - vv_offdiag) * np.eye(r)
    gammas = gamma_ratio ** np.arange(r)
    return R_vv, gammas


# -- plot-ready exports ------------------------------------------------------------


def density_grid(lim: SpectralLimit, n: int = 512, pad: float = 0.1):
    """Columns (x, density, cdf) spanning the support with a small margin."""
    edge = lim.support_edge() * (1.0 + pad)
    x = np.linspace(-edge, edge, n)
    return x, limit_density(x, lim), limit_cdf(x, lim)


def write_density_csv(lim: SpectralLimit, path, n: int = 512, header_lines=()):
    x, dens, cdf = density_grid(lim, n)
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("x,density,cdf\n")
        for row in zip(x, dens, cdf):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_eigenvalues_txt(eigs, path, header_lines=()):
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for e in np.asarray(eigs).ravel():
            fh.write(f"{float(e)!r}\n")
