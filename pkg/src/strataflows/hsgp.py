"""Squared-exponential kernel and its Hilbert-space reduced-rank approximation.

The approximation expands a stationary 2D kernel in Laplacian eigenfunctions
on the box ``[-B1, B1] x [-B2, B2]``::

    k(x, x') ~= sum_j S(sqrt(lambda_j)) phi_j(x) phi_j(x')

with ``phi_{d,j}(x) = sqrt(1/B_d) sin(sqrt(lambda_{d,j}) (x + B_d))`` and
``lambda_{d,j} = (j pi / (2 B_d))^2``.  Eigenfunctions depend only on the
input grid and are evaluated once; only the spectral weights change with the
kernel hyperparameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Inputs outside the approximation box or a degenerate input range."""


@dataclass(frozen=True)
class SeKernelParams:
    sigma2: float
    l1: float
    l2: float

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValueError("sigma2 must be non-negative")
        if not (self.l1 > 0 and self.l2 > 0):
            raise ValueError("length scales must be positive")

    @property
    def lengths(self):
        return np.array([self.l1, self.l2])


def se_kernel(p1, p2, theta: SeKernelParams):
    """``sigma2 * exp(-(da^2 / (2 l1^2) + db^2 / (2 l2^2)))``; broadcasts over leading axes."""
    d = np.asarray(p1, dtype=float) - np.asarray(p2, dtype=float)
    q = (d[..., 0] / theta.l1) ** 2 + (d[..., 1] / theta.l2) ** 2
    return theta.sigma2 * np.exp(-0.5 * q)


def se_gram(x1, x2, theta: SeKernelParams):
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return se_kernel(x1[:, None, :], x2[None, :, :], theta)


def spectral_density(omega, theta: SeKernelParams):
    """``2 pi sigma2 l1 l2 exp(-(l1^2 w1^2 + l2^2 w2^2) / 2)``; broadcasts."""
    w = np.asarray(omega, dtype=float)
    e = (theta.l1 * w[..., 0]) ** 2 + (theta.l2 * w[..., 1]) ** 2
    return 2.0 * np.pi * theta.sigma2 * theta.l1 * theta.l2 * np.exp(-0.5 * e)


def index_matrix(m1, m2):
    """All ``(j1, j2)`` combinations, first index varying slowest (2 x m1*m2)."""
    j1, j2 = np.meshgrid(np.arange(1, m1 + 1), np.arange(1, m2 + 1), indexing="ij")
    return np.vstack([j1.ravel(), j2.ravel()])


def eigenvalues_1d(B, m):
    j = np.arange(1, m + 1)
    return (j * np.pi / (2.0 * B)) ** 2


def eigenfunctions_1d(x, B, m):
    """(n, m) matrix of ``sqrt(1/B) sin(sqrt(lambda_j) (x + B))``."""
    x = np.asarray(x, dtype=float)
    sl = np.sqrt(eigenvalues_1d(B, m))
    return np.sqrt(1.0 / B) * np.sin(sl[None, :] * (x[:, None] + B))


@dataclass(frozen=True)
class HsgpBasis:
    inputs: np.ndarray  # (n, 2) raw inputs
    center: np.ndarray  # (2,) subtracted before evaluating eigenfunctions
    B: np.ndarray  # (2,) box half-widths
    m1: int
    m2: int
    K: np.ndarray  # (2, m) index matrix
    eigenvalues: np.ndarray  # (m, 2)
    phi: np.ndarray  # (n, m)

    @property
    def m(self):
        return self.m1 * self.m2

    @property
    def n(self):
        return self.phi.shape[0]

    @property
    def sqrt_eigenvalues(self):
        return np.sqrt(self.eigenvalues)


def build_basis(inputs, B1, B2, m1, m2, center=(0.0, 0.0)):
    """Evaluate the product eigenbasis at ``inputs - center`` on the given box."""
    m1, m2 = int(m1), int(m2)
    if m1 < 1 or m2 < 1:
        raise ValueError("basis counts must be at least 1")
    if not (B1 > 0 and B2 > 0):
        raise ValueError("box half-widths must be positive")
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    if x.shape[1] != 2:
        raise ValueError("inputs must be an (n, 2) array")
    c = np.asarray(center, dtype=float)
    xc = x - c
    B = np.array([B1, B2], dtype=float)
    outside = np.any(np.abs(xc) >= B, axis=1)
    if outside.any():
        raise DomainError(f"{int(outside.sum())} inputs lie outside the open box, e.g. {x[outside][0]}")
    K = index_matrix(m1, m2)
    phi1 = eigenfunctions_1d(xc[:, 0], B1, m1)
    phi2 = eigenfunctions_1d(xc[:, 1], B2, m2)
    phi = phi1[:, K[0] - 1] * phi2[:, K[1] - 1]
    lam = np.column_stack([eigenvalues_1d(B1, m1)[K[0] - 1], eigenvalues_1d(B2, m2)[K[1] - 1]])
    for a in (x, c, B, K, lam, phi):
        a.setflags(write=False)
    return HsgpBasis(x, c, B, m1, m2, K, lam, phi)


def spectral_weights(basis: HsgpBasis, theta: SeKernelParams):
    """``S_theta(sqrt(lambda_j))`` for every basis function."""
    return spectral_density(basis.sqrt_eigenvalues, theta)


def hsgp_gram(basis: HsgpBasis, theta: SeKernelParams):
    """Approximate Gram matrix ``Phi diag(S) Phi^T``."""
    s = spectral_weights(basis, theta)
    G = (basis.phi * s) @ basis.phi.T
    return 0.5 * (G + G.T)


def hsgp_draw(basis: HsgpBasis, theta: SeKernelParams, beta):
    """Function values ``Phi (sqrt(S) * beta)``; ``beta`` may be (m,) or (m, k)."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape[0] != basis.m:
        raise ValueError(f"beta has leading dimension {beta.shape[0]}, basis has m={basis.m}")
    s = np.sqrt(spectral_weights(basis, theta))
    if beta.ndim == 1:
        return basis.phi @ (s * beta)
    return basis.phi @ (s[:, None] * beta)


@dataclass(frozen=True)
class Domain:
    center: np.ndarray
    half_width: np.ndarray
    scheme: str

    @property
    def B1(self):
        return float(self.half_width[0])

    @property
    def B2(self):
        return float(self.half_width[1])


def _resolution(col):
    u = np.unique(col)
    if u.size < 2:
        raise DomainError("degenerate input range: all inputs share one value in a dimension")
    return float(np.min(np.diff(u)))


def domain_from_inputs(inputs, boundary_factor=1.25, scheme="centered", resolution=None):
    """Approximation box for a set of 2D inputs.

    Each input dimension is treated as a grid of cells of width
    ``resolution`` (the smallest spacing between distinct values by
    default), so the covered interval extends half a cell beyond the extreme
    inputs.  With ``scheme="centered"`` the box is centred on that interval
    and its half-width is the interval half-width times ``boundary_factor``.
    With ``scheme="raw"`` the interval ``[lo, hi]`` in raw coordinates is
    expanded multiplicatively to ``[lo / factor, hi * factor]`` and the box
    is centred on the result.
    """
    if not boundary_factor >= 1:
        raise ValueError("boundary_factor must be at least 1")
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    centers, halves = [], []
    for d in range(2):
        col = x[:, d]
        r = _resolution(col) if resolution is None else float(np.broadcast_to(resolution, 2)[d])
        lo, hi = col.min() - r / 2, col.max() + r / 2
        if not hi > lo:
            raise DomainError("degenerate input range")
        if scheme == "centered":
            c = 0.5 * (lo + hi)
            h = 0.5 * (hi - lo) * boundary_factor
        elif scheme == "raw":
            if lo <= 0:
                raise DomainError("raw multiplicative scheme needs positive inputs")
            a, b = lo / boundary_factor, hi * boundary_factor
            c, h = 0.5 * (a + b), 0.5 * (b - a)
        else:
            raise ValueError(f"unknown domain scheme {scheme!r}")
        centers.append(c)
        halves.append(h)
    return Domain(np.array(centers), np.array(halves), scheme)


def basis_for_inputs(inputs, m=30, boundary_factor=1.25, scheme="centered", m2=None):
    """Convenience: domain from inputs, then the eigenbasis on that domain."""
    dom = domain_from_inputs(inputs, boundary_factor, scheme)
    return build_basis(inputs, dom.B1, dom.B2, m, m if m2 is None else m2, center=dom.center)


def gram_error(basis: HsgpBasis, theta: SeKernelParams):
    """Max absolute difference to the exact Gram matrix, relative to sigma2."""
    exact = se_gram(basis.inputs, basis.inputs, theta)
    return float(np.max(np.abs(hsgp_gram(basis, theta) - exact)) / theta.sigma2)
