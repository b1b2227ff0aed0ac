"""Poisson flow model with 2D Gaussian-process smoothing over ages.

Each flow cell ``k`` belongs to a GP block ``g`` (typically the transmission
direction) and sits at an input ``(source age, recipient age)`` of that
block.  The log intensity is::

    log lambda_k = X_int[k] @ c + f_g(input_k)
    n_k ~ Poisson(lambda_k * xi_S[a] * xi_R[b])

Two priors for ``f_g`` are supported:

``"hsgp"``
    ``f = Phi (sqrt(S_theta) * beta)`` with ``beta ~ N(0, I)``, ``Phi`` the
    precomputed eigenbasis (see :mod:`strataflows.hsgp`).
``"exact"``
    ``f = sigma * chol(C_ell + jitter I) z`` with ``z ~ N(0, I)`` and ``C``
    the unit-variance squared-exponential correlation matrix.

Both are non-centred and share the unconstrained hyperparameters
``(log sigma, log ell_1, log ell_2)`` per block with priors
``sigma^2 ~ Half-Normal(0, 10)`` (scale 10 on the variance),
``ell_d ~ Inv-Gamma(alpha_d, beta_d)`` and intercepts ``c ~ N(0, 10^2)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .._rng import stream
from ..hsgp import HsgpBasis, basis_for_inputs
from ..sampling import SamplingSpec
from ..strata import FlowCounts, StrataError
from . import hmc
from .draws import PosteriorDraws
from .priors import invgamma_from_quantiles, invgamma_mode

CLAMP = 700.0
# log-scale hyperparameters beyond this are treated as outside the support
# (the density there is negligible and its terms overflow)
HYPER_LIMIT = 20.0


@dataclass
class GpBlock:
    name: str
    inputs: np.ndarray  # (n_b, 2) unique inputs
    ls_prior: tuple  # ((alpha1, beta1), (alpha2, beta2)) inverse-gamma shape/scale
    basis: HsgpBasis | None = None
    dist2: tuple = field(default=None, repr=False)  # squared pairwise distances per dim

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        self.inputs = x
        self.dist2 = tuple((x[:, d, None] - x[None, :, d]) ** 2 for d in range(2))

    @property
    def n(self):
        return len(self.inputs)


class FlowGPModel:
    """Log posterior and gradient of the GP-smoothed Poisson flow model."""

    def __init__(
        self,
        counts,
        cell_block,
        cell_input,
        blocks,
        X_int,
        intercept_names,
        prior="hsgp",
        sigma2_scale=10.0,
        intercept_sd=10.0,
        jitter=1e-6,
        cell_names=None,
    ):
        if prior not in ("hsgp", "exact"):
            raise ValueError("prior must be 'hsgp' or 'exact'")
        self.n = np.asarray(counts, dtype=float)
        self.cell_block = np.asarray(cell_block, dtype=np.int64)
        self.cell_input = np.asarray(cell_input, dtype=np.int64)
        self.blocks = list(blocks)
        self.X = np.asarray(X_int, dtype=float)
        self.intercept_names = list(intercept_names)
        self.prior = prior
        self.sigma2_scale = float(sigma2_scale)
        self.intercept_sd = float(intercept_sd)
        self.jitter = float(jitter)
        L = self.n.size
        self.cell_names = list(cell_names) if cell_names is not None else [f"cell{k}" for k in range(L)]
        if self.X.shape != (L, len(self.intercept_names)):
            raise ValueError("intercept design has the wrong shape")
        if prior == "hsgp" and any(b.basis is None for b in self.blocks):
            raise ValueError("hsgp prior needs a basis on every block")
        # parameter layout
        self.p = self.X.shape[1]
        offs = self.p
        self.slices = []
        for b in self.blocks:
            k = b.basis.m if prior == "hsgp" else b.n
            self.slices.append((offs, offs + 3, offs + 3 + k))
            offs += 3 + k
        self.dim = offs
        self.block_cells = [np.nonzero(self.cell_block == g)[0] for g in range(len(self.blocks))]
        self.block_cell_inputs = [self.cell_input[c] for c in self.block_cells]
        if prior == "hsgp":
            self._sqrt_eig = [np.sqrt(b.basis.eigenvalues) for b in self.blocks]

    # ----- parameter naming -------------------------------------------------
    def parameter_names(self):
        names = list(self.intercept_names)
        for b in self.blocks:
            names += [f"log_sigma_{b.name}", f"log_ell1_{b.name}", f"log_ell2_{b.name}"]
            k = b.basis.m if self.prior == "hsgp" else b.n
            tag = "beta" if self.prior == "hsgp" else "z"
            names += [f"{tag}_{b.name}[{j}]" for j in range(k)]
        return names

    # ----- building blocks --------------------------------------------------
    def _block_f(self, g, theta, want_parts=False):
        b = self.blocks[g]
        h0, h1, h2 = self.slices[g]
        us, u1, u2 = theta[h0], theta[h0 + 1], theta[h0 + 2]
        lat = theta[h1:h2]
        if self.prior == "hsgp":
            sl = self._sqrt_eig[g]
            l1, l2 = np.exp(u1), np.exp(u2)
            log_sqrt_s = (
                0.5 * np.log(2 * np.pi) + us + 0.5 * (u1 + u2)
                - 0.25 * ((l1 * sl[:, 0]) ** 2 + (l2 * sl[:, 1]) ** 2)
            )
            sqrt_s = np.exp(log_sqrt_s)
            f = b.basis.phi @ (sqrt_s * lat)
            return f, (sqrt_s, l1, l2) if want_parts else None
        sigma = np.exp(us)
        l1, l2 = np.exp(u1), np.exp(u2)
        C = np.exp(-0.5 * (b.dist2[0] / l1**2 + b.dist2[1] / l2**2))
        Cj = C + self.jitter * np.eye(b.n)
        Lc = linalg.cholesky(Cj, lower=True, check_finite=False)
        f = sigma * (Lc @ lat)
        return f, (sigma, l1, l2, C, Lc) if want_parts else None

    def log_intensity(self, theta):
        """``log lambda`` per cell (no sampling offset)."""
        theta = np.asarray(theta, dtype=float)
        eta = self.X @ theta[: self.p]
        for g in range(len(self.blocks)):
            f, _ = self._block_f(g, theta)
            cells = self.block_cells[g]
            eta[cells] += f[self.block_cell_inputs[g]]
        return eta

    def block_function(self, theta, g):
        return self._block_f(g, np.asarray(theta, dtype=float))[0]

    def logp_grad(self, theta, log_offset, flags=None):
        """Log posterior (up to a constant) and its gradient.

        ``flags``, if given, is a dict whose ``"clamped"`` counter is
        incremented whenever the linear predictor had to be clamped.
        """
        theta = np.asarray(theta, dtype=float)
        grad = np.zeros_like(theta)
        for h0, _, _ in self.slices:
            if np.any(np.abs(theta[h0 : h0 + 3]) > HYPER_LIMIT):
                return -np.inf, grad
        c = theta[: self.p]
        eta = self.X @ c
        parts = []
        fs = []
        for g in range(len(self.blocks)):
            f, part = self._block_f(g, theta, want_parts=True)
            parts.append(part)
            fs.append(f)
            eta[self.block_cells[g]] += f[self.block_cell_inputs[g]]
        lin = eta + log_offset
        big = np.abs(lin) > CLAMP
        if big.any():
            if flags is not None:
                flags["clamped"] = flags.get("clamped", 0) + 1
            lin = np.clip(lin, -CLAMP, CLAMP)
        mu = np.exp(lin)
        lp = float(np.sum(self.n * lin - mu))
        r = self.n - mu  # d loglik / d log lambda
        r[big] = 0.0
        # intercepts
        grad[: self.p] = self.X.T @ r - c / self.intercept_sd**2
        lp += -0.5 * float(c @ c) / self.intercept_sd**2
        for g, b in enumerate(self.blocks):
            h0, h1, h2 = self.slices[g]
            us, u1, u2 = theta[h0], theta[h0 + 1], theta[h0 + 2]
            lat = theta[h1:h2]
            gf = np.bincount(self.block_cell_inputs[g], weights=r[self.block_cells[g]], minlength=b.n)
            if self.prior == "hsgp":
                sqrt_s, l1, l2 = parts[g]
                sl = self._sqrt_eig[g]
                h = b.basis.phi.T @ gf
                hsb = h * sqrt_s * lat
                grad[h1:h2] = h * sqrt_s
                grad[h0] += hsb.sum()
                grad[h0 + 1] += np.sum(hsb * (0.5 - 0.5 * (l1 * sl[:, 0]) ** 2))
                grad[h0 + 2] += np.sum(hsb * (0.5 - 0.5 * (l2 * sl[:, 1]) ** 2))
            else:
                sigma, l1, l2, C, Lc = parts[g]
                grad[h0] += float(gf @ fs[g])
                v = sigma * gf
                a = Lc.T @ v
                P = np.tril(np.outer(a, lat))
                P[np.diag_indices_from(P)] *= 0.5
                # Q = L^-T P L^-1
                T = linalg.solve_triangular(Lc, P.T, lower=True, trans="T", check_finite=False).T  # P L^-1
                Q = linalg.solve_triangular(Lc, T, lower=True, trans="T", check_finite=False)
                grad[h0 + 1] += float(np.sum(C * b.dist2[0] * Q)) / l1**2
                grad[h0 + 2] += float(np.sum(C * b.dist2[1] * Q)) / l2**2
                grad[h1:h2] = Lc.T @ v
            # latent prior
            lp += -0.5 * float(lat @ lat)
            grad[h1:h2] -= lat
            # sigma^2 ~ Half-Normal(0, scale): log p(u) = -e^{4u} / (2 scale^2) + 2u + const
            e4 = np.exp(4.0 * us)
            lp += -e4 / (2.0 * self.sigma2_scale**2) + 2.0 * us
            grad[h0] += -4.0 * e4 / (2.0 * self.sigma2_scale**2) + 2.0
            # ell_d ~ Inv-Gamma(alpha, beta) on the log scale
            for d, u in ((0, u1), (1, u2)):
                al, be = b.ls_prior[d]
                lp += -al * u - be * np.exp(-u)
                grad[h0 + 1 + d] += -al + be * np.exp(-u)
        return lp, grad

    def density(self, log_offset):
        """Callable ``theta -> (logp, grad)`` for a fixed sampling offset."""
        flags = {"clamped": 0}
        off = np.asarray(log_offset, dtype=float)

        def fn(theta):
            return self.logp_grad(theta, off, flags)

        fn.flags = flags
        return fn

    def initial_point(self, log_offset, rng=None, spread=0.0):
        theta = np.zeros(self.dim)
        off = np.asarray(log_offset, dtype=float)
        if self.p:
            # crude log rate per distinct design row, projected onto the intercepts
            rows, grp = np.unique(self.X, axis=0, return_inverse=True)
            grp = grp.ravel()
            tot = np.bincount(grp, weights=self.n, minlength=len(rows))
            expo = np.bincount(grp, weights=np.exp(off), minlength=len(rows))
            target = np.log((tot + 0.5) / np.maximum(expo, 1e-12))
            theta[: self.p] = np.linalg.lstsq(rows, target, rcond=None)[0]
        for g, b in enumerate(self.blocks):
            h0 = self.slices[g][0]
            theta[h0] = 0.0
            theta[h0 + 1] = np.log(invgamma_mode(*b.ls_prior[0]))
            theta[h0 + 2] = np.log(invgamma_mode(*b.ls_prior[1]))
        if rng is not None and spread > 0:
            theta += rng.uniform(-spread, spread, size=self.dim)
        return theta

    def constrained(self, theta):
        """Dict of natural-scale quantities for one unconstrained vector."""
        theta = np.asarray(theta, dtype=float)
        out = dict(zip(self.intercept_names, theta[: self.p]))
        for g, b in enumerate(self.blocks):
            h0 = self.slices[g][0]
            out[f"sigma_{b.name}"] = float(np.exp(theta[h0]))
            out[f"ell1_{b.name}"] = float(np.exp(theta[h0 + 1]))
            out[f"ell2_{b.name}"] = float(np.exp(theta[h0 + 2]))
        return out


def default_ls_prior(values, mass=0.99):
    """Inverse-gamma prior whose central mass spans [min spacing, full range] of an input axis."""
    u = np.unique(np.asarray(values, dtype=float))
    if u.size < 2:
        raise ValueError("need at least two distinct input values")
    lo = float(np.min(np.diff(u)))
    hi = float(u[-1] - u[0])
    if hi <= lo:
        hi = 2.0 * lo
    return invgamma_from_quantiles(lo, hi, mass)


def build_flow_gp(
    counts: FlowCounts,
    prior="hsgp",
    m=30,
    boundary_factor=1.25,
    scheme="centered",
    intercepts="auto",
    gp_blocks="direction",
    ls_priors=None,
    jitter=1e-6,
):
    """Build a :class:`FlowGPModel` from counts on an age-structured strata space.

    Every stratum needs an integer ``age``.  GP blocks are keyed by the
    gender pair (``"MF"``, ``"FM"``; ``"UU"`` without gender), optionally
    split further by location pair with ``gp_blocks="direction_location"``.
    ``intercepts="per_block"`` gives one intercept per (direction, source
    location, recipient location); ``"mu_nu"`` gives a baseline ``mu`` plus a
    male-to-female offset ``nu``; ``"auto"`` picks ``per_block`` whenever
    locations are present.  ``ls_priors`` maps block name to
    ``((alpha1, beta1), (alpha2, beta2))``.
    """
    space = counts.space
    for s in space.strata:
        if not isinstance(s.age, (int, np.integer)):
            raise StrataError(f"stratum {s.id!r} needs an integer age for the GP model")
    has_loc = any(s.location is not None for s in space.strata)
    if intercepts == "auto":
        intercepts = "per_block" if has_loc else "mu_nu"
    block_key, icpt_key, inputs = [], [], []
    for a, b in space.pairs:
        sa, sb = space.strata[a], space.strata[b]
        direction = sa.gender + sb.gender
        loc = f"{sa.location}->{sb.location}"
        block_key.append(direction if gp_blocks == "direction" else f"{direction}_{loc.replace('->', '_')}")
        icpt_key.append(f"mu[{direction}:{loc}]" if intercepts == "per_block" else direction)
        inputs.append((int(sa.age), int(sb.age)))
    if gp_blocks not in ("direction", "direction_location"):
        raise ValueError(f"unknown gp_blocks {gp_blocks!r}")
    inputs = np.array(inputs, dtype=float)
    names = list(dict.fromkeys(block_key))
    blocks = []
    cell_block = np.empty(space.L, dtype=np.int64)
    cell_input = np.empty(space.L, dtype=np.int64)
    for g, name in enumerate(names):
        cells = np.array([k for k, key in enumerate(block_key) if key == name])
        uniq, inv = np.unique(inputs[cells], axis=0, return_inverse=True)
        cell_block[cells] = g
        cell_input[cells] = inv.ravel()
        if ls_priors and name in ls_priors:
            lsp = tuple(tuple(p) for p in ls_priors[name])
        else:
            lsp = (default_ls_prior(uniq[:, 0]), default_ls_prior(uniq[:, 1]))
        basis = basis_for_inputs(uniq, m, boundary_factor, scheme) if prior == "hsgp" else None
        blocks.append(GpBlock(name, uniq, lsp, basis))
    if intercepts == "per_block":
        inames = list(dict.fromkeys(icpt_key))
        X = np.zeros((space.L, len(inames)))
        X[np.arange(space.L), [inames.index(k) for k in icpt_key]] = 1.0
    elif intercepts == "mu_nu":
        X = np.ones((space.L, 1))
        inames = ["mu"]
        if "MF" in icpt_key and len(set(icpt_key)) > 1:
            X = np.column_stack([X, [1.0 if k == "MF" else 0.0 for k in icpt_key]])
            inames.append("nu")
    else:
        raise ValueError(f"unknown intercept structure {intercepts!r}")
    return FlowGPModel(
        counts.values,
        cell_block,
        cell_input,
        blocks,
        X,
        inames,
        prior=prior,
        jitter=jitter,
        cell_names=space.cell_names("lambda"),
    )


def _xi_offsets(space, sampling: SamplingSpec | None, chains, seed):
    """Per-chain log offsets from one plug-in draw of xi per chain."""
    offs, xis = [], []
    for c in range(chains):
        if sampling is None:
            xs = np.ones(space.A)
            xr = xs
        elif sampling.is_fixed:
            xs, xr = sampling.point()
        else:
            xs, xr = sampling.draw(stream(seed, 100_000 + c))
        w = xs[space.pairs[:, 0]] * xr[space.pairs[:, 1]]
        if np.any(w <= 0):
            raise ValueError("plug-in sampling probabilities must be positive")
        offs.append(np.log(w))
        xis.append((np.asarray(xs, dtype=float), np.asarray(xr, dtype=float)))
    return offs, xis


def hmc_fit(
    model: FlowGPModel,
    space=None,
    sampling: SamplingSpec | None = None,
    chains=4,
    warmup=500,
    iterations=500,
    seed=0,
    target_accept=0.8,
    n_steps=16,
    threads=1,
    keep_latent=False,
    log_offsets=None,
):
    """Sample the GP flow model by static HMC; returns :class:`PosteriorDraws`.

    One plug-in draw of ``xi`` is fixed per chain (from ``sampling``), or
    ``log_offsets`` (one array per chain, or one shared array) may be given
    directly.  Returned parameters: intercepts, ``sigma_*``, ``ell1_*``,
    ``ell2_*``, ``lambda[...]``, ``pi[...]`` and, with ``keep_latent``, the
    unconstrained vector.
    """
    t0 = time.perf_counter()
    if log_offsets is not None:
        lo = np.asarray(log_offsets, dtype=float)
        offs = [lo] * chains if lo.ndim == 1 else list(lo)
        xis = None
    else:
        if space is None:
            raise ValueError("space is required to turn sampling probabilities into offsets")
        offs, xis = _xi_offsets(space, sampling, chains, seed)
    fns = [model.density(o) for o in offs]
    inits = [model.initial_point(o, stream(seed, 200_000 + c), spread=0.1) for c, o in enumerate(offs)]
    cfg = hmc.HmcConfig(warmup=warmup, iterations=iterations, n_steps=n_steps, target_accept=target_accept)
    res = hmc.sample(fns, inits, seed, cfg, threads=threads)
    raw = np.stack([r["samples"] for r in res])  # chains, iters, dim
    C, T, D = raw.shape
    flat = raw.reshape(-1, D)
    loglam = np.array([model.log_intensity(t) for t in flat])
    lam = np.exp(np.clip(loglam, -CLAMP, CLAMP))
    pi = lam / lam.sum(axis=1, keepdims=True)
    cols = [flat[:, : model.p]]
    names = list(model.intercept_names)
    for g, b in enumerate(model.blocks):
        h0 = model.slices[g][0]
        cols.append(np.exp(flat[:, h0 : h0 + 3]))
        names += [f"sigma_{b.name}", f"ell1_{b.name}", f"ell2_{b.name}"]
    cols += [lam, pi]
    cell_labels = [n[len("lambda") :] for n in model.cell_names]
    names += [f"lambda{c}" for c in cell_labels] + [f"pi{c}" for c in cell_labels]
    if keep_latent:
        cols.append(flat)
        names += [f"u:{n}" for n in model.parameter_names()]
    vals = np.concatenate(cols, axis=1).reshape(C, T, -1)
    stats = {
        "sampler": "hmc",
        "prior": model.prior,
        "divergent": np.array([r["divergent"].sum() for r in res]),
        "warmup_divergent": np.array([r["warmup_divergent"] for r in res]),
        "accept": np.array([r["accept"].mean() for r in res]),
        "step_size": np.array([r["step_size"] for r in res]),
        "clamped": np.array([f.flags["clamped"] for f in fns]),
        "xi": xis,
        "seconds": time.perf_counter() - t0,
    }
    return PosteriorDraws(names, vals, stats)
