"""Metropolis-within-Gibbs sampler for the Gamma-prior Poisson flow model.

Model, for every unmasked pair ``(a, b)``::

    n_ab ~ Poisson(lambda_ab * xi_S[a] * xi_R[b])
    lambda_ab ~ Gamma(alpha_ab, beta)
    pi = lambda / sum(lambda)

The default prior is ``alpha_ab = 0.8 / L`` and ``beta = 0.8 / Z(xi)``
where ``Z`` is :func:`strataflows.strata.expected_total`, so the implied
Dirichlet prior on ``pi`` has total concentration 0.8 and the prior mean of
``sum(lambda)`` matches the expected number of events.  Because ``beta``
depends on every ``xi``, the Metropolis step for one stratum includes the
Gamma prior density of all ``lambda`` cells.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .._rng import stream
from ..sampling import FixedXi, SamplingSpec
from ..strata import FlowCounts, expected_total
from .draws import PosteriorDraws

log = logging.getLogger(__name__)


class GibbsError(RuntimeError):
    pass


class ZeroSupportError(ValueError):
    pass


class GammaFlowModel:
    def __init__(self, counts: FlowCounts, sampling: SamplingSpec | None = None, alpha=None, beta=None):
        space = counts.space
        self.counts = counts
        self.space = space
        if sampling is None:
            sampling = SamplingSpec(space, FixedXi(1.0))
        if sampling.space != space:
            raise ValueError("sampling spec defined on a different strata space")
        self.sampling = sampling
        L = space.L
        self.alpha = np.broadcast_to(
            np.asarray(0.8 / L if alpha is None else alpha, dtype=float), (L,)
        ).copy()
        if np.any(self.alpha <= 0):
            raise ValueError("prior shapes must be positive")
        self.fixed_beta = None if beta is None else float(beta)
        if self.fixed_beta is not None and self.fixed_beta < 0:
            raise ValueError("prior rate must be non-negative")
        zero = [
            sid
            for i, sid in enumerate(space.ids)
            for d in ((sampling.source[i],) + ((sampling.recipient[i],) if sampling.recipient else ()))
            if d.can_be_zero()
        ]
        if zero:
            raise ZeroSupportError(f"sampling distributions put mass on 0 for strata {sorted(set(zero))}")
        # cells touching each stratum in each role
        self.src_cells = [np.nonzero(space.pairs[:, 0] == a)[0] for a in range(space.A)]
        self.rec_cells = [np.nonzero(space.pairs[:, 1] == a)[0] for a in range(space.A)]

    @property
    def dynamic_beta(self):
        return self.fixed_beta is None

    def rate(self, xs, xr):
        if self.fixed_beta is not None:
            return self.fixed_beta
        return 0.8 / expected_total(self.counts, xs, xr)

    def parameter_names(self):
        sp = self.space
        return (
            sp.cell_names("lambda")
            + sp.cell_names("pi")
            + [f"xi_S[{s}]" for s in sp.ids]
            + [f"xi_R[{s}]" for s in sp.ids]
            + ["beta"]
        )


def _loglik_cells(n, lam, w):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(n > 0, n * np.log(lam * w), 0.0) - lam * w


def _chain(model: GammaFlowModel, rng, warmup, iterations):
    sp = model.space
    n = model.counts.values.astype(float)
    alpha = model.alpha
    pairs = sp.pairs
    spec = model.sampling
    stochastic = not spec.is_fixed
    xs, xr = spec.point()
    xs, xr = xs.copy(), xr.copy()
    if stochastic:
        xs, xr = spec.draw(rng)
        xs, xr = np.array(xs, dtype=float), np.array(xr, dtype=float)
        if spec.shared:
            xr = xs
    w = xs[pairs[:, 0]] * xr[pairs[:, 1]]
    beta = model.rate(xs, xr)
    lam = (n + alpha) / (w + beta)
    A = sp.A
    sum_alpha = alpha.sum()
    out = np.empty((iterations, 2 * sp.L + 2 * A + 1))
    acc = np.zeros(2 * A)
    tried = np.zeros(2 * A)
    roles = [("S", model.src_cells)] if spec.shared else [("S", model.src_cells), ("R", model.rec_cells)]
    for it in range(warmup + iterations):
        if stochastic:
            for role_i, (role, cells_of) in enumerate(roles):
                dists = spec.source if role == "S" else spec.recipient
                for a in range(A):
                    d = dists[a]
                    if d.fixed:
                        continue
                    prop = float(d.sample(rng))
                    if spec.shared:
                        cells = np.union1d(model.src_cells[a], model.rec_cells[a])
                        xs_new = xs.copy()
                        xs_new[a] = prop
                        xr_new = xs_new
                    elif role == "S":
                        cells = cells_of[a]
                        xs_new = xs.copy()
                        xs_new[a] = prop
                        xr_new = xr
                    else:
                        cells = cells_of[a]
                        xr_new = xr.copy()
                        xr_new[a] = prop
                        xs_new = xs
                    w_new_c = xs_new[pairs[cells, 0]] * xr_new[pairs[cells, 1]]
                    dl = np.sum(_loglik_cells(n[cells], lam[cells], w_new_c)) - np.sum(
                        _loglik_cells(n[cells], lam[cells], w[cells])
                    )
                    if model.dynamic_beta:
                        if np.any(w_new_c <= 0):
                            beta_new = np.nan
                            dl = -np.inf
                        else:
                            beta_new = model.rate(xs_new, xr_new)
                            lam_sum = lam.sum()
                            dl += sum_alpha * (np.log(beta_new) - np.log(beta)) - (beta_new - beta) * lam_sum
                    else:
                        beta_new = beta
                    if np.isnan(dl):
                        raise GibbsError(
                            f"non-finite acceptance ratio for xi_{role}[{sp.ids[a]}]: "
                            f"proposal={prop}, xi_S={xs.tolist()}, xi_R={xr.tolist()}, beta={beta}"
                        )
                    k = role_i * A + a
                    tried[k] += 1
                    if np.log(rng.random()) < dl:
                        acc[k] += 1
                        xs, xr = xs_new, xr_new
                        w = w.copy()
                        w[cells] = w_new_c
                        beta = beta_new
        lam = rng.gamma(n + alpha, 1.0 / (w + beta))
        if it >= warmup:
            row = out[it - warmup]
            L = sp.L
            row[:L] = lam
            tot = lam.sum()
            row[L : 2 * L] = lam / tot if tot > 0 else np.nan
            row[2 * L : 2 * L + A] = xs
            row[2 * L + A : 2 * L + 2 * A] = xr
            row[-1] = beta
    with np.errstate(invalid="ignore"):
        rate = np.where(tried > 0, acc / np.maximum(tried, 1), np.nan)
    return out, rate


def gibbs_fit(model: GammaFlowModel, chains=4, warmup=500, iterations=1000, seed=0, threads=1):
    """Sample lambda, pi and xi; chain ``c`` uses the stream keyed by ``(seed, c)``."""
    if model.counts.total == 0 and model.fixed_beta == 0:
        raise GibbsError("posterior improper: no counts and a zero prior rate")
    if iterations < 1:
        raise ValueError("need at least one post-warmup iteration")

    def one(c):
        return _chain(model, stream(seed, c), warmup, iterations)

    if threads > 1 and chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            res = list(ex.map(one, range(chains)))
    else:
        res = [one(c) for c in range(chains)]
    vals = np.stack([r[0] for r in res])
    acc = np.stack([r[1] for r in res])
    return PosteriorDraws(model.parameter_names(), vals, {"xi_acceptance": acc, "sampler": "gibbs"})
