"""Rank-normalised split-Rhat and bulk effective sample size."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class Diagnostic:
    rhat: float | None
    ess_bulk: float | None
    note: str = ""

    @property
    def defined(self):
        return self.rhat is not None


def _split(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[1]
    half = n // 2
    if half < 2:
        raise ValueError("need at least 4 iterations per chain to split")
    # drop the middle draw when the length is odd
    return np.concatenate([x[:, :half], x[:, n - half :]], axis=0)


def _rank_normalize(x):
    r = stats.rankdata(x, method="average").reshape(x.shape)
    S = x.size
    return stats.norm.ppf((r - 0.375) / (S + 0.25))


def _rhat(x):
    M, N = x.shape
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = N * means.var(ddof=1)
    var_plus = (N - 1) / N * W + B / N
    return float(np.sqrt(var_plus / W))


def _autocov(x):
    """Autocovariance of each row via FFT (biased, lag 0..N-1)."""
    M, N = x.shape
    nfft = 1 << int(np.ceil(np.log2(2 * N)))
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, n=nfft, axis=1)
    ac = np.fft.irfft(f * np.conj(f), n=nfft, axis=1)[:, :N]
    return ac / N


def _ess(x):
    """Multi-chain ESS with Geyer's initial monotone sequence (Stan's estimator)."""
    M, N = x.shape
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    chain_var = acov[:, 0] * N / (N - 1)
    W = chain_var.mean()
    var_plus = W * (N - 1) / N
    if M > 1:
        var_plus += chain_mean.var(ddof=1)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums P_k = rho_{2k} + rho_{2k+1}, truncated at the first negative
    t = 0
    P = []
    while 2 * t + 1 < N:
        p = rho[2 * t] + rho[2 * t + 1]
        if p < 0:
            break
        P.append(p)
        t += 1
    P = np.minimum.accumulate(np.array(P)) if P else np.array([1.0])
    tau = -1.0 + 2.0 * P.sum()
    tau = max(tau, 1.0 / np.log10(M * N))
    return float(M * N / tau)


def diagnose(x):
    """Split-Rhat (max of bulk and folded) and bulk ESS for ``(chains, iters)`` draws."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if not np.all(np.isfinite(x)):
        return Diagnostic(None, None, "non-finite draws")
    s = _split(x)
    if np.ptp(s) == 0:
        return Diagnostic(None, None, "constant draws: Rhat undefined")
    if np.all(np.ptp(s, axis=1) == 0):
        # every split chain is constant but at different values
        return Diagnostic(float("inf"), None, "constant chains at different values")
    z = _rank_normalize(s)
    folded = _rank_normalize(np.abs(s - np.median(s)))
    r = max(_rhat(z), _rhat(folded))
    return Diagnostic(r, _ess(z))


def diagnostics(draws, names=None):
    """Per-parameter :class:`Diagnostic` for a :class:`PosteriorDraws`."""
    names = draws.names if names is None else [n for p in names for n in _expand(draws, p)]
    return {n: diagnose(draws.get(n)) for n in names}


def _expand(draws, name):
    return [name] if name in draws.names else draws.block_names(name)
