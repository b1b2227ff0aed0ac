"""Static-trajectory Hamiltonian Monte Carlo with warmup adaptation.

The engine samples an unnormalised log density on R^d given a callable
returning ``(logp, grad)``.  Warmup follows the usual windowed scheme: an
initial fast window tunes only the step size, a series of doubling slow
windows estimate a diagonal inverse metric from the draws, and a final fast
window re-tunes the step size for the final metric.  Step size is tuned by
dual averaging toward a target acceptance statistic.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .._rng import stream


class SamplerError(RuntimeError):
    """Fatal sampler failure; carries the offending parameter vector."""

    def __init__(self, msg, params=None):
        super().__init__(msg)
        self.params = None if params is None else np.array(params)


@dataclass
class HmcConfig:
    warmup: int = 500
    iterations: int = 500
    n_steps: int = 16
    target_accept: float = 0.8
    init_step_size: float = 0.1
    max_energy_error: float = 1000.0
    step_jitter: float = 0.1
    adapt_metric: bool = True


class _DualAveraging:
    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h = 0.0
        self.t = 0
        self.log_eps_bar = np.log(eps0)
        self.log_eps = np.log(eps0)

    def update(self, accept_stat):
        self.t += 1
        t = self.t
        w = 1.0 / (t + self.t0)
        self.h = (1 - w) * self.h + w * (self.target - accept_stat)
        self.log_eps = self.mu - np.sqrt(t) / self.gamma * self.h
        eta = t ** (-self.kappa)
        self.log_eps_bar = eta * self.log_eps + (1 - eta) * self.log_eps_bar
        return np.exp(self.log_eps)

    @property
    def final(self):
        return float(np.exp(self.log_eps_bar))


def _windows(warmup):
    """Boundaries (start, end) of slow metric windows for a warmup length."""
    if warmup < 20:
        return []
    init = int(0.15 * warmup)
    term = int(0.1 * warmup)
    base = max(25, int(0.05 * warmup)) if warmup >= 150 else max(5, (warmup - init - term) // 3)
    wins = []
    start = init
    size = base
    end_slow = warmup - term
    while start < end_slow:
        end = start + size
        if end + 2 * size > end_slow:
            end = end_slow
        wins.append((start, end))
        start = end
        size *= 2
    return wins


def leapfrog(logp_grad, x, p, grad, eps, n_steps, inv_metric):
    """Run ``n_steps`` leapfrog steps; returns (x, p, logp, grad) or logp=-inf on failure.

    A trajectory that overflows (non-finite density or gradient) is reported as
    a failure so the caller can count it as a divergence and reject it.
    """
    p = p + 0.5 * eps * grad
    lp = -np.inf
    for i in range(n_steps):
        x = x + eps * inv_metric * p
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lp, grad = logp_grad(x)
        if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
            return x, p, -np.inf, grad
        if i < n_steps - 1:
            p = p + eps * grad
    p = p + 0.5 * eps * grad
    return x, p, lp, grad


def _energy(lp, p, inv_metric):
    return -lp + 0.5 * np.sum(inv_metric * p * p)


def _reasonable_step(logp_grad, x, lp, grad, eps, inv_metric, rng):
    """Double or halve ``eps`` until a single leapfrog step crosses acceptance 1/2."""
    d = x.size
    p = rng.standard_normal(d) / np.sqrt(inv_metric)
    H0 = _energy(lp, p, inv_metric)

    def log_accept(e):
        x1, p1, lp1, _ = leapfrog(logp_grad, x, p, grad, e, 1, inv_metric)
        if not np.isfinite(lp1):
            return -np.inf
        return H0 - _energy(lp1, p1, inv_metric)

    la = log_accept(eps)
    direction = 1.0 if la > np.log(0.5) else -1.0
    for _ in range(50):
        e_new = eps * 2.0**direction
        la = log_accept(e_new)
        if direction > 0 and not la > np.log(0.5):
            break
        eps = e_new
        if direction < 0 and la > np.log(0.5):
            break
    return float(eps)


def run_chain(logp_grad, x0, rng, cfg: HmcConfig, inv_metric=None, step_size=None):
    """Run one chain. Returns a dict with samples and per-iteration statistics."""
    x = np.array(x0, dtype=float)
    d = x.size
    lp, grad = logp_grad(x)
    if not np.isfinite(lp):
        raise SamplerError("initial point has non-finite log density", x)
    if not np.all(np.isfinite(grad)):
        raise SamplerError("non-finite gradient at the initial point", x)
    inv_metric = np.ones(d) if inv_metric is None else np.array(inv_metric, dtype=float)
    eps = cfg.init_step_size if step_size is None else float(step_size)
    windows = _windows(cfg.warmup) if cfg.adapt_metric else []
    win_ends = {e: s for s, e in windows}
    if step_size is None and cfg.warmup > 0:
        eps = _reasonable_step(logp_grad, x, lp, grad, eps, inv_metric, rng)
    da = _DualAveraging(eps, cfg.target_accept)
    win_buf = []

    total = cfg.warmup + cfg.iterations
    samples = np.empty((cfg.iterations, d))
    accept = np.empty(total)
    divergent = np.zeros(total, dtype=bool)
    for it in range(total):
        warm = it < cfg.warmup
        e = eps * (1.0 + cfg.step_jitter * (2.0 * rng.random() - 1.0)) if cfg.step_jitter else eps
        p0 = rng.standard_normal(d) / np.sqrt(inv_metric)
        H0 = _energy(lp, p0, inv_metric)
        x1, p1, lp1, g1 = leapfrog(logp_grad, x, p0, grad, e, cfg.n_steps, inv_metric)
        if np.isfinite(lp1):
            H1 = _energy(lp1, p1, inv_metric)
            dH = H1 - H0
        else:
            dH = np.inf
        if not np.isfinite(dH) or abs(dH) > cfg.max_energy_error * (1.0 + abs(H0) * 1e-8):
            divergent[it] = True
            a = 0.0
        else:
            a = float(min(1.0, np.exp(-dH)))
            if rng.random() < a:
                x, lp, grad = x1, lp1, g1
        accept[it] = a
        if warm:
            eps = da.update(a)
            if windows and windows[0][0] <= it:
                win_buf.append(x.copy())
            if it + 1 in win_ends:
                arr = np.array(win_buf)
                n = len(arr)
                if n > 2:
                    var = arr.var(axis=0, ddof=1)
                    inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                win_buf = []
                eps = _reasonable_step(logp_grad, x, lp, grad, eps, inv_metric, rng)
                da = _DualAveraging(eps, cfg.target_accept)
            if it == cfg.warmup - 1:
                eps = da.final
        else:
            samples[it - cfg.warmup] = x
    return {
        "samples": samples,
        "accept": accept[cfg.warmup :],
        "divergent": divergent[cfg.warmup :],
        "warmup_divergent": int(divergent[: cfg.warmup].sum()),
        "step_size": eps,
        "inv_metric": inv_metric,
    }


def sample(logp_grad, inits, seed, cfg: HmcConfig | None = None, threads=1, chain_offset=0):
    """Run independent chains from ``inits`` (list of start vectors).

    Chain ``c`` draws its randomness from the stream keyed by
    ``(seed, chain_offset + c)``, so results do not depend on ``threads``.
    ``logp_grad`` may also be a list with one callable per chain.
    """
    cfg = cfg or HmcConfig()
    fns = logp_grad if isinstance(logp_grad, (list, tuple)) else [logp_grad] * len(inits)

    def one(c):
        return run_chain(fns[c], inits[c], stream(seed, chain_offset + c), cfg)

    if threads > 1 and len(inits) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(one, range(len(inits))))
    else:
        out = [one(c) for c in range(len(inits))]
    return out
