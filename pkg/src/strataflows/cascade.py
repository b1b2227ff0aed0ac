"""Per-stratum sampling probabilities from census-style count data.

A stage records, per stratum, how many of ``N_a`` eligible individuals
passed the stage (``N^s_a``).  Stage probabilities are estimated either with
closed-form Beta posteriors or with a Beta-Binomial logistic regression, and
multiplied along the cascade (participation, then sequencing) to give the
overall source and recipient sampling probabilities.

The Beta-Binomial is parametrised by its mean ``xi`` and dispersion
``gamma >= 0`` through shapes ``a = xi / gamma`` and ``b = (1 - xi) / gamma``
(``gamma = 0`` is the Binomial limit), so that
``Var(k) = N xi (1 - xi) (1 + (N - 1) gamma / (1 + gamma))``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from ._rng import stream
from .inference import hmc
from .inference.draws import PosteriorDraws

STAGES = ("participation", "sequencing-source", "sequencing-recipient")
SEPARATION_BOUND = 20.0
SMALL_GAMMA = 1e-4
# log-scale hyperparameters beyond this are treated as outside the support
HYPER_LIMIT = 20.0


class CascadeError(ValueError):
    pass


class RankDeficientError(CascadeError):
    pass


@dataclass
class StageCounts:
    """Trials and successes per stratum for one cascade stage."""

    ids: list
    trials: np.ndarray
    successes: np.ndarray
    stage: str = "participation"
    role: str | None = None

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.trials = np.asarray(self.trials)
        self.successes = np.asarray(self.successes)
        for name, v in (("trials", self.trials), ("successes", self.successes)):
            if v.shape != (len(self.ids),):
                raise CascadeError(f"{name} must have one entry per stratum")
            if np.any(v != np.round(v)):
                raise CascadeError(f"{name} must be integers")
        self.trials = self.trials.astype(np.int64)
        self.successes = self.successes.astype(np.int64)
        if len(set(self.ids)) != len(self.ids):
            raise CascadeError("duplicate stratum ids")
        bad = (self.successes < 0) | (self.successes > self.trials)
        if np.any(bad):
            raise CascadeError(f"need 0 <= successes <= trials (strata {np.array(self.ids)[bad].tolist()})")

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        idx = np.asarray(idx)
        return StageCounts([self.ids[i] for i in idx], self.trials[idx], self.successes[idx], self.stage, self.role)


# ---------------------------------------------------------------------------
# closed form


@dataclass
class BetaPosterior:
    ids: list
    a: np.ndarray
    b: np.ndarray

    @property
    def mean(self):
        return self.a / (self.a + self.b)

    def draws(self, rng, n):
        """``(n, A)`` Monte Carlo draws."""
        return rng.beta(self.a, self.b, size=(n, len(self.ids)))


def beta_posterior(stage: StageCounts, alpha=0.5, beta=0.5):
    """Per-stratum ``Beta(N^s + alpha, N - N^s + beta)`` (Jeffreys prior by default)."""
    return BetaPosterior(
        list(stage.ids), stage.successes + float(alpha), (stage.trials - stage.successes) + float(beta)
    )


# ---------------------------------------------------------------------------
# Beta-Binomial likelihood


def _bb_terms(k, N, xi, gamma, want_grad=True):
    """Per-stratum Beta-Binomial log pmf (without the binomial coefficient).

    Returns ``(logp, d/dxi, d/dgamma)``.  For small ``gamma`` the product
    form ``prod_j (xi + j g) prod_j (1 - xi + j g) / prod_j (1 + j g)`` is
    used, which is exact at ``gamma = 0`` and avoids cancellation between
    huge log-gamma values; otherwise (or for very large trial counts) the
    log-gamma form is used.
    """
    k = np.asarray(k)
    N = np.asarray(N)
    xi = np.asarray(xi, dtype=float)
    if gamma == 0:
        lp = special.xlogy(k, xi) + special.xlog1py(N - k, -xi)
        with np.errstate(divide="ignore", invalid="ignore"):
            dxi = np.where(k > 0, k / xi, 0.0) - np.where(N - k > 0, (N - k) / (1 - xi), 0.0)
        dg = np.zeros_like(xi)
        if want_grad:
            # d/dgamma at 0: sum_j j/xi + sum_j j/(1-xi) - sum_j j
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = np.where(k > 1, 0.5 * k * (k - 1) / xi, 0.0)
                t2 = np.where(N - k > 1, 0.5 * (N - k) * (N - k - 1) / (1 - xi), 0.0)
            dg = t1 + t2 - 0.5 * N * (N - 1)
        return lp, dxi, dg
    nmax = int(N.max()) if N.size else 0
    if gamma < SMALL_GAMMA and nmax <= 5000:
        J = np.arange(max(nmax, 1), dtype=float)[None, :]
        mk = J < k[:, None]
        mnk = J < (N - k)[:, None]
        mn = J < N[:, None]
        u1 = xi[:, None] + J * gamma
        u2 = (1.0 - xi)[:, None] + J * gamma
        u3 = np.broadcast_to(1.0 + J * gamma, u1.shape)
        lp = (
            np.sum(np.log(u1, where=mk, out=np.zeros_like(u1)), axis=1)
            + np.sum(np.log(u2, where=mnk, out=np.zeros_like(u2)), axis=1)
            - np.sum(np.log(u3, where=mn, out=np.zeros_like(u3)), axis=1)
        )
        if not want_grad:
            return lp, None, None
        r1 = np.divide(1.0, u1, where=mk, out=np.zeros_like(u1))
        r2 = np.divide(1.0, u2, where=mnk, out=np.zeros_like(u2))
        r3 = np.divide(1.0, u3, where=mn, out=np.zeros_like(u3))
        dxi = r1.sum(axis=1) - r2.sum(axis=1)
        dg = (r1 * J).sum(axis=1) + (r2 * J).sum(axis=1) - (r3 * J).sum(axis=1)
        return lp, dxi, dg
    a = xi / gamma
    b = (1.0 - xi) / gamma
    lp = special.betaln(k + a, N - k + b) - special.betaln(a, b)
    if not want_grad:
        return lp, None, None
    da = special.digamma(k + a) - special.digamma(N + a + b) - special.digamma(a) + special.digamma(a + b)
    db = special.digamma(N - k + b) - special.digamma(N + a + b) - special.digamma(b) + special.digamma(a + b)
    dxi = (da - db) / gamma
    dg = -(a * da + b * db) / gamma
    return lp, dxi, dg


def log_binom(N, k):
    return special.gammaln(N + 1) - special.gammaln(k + 1) - special.gammaln(N - k + 1)


def betabinom_logpmf(k, N, xi, gamma):
    """Beta-Binomial log pmf in the (mean, dispersion) parametrisation."""
    k, N = np.atleast_1d(k), np.atleast_1d(N)
    xi = np.broadcast_to(np.asarray(xi, dtype=float), k.shape)
    return log_binom(N, k) + _bb_terms(k, N, xi, float(gamma), want_grad=False)[0]


def betabinom_draw(rng, N, xi, gamma):
    """Draw counts from the Beta-Binomial (``xi`` may have a leading draw axis)."""
    N = np.asarray(N)
    xi = np.asarray(xi, dtype=float)
    if xi.ndim < N.ndim:
        xi = np.broadcast_to(xi, np.broadcast_shapes(xi.shape, N.shape))
    gamma = np.asarray(gamma, dtype=float)
    g = np.broadcast_to(gamma.reshape(gamma.shape + (1,) * (xi.ndim - gamma.ndim)), xi.shape)
    p = xi.copy()
    pos = g > 0
    if np.any(pos):
        p[pos] = rng.beta(xi[pos] / g[pos], (1.0 - xi[pos]) / g[pos])
    return rng.binomial(np.broadcast_to(N, xi.shape), p)


# ---------------------------------------------------------------------------
# regression model


@dataclass
class BetaBinomialModel:
    """Logistic Beta-Binomial regression for stage probabilities.

    ``xi_a = logit^-1(beta0 + X[a] @ beta)``.  ``gamma`` is ``"free"`` (with
    an ``Exp(1)`` prior) or a fixed non-negative value; ``0`` gives the
    Binomial.  ``icar_blocks`` lists ordered column-index groups (e.g. age
    contrasts against a reference age) whose coefficient path, anchored at
    zero for the reference level, gets a first-order random-walk prior with
    scale ``sigma ~ Half-Normal(0, 1)``; other coefficients get
    ``N(0, beta_var)``.
    """

    X: np.ndarray
    columns: list | None = None
    gamma: float | str = "free"
    icar_blocks: list = field(default_factory=list)
    intercept_var: float = 100.0
    beta_var: float = 10.0
    icar_scale: float = 1.0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        p = self.X.shape[1]
        self.columns = [f"x{j}" for j in range(p)] if self.columns is None else list(self.columns)
        if len(self.columns) != p:
            raise CascadeError("one name per design column required")
        if self.gamma != "free" and not float(self.gamma) >= 0:
            raise CascadeError("gamma must be 'free' or a non-negative number")
        seen = set()
        self.icar_blocks = [list(map(int, b)) for b in self.icar_blocks]
        for b in self.icar_blocks:
            if len(b) < 1 or seen & set(b) or min(b) < 0 or max(b) >= p:
                raise CascadeError("ICAR blocks must be disjoint, non-empty sets of valid columns")
            seen |= set(b)
        self._free = np.array([j for j in range(p) if j not in seen], dtype=np.int64)

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def free_gamma(self):
        return self.gamma == "free"

    @property
    def dim(self):
        return 1 + self.p + int(self.free_gamma) + len(self.icar_blocks)

    def check_rank(self):
        Z = np.column_stack([np.ones(len(self.X)), self.X])
        r = np.linalg.matrix_rank(Z)
        if r < Z.shape[1]:
            raise RankDeficientError(f"design has rank {r} < {Z.shape[1]} columns (including the intercept)")

    def parameter_names(self):
        names = ["beta0"] + [f"beta[{c}]" for c in self.columns]
        if self.free_gamma:
            names.append("log_gamma")
        names += [f"log_sigma_icar[{i}]" for i in range(len(self.icar_blocks))]
        return names

    def unpack(self, theta):
        b0 = theta[0]
        b = theta[1 : 1 + self.p]
        j = 1 + self.p
        if self.free_gamma:
            ug = theta[j]
            j += 1
        else:
            ug = None
        return b0, b, ug, theta[j:]

    def log_prior(self, theta):
        lp, g = 0.0, np.zeros_like(theta)
        b0, b, ug, us = self.unpack(theta)
        lp += -0.5 * b0**2 / self.intercept_var
        g[0] = -b0 / self.intercept_var
        bf = b[self._free]
        lp += -0.5 * float(bf @ bf) / self.beta_var
        g[1 + self._free] = -bf / self.beta_var
        j = 1 + self.p
        if ug is not None:
            # gamma ~ Exp(1) on the log scale (with Jacobian)
            lp += -np.exp(ug) + ug
            g[j] = -np.exp(ug) + 1.0
            j += 1
        for i, (blk, u) in enumerate(zip(self.icar_blocks, us)):
            path = np.concatenate([[0.0], b[blk]])
            d = np.diff(path)
            s2 = np.exp(2 * u)
            K = len(blk)
            lp += -K * u - 0.5 * float(d @ d) / s2
            # d/d path_i of -0.5 sum d^2 = d_{i} - d_{i+1} (d_i = path_i - path_{i-1})
            gp = np.zeros(K + 1)
            gp[1:] -= d / s2
            gp[:-1] += d / s2
            g[1 + np.array(blk)] += gp[1:]
            g[j + i] += -K + float(d @ d) / s2
            # sigma ~ Half-Normal(0, icar_scale) on the log scale
            lp += -0.5 * s2 / self.icar_scale**2 + u
            g[j + i] += -s2 / self.icar_scale**2 + 1.0
        return lp, g

    def gamma_value(self, theta):
        return float(np.exp(self.unpack(theta)[2])) if self.free_gamma else float(self.gamma)

    def xi(self, theta, X=None):
        b0, b, _, _ = self.unpack(theta)
        X = self.X if X is None else X
        return special.expit(b0 + X @ b)

    def logp_grad(self, theta, stage: StageCounts):
        theta = np.asarray(theta, dtype=float)
        if np.any(np.abs(theta[1 + self.p :]) > HYPER_LIMIT):
            return -np.inf, np.zeros_like(theta)
        lp, g = self.log_prior(theta)
        if not np.isfinite(lp):
            return -np.inf, g
        b0, b, ug, _ = self.unpack(theta)
        eta = b0 + self.X @ b
        xi = special.expit(eta)
        gam = float(np.exp(ug)) if ug is not None else float(self.gamma)
        if not (np.all(xi > 0) and np.all(xi < 1)) or not np.isfinite(gam):
            return -np.inf, g
        ll, dxi, dg = _bb_terms(stage.successes, stage.trials, xi, gam, want_grad=True)
        lp += float(ll.sum())
        deta = dxi * xi * (1.0 - xi)
        g[0] += deta.sum()
        g[1 : 1 + self.p] += self.X.T @ deta
        if ug is not None:
            g[1 + self.p] += float(dg.sum()) * gam
        return lp, g

    def initial_point(self, stage: StageCounts):
        theta = np.zeros(self.dim)
        rate = (stage.successes.sum() + 0.5) / (stage.trials.sum() + 1.0)
        theta[0] = special.logit(rate)
        j = 1 + self.p
        if self.free_gamma:
            theta[j] = np.log(0.05)
            j += 1
        theta[j:] = np.log(0.3)
        return theta


def fit_betabinomial(
    model: BetaBinomialModel,
    stage: StageCounts,
    chains=4,
    warmup=500,
    iterations=500,
    seed=0,
    n_steps=16,
    target_accept=0.8,
    threads=1,
    check_rank=True,
):
    """HMC posterior of a :class:`BetaBinomialModel`.

    Returns :class:`PosteriorDraws` with ``beta0``, ``beta[...]``, ``gamma``,
    ``sigma_icar[...]`` and per-stratum ``xi[...]``.  ``stats["separation"]``
    lists coefficients whose posterior puts more than half its mass beyond
    ``|beta| > 20``.  ``check_rank=False`` skips the design rank check, for
    subsets of a checked design whose empty columns are still identified by
    the random-walk prior.
    """
    if len(stage) != model.X.shape[0]:
        raise CascadeError("design rows and strata differ in number")
    if check_rank:
        model.check_rank()
    cfg = hmc.HmcConfig(warmup=warmup, iterations=iterations, n_steps=n_steps, target_accept=target_accept)
    x0 = model.initial_point(stage)
    inits = [x0 + stream(seed, 300_000 + c).uniform(-0.1, 0.1, x0.size) for c in range(chains)]
    res = hmc.sample(lambda t: model.logp_grad(t, stage), inits, seed, cfg, threads=threads)
    raw = np.stack([r["samples"] for r in res])
    C, T, D = raw.shape
    flat = raw.reshape(-1, D)
    b = flat[:, : 1 + model.p]
    cols = [b]
    names = ["beta0"] + [f"beta[{c}]" for c in model.columns]
    gam = np.exp(flat[:, 1 + model.p]) if model.free_gamma else np.full(len(flat), float(model.gamma))
    cols.append(gam[:, None])
    names.append("gamma")
    if model.icar_blocks:
        cols.append(np.exp(flat[:, D - len(model.icar_blocks) :]))
        names += [f"sigma_icar[{i}]" for i in range(len(model.icar_blocks))]
    xi = special.expit(b[:, :1] + b[:, 1:] @ model.X.T)
    cols.append(xi)
    names += [f"xi[{s}]" for s in stage.ids]
    vals = np.concatenate(cols, axis=1).reshape(C, T, -1)
    sep_mass = (np.abs(b[:, 1:]) > SEPARATION_BOUND).mean(axis=0)
    stats = {
        "sampler": "hmc",
        "divergent": np.array([r["divergent"].sum() for r in res]),
        "accept": np.array([r["accept"].mean() for r in res]),
        "step_size": np.array([r["step_size"] for r in res]),
        "separation": [model.columns[j] for j in np.flatnonzero(sep_mass > 0.5)],
        "model": model,
    }
    return PosteriorDraws(names, vals, stats)


def _coefficients(draws, p):
    """Pooled ``(S, 1 + p)`` draws of ``(beta0, beta)``."""
    b0 = draws.get("beta0", flatten=True)[:, None]
    return np.column_stack([b0, draws.get("beta", flatten=True)]) if p else b0


def design_matrix(strata, kind="contrasts", age_levels=None):
    """Indicator design over location, gender and age.

    ``kind="contrasts"``: location and gender indicators plus age contrasts
    against the youngest age.  ``kind="interactions"``: location and gender
    indicators plus separate age contrasts per gender.  Returns
    ``(X, columns, icar_blocks)`` where ``icar_blocks`` lists the ordered age
    column groups.  Reference levels are the first location, gender ``F`` and
    the first age.
    """
    locs = sorted({s.location for s in strata if s.location is not None})
    genders = [g for g in ("F", "M") if any(s.gender == g for s in strata)]
    ages = sorted({s.age for s in strata}) if age_levels is None else list(age_levels)
    if any(s.age is None for s in strata):
        raise CascadeError("every stratum needs an age")
    cols, rows = [], [[] for _ in strata]
    for loc in locs[1:]:
        cols.append(f"loc:{loc}")
        for r, s in zip(rows, strata):
            r.append(float(s.location == loc))
    for g in genders[1:]:
        cols.append(f"gender:{g}")
        for r, s in zip(rows, strata):
            r.append(float(s.gender == g))
    blocks = []
    if kind == "contrasts":
        groups = [None]
    elif kind == "interactions":
        groups = genders
    else:
        raise CascadeError(f"unknown design kind {kind!r}")
    for g in groups:
        blk = []
        for age in ages[1:]:
            blk.append(len(cols))
            cols.append(f"age:{age}" if g is None else f"age:{age}:{g}")
            for r, s in zip(rows, strata):
                r.append(float(s.age == age and (g is None or s.gender == g)))
        blocks.append(blk)
    return np.array(rows, dtype=float).reshape(len(strata), len(cols)), cols, blocks


# ---------------------------------------------------------------------------
# classification of recent infections


@dataclass
class ClassificationResult:
    probability: np.ndarray  # posterior median per individual
    label: np.ndarray  # 1 where probability >= threshold
    threshold: float
    f1: float
    auc: float
    draws: PosteriorDraws


def f1_score(y, yhat):
    y = np.asarray(y, dtype=bool)
    yhat = np.asarray(yhat, dtype=bool)
    tp = np.sum(y & yhat)
    fp = np.sum(~y & yhat)
    fn = np.sum(y & ~yhat)
    return 0.0 if tp == 0 else float(2 * tp / (2 * tp + fp + fn))


def best_f1_threshold(prob, y):
    """Threshold ``t`` (classify ``prob >= t``) maximising F1 on labelled data.

    Every distinct predicted probability is a candidate, which covers every
    distinct classification, so no other threshold can do better.
    """
    prob = np.asarray(prob, dtype=float)
    cand = np.unique(prob)
    scores = np.array([f1_score(y, prob >= t) for t in cand])
    i = int(np.argmax(scores))
    return float(cand[i]), float(scores[i])


def auc_score(prob, y):
    """Area under the ROC curve (Mann-Whitney form, ties count one half)."""
    y = np.asarray(y, dtype=bool)
    n1, n0 = y.sum(), (~y).sum()
    if n1 == 0 or n0 == 0:
        raise CascadeError("AUC needs both classes")
    r = stats.rankdata(prob)
    return float((r[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def classify_new_infections(features, labels, labeled=None, seed=0, chains=4, warmup=500, iterations=500):
    """Bayesian logistic classifier for recent infection with an F1-optimal threshold.

    ``labels`` holds 0/1 for labelled individuals; ``labeled`` (boolean mask)
    marks which rows carry a label (default: all).  Probabilities are
    posterior medians of the linear predictor mapped through the logistic
    function.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels)
    labeled = np.ones(len(X), dtype=bool) if labeled is None else np.asarray(labeled, dtype=bool)
    y = labels[labeled].astype(int)
    if y.size == 0 or np.all(y == y[0]):
        raise CascadeError("labelled data must contain both classes")
    Xl = X[labeled]
    stage = StageCounts([str(i) for i in range(len(y))], np.ones(len(y), dtype=int), y, stage="classification")
    model = BetaBinomialModel(Xl, gamma=0.0)
    draws = fit_betabinomial(model, stage, chains=chains, warmup=warmup, iterations=iterations, seed=seed)
    b = _coefficients(draws, model.p)
    eta = b[:, :1] + b[:, 1:] @ X.T
    prob = special.expit(np.median(eta, axis=0))
    t, f1 = best_f1_threshold(prob[labeled], y)
    return ClassificationResult(prob, (prob >= t).astype(int), t, f1, auc_score(prob[labeled], y), draws)


# ---------------------------------------------------------------------------
# cascade products


@dataclass
class CascadeSpec:
    """Ordered stage draw matrices ``(S, A)`` per role, aligned on ``ids``."""

    ids: list
    source: list
    recipient: list

    def __post_init__(self):
        A = len(self.ids)
        for role in ("source", "recipient"):
            stages = [np.atleast_2d(np.asarray(d, dtype=float)) for d in getattr(self, role)]
            if not stages:
                raise CascadeError(f"{role} cascade needs at least one stage")
            for d in stages:
                if d.shape[1] != A:
                    raise CascadeError(f"{role} stage draws are not aligned with the {A} strata")
                if np.any(d <= 0) or np.any(d > 1):
                    raise CascadeError(f"{role} stage draws must lie in (0, 1]")
            setattr(self, role, stages)


def cascade_product(spec: CascadeSpec, rng=None):
    """Elementwise product of stage draws per role: ``{"source": (S, A), "recipient": (S, A)}``.

    Stages with different draw counts are subsampled without replacement to
    the smallest count.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = {}
    for role in ("source", "recipient"):
        stages = getattr(spec, role)
        S = min(d.shape[0] for d in stages)
        prod = np.ones((S, len(spec.ids)))
        for d in stages:
            if d.shape[0] > S:
                d = d[np.sort(rng.choice(d.shape[0], S, replace=False))]
            prod = prod * d
        out[role] = prod
    return out


# ---------------------------------------------------------------------------
# cross-validation


def fold_assignment(ids, folds, seed=0):
    """Deterministic fold per stratum: rank by a seeded hash, then deal round-robin."""
    if folds < 2:
        raise CascadeError("need at least two folds")
    if len(ids) < folds:
        raise CascadeError(f"{len(ids)} strata cannot fill {folds} folds")
    keys = [hashlib.sha256(f"{seed}:{i}".encode()).hexdigest() for i in ids]
    order = np.argsort(keys, kind="stable")
    fold = np.empty(len(ids), dtype=np.int64)
    fold[order] = np.arange(len(ids)) % folds
    return fold


@dataclass
class CvResult:
    coverage: float
    mae: float
    elpd: float
    ids: list
    fold: np.ndarray
    inside: np.ndarray
    median: np.ndarray
    elpd_pointwise: np.ndarray


def crossvalidate(model: BetaBinomialModel, stage: StageCounts, folds=10, seed=0, level=0.95, **fit_kw):
    """K-fold hold-out of strata with posterior-predictive checks.

    For each fold the model is refit without the fold's strata; held-out
    counts are compared with their posterior predictive distribution:
    coverage of the central ``level`` interval, absolute error of the
    predictive median, and ``log mean_s p(y | theta_s)`` summed over strata
    (ELPD).  Strata are processed in sorted-id order, so results do not
    depend on the order of the input rows.
    """
    model.check_rank()
    order = np.argsort(np.array(stage.ids), kind="stable")
    stage = stage.subset(order)
    X = model.X[order]
    fold = fold_assignment(stage.ids, folds, seed)
    A = len(stage)
    inside = np.zeros(A, dtype=bool)
    med = np.zeros(A)
    elpd = np.zeros(A)
    tail = 0.5 * (1.0 - level)
    for k in range(folds):
        test = np.flatnonzero(fold == k)
        train = np.flatnonzero(fold != k)
        if test.size == 0:
            raise CascadeError(f"fold {k} has no strata")
        sub = BetaBinomialModel(
            X[train], model.columns, model.gamma, model.icar_blocks,
            model.intercept_var, model.beta_var, model.icar_scale,
        )
        d = fit_betabinomial(sub, stage.subset(train), seed=int(seed) * 1000 + k, check_rank=False, **fit_kw)
        b = _coefficients(d, sub.p)
        gam = d.get("gamma", flatten=True)
        xi = special.expit(b[:, :1] + b[:, 1:] @ X[test].T)  # (S, t)
        N, y = stage.trials[test], stage.successes[test]
        rng = stream(seed, 400_000 + k)
        pred = betabinom_draw(rng, N[None, :], xi, gam)
        lo = np.quantile(pred, tail, axis=0, method="inverted_cdf")
        hi = np.quantile(pred, 1 - tail, axis=0, method="inverted_cdf")
        inside[test] = (y >= lo) & (y <= hi)
        med[test] = np.quantile(pred, 0.5, axis=0, method="inverted_cdf")
        lp = np.empty_like(xi)
        for s in range(xi.shape[0]):
            lp[s] = betabinom_logpmf(y, N, xi[s], gam[s])
        elpd[test] = special.logsumexp(lp, axis=0) - np.log(xi.shape[0])
    return CvResult(
        coverage=float(inside.mean()),
        mae=float(np.abs(med - stage.successes).mean()),
        elpd=float(elpd.sum()),
        ids=list(stage.ids),
        fold=fold,
        inside=inside,
        median=med,
        elpd_pointwise=elpd,
    )
