"""Flow-level simulators and observation thinning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ..hsgp import SeKernelParams, se_gram
from ..strata import FlowCounts, FlowIntensities, FlowProportions, StrataSpace, Stratum


class SimulationError(RuntimeError):
    pass


@dataclass
class EventList:
    """Transmission events with individual identities.

    ``source_stratum``/``recipient_stratum`` index into a strata space.
    """

    source_id: np.ndarray
    recipient_id: np.ndarray
    source_stratum: np.ndarray
    recipient_stratum: np.ndarray
    time: np.ndarray | None = None

    def __len__(self):
        return len(self.source_id)

    def counts(self, space: StrataSpace):
        pos = space._pos[self.source_stratum, self.recipient_stratum]
        if np.any(pos < 0):
            raise SimulationError("event on a structurally-zero pair")
        return FlowCounts(space, np.bincount(pos, minlength=space.L))


@dataclass
class SimOutput:
    space: StrataSpace
    pi: FlowProportions
    n: FlowCounts | None = None
    z: FlowCounts | FlowIntensities | None = None
    lam: FlowIntensities | None = None
    times: np.ndarray | None = None
    trajectory: dict | None = None
    events: EventList | None = None
    sampled: dict | None = None
    meta: dict = field(default_factory=dict)

    def prevalence(self):
        """Overall (I + T) / (S + I + T) along ``times``."""
        S, I, T = (self.trajectory[k].sum(axis=1) for k in ("S", "I", "T"))
        return (I + T) / (S + I + T)


def _weights(space, xi_source, xi_recipient):
    xs = space.xi_vector(xi_source, "xi_source")
    xr = xs if xi_recipient is None else space.xi_vector(xi_recipient, "xi_recipient")
    if np.any((xs < 0) | (xs > 1)) or np.any((xr < 0) | (xr > 1)):
        raise ValueError("sampling probabilities must lie in [0, 1]")
    return xs, xr


@dataclass
class ThinResult:
    counts: FlowCounts
    sampled: dict | None = None  # stratum id -> (N^s, N)
    status_source: dict | None = None
    status_recipient: dict | None = None


def thin_observations(z, xi_source, xi_recipient=None, mode="pair", rng=None, space=None):
    """Observed counts from true counts or events.

    ``mode="pair"`` draws ``n_ab ~ Binomial(z_ab, xi_S[a] xi_R[b])`` from a
    :class:`FlowCounts`.  ``mode="individual"`` draws a Bernoulli sampling
    status per individual and keeps events whose source and recipient are
    both sampled; ``z`` may then be an :class:`EventList` (``space``
    required) or counts, which are expanded into events between distinct
    individuals.
    """
    rng = np.random.default_rng() if rng is None else rng
    if mode == "pair":
        if not isinstance(z, FlowCounts):
            raise TypeError("pair-level thinning needs FlowCounts")
        xs, xr = _weights(z.space, xi_source, xi_recipient)
        w = xs[z.space.pairs[:, 0]] * xr[z.space.pairs[:, 1]]
        return FlowCounts(z.space, rng.binomial(z.values, w))
    if mode == "individual":
        if isinstance(z, FlowCounts):
            space = z.space
            z = events_from_counts(z)
        if space is None:
            raise ValueError("individual-level thinning of an event list needs the strata space")
        return thin_events(z, space, xi_source, xi_recipient, rng).counts
    raise ValueError(f"unknown thinning mode {mode!r}")


def events_from_counts(counts: FlowCounts):
    """One event per unit count, each between two fresh individuals."""
    sp = counts.space
    k = np.repeat(np.arange(sp.L), counts.values)
    m = k.size
    return EventList(
        source_id=np.arange(m, dtype=np.int64),
        recipient_id=np.arange(m, 2 * m, dtype=np.int64),
        source_stratum=sp.pairs[k, 0].copy(),
        recipient_stratum=sp.pairs[k, 1].copy(),
    )


def thin_events(
    events: EventList,
    space: StrataSpace,
    xi_source,
    xi_recipient=None,
    rng=None,
    uniforms=None,
    population=None,
    infected=None,
):
    """Individual-level thinning of an event list.

    Each individual gets a sampling status ``U_i < xi`` of its stratum.  With
    a shared ``xi`` (``xi_recipient=None``) one status serves both roles;
    otherwise source and recipient statuses are drawn independently.
    ``uniforms`` may supply the ``U`` values as a callable ``ids -> array`` (or
    a pair of callables for the two roles), which lets several sampling
    scenarios reuse the same underlying randomness.

    If ``population`` (stratum id -> N_a) is given, sampled totals are
    returned: individuals not involved in any event are sampled by a Binomial
    draw.  ``infected`` may instead give, per stratum index, the array of ids
    of all individuals at risk of being sampled; statuses for those are
    drawn with the same uniforms.
    """
    rng = np.random.default_rng() if rng is None else rng
    xs, xr = _weights(space, xi_source, xi_recipient)
    shared = xi_recipient is None
    ids = np.concatenate([events.source_id, events.recipient_id])
    strata = np.concatenate([events.source_stratum, events.recipient_stratum])
    uid, first = np.unique(ids, return_index=True)
    ustr = strata[first]

    def draw_u(fn, keys):
        if fn is None:
            return rng.random(keys.size)
        return np.asarray(fn(keys), dtype=float)

    if uniforms is None:
        uS = uR = None
    elif callable(uniforms):
        uS, uR = uniforms, None
    else:
        uS, uR = uniforms
    u_s = draw_u(uS, uid)
    stat_s = u_s < xs[ustr]
    if shared:
        stat_r = stat_s
    else:
        stat_r = draw_u(uR, uid) < xr[ustr]
    src_ok = stat_s[np.searchsorted(uid, events.source_id)]
    rec_ok = stat_r[np.searchsorted(uid, events.recipient_id)]
    keep = src_ok & rec_ok
    pos = space._pos[events.source_stratum[keep], events.recipient_stratum[keep]]
    counts = FlowCounts(space, np.bincount(pos, minlength=space.L))
    sampled = None
    if infected is not None:
        sampled = {}
        for a, sid in enumerate(space.ids):
            members = np.asarray(infected[a], dtype=np.int64)
            u = draw_u(uS, members)
            sampled[sid] = (int(np.sum(u < xs[a])), int(members.size))
    elif population is not None:
        sampled = {}
        for a, sid in enumerate(space.ids):
            inv = ustr == a
            n_inv = int(inv.sum())
            n_pop = int(population[sid])
            if n_pop < n_inv:
                raise ValueError(f"population of {sid!r} smaller than its event participants")
            ns = int(stat_s[inv].sum()) + int(rng.binomial(n_pop - n_inv, xs[a]))
            sampled[sid] = (ns, n_pop)
    return ThinResult(counts, sampled, dict(zip(uid.tolist(), stat_s.tolist())),
                      dict(zip(uid.tolist(), np.asarray(stat_r).tolist())))


def simulate_multinomial(pi0: FlowProportions, xi_source, n_target, rng=None, xi_recipient=None, mode="pair"):
    """``z+ ~ Poisson(n+ / mean(xi))``, ``z ~ Multinomial(z+, pi0)``, then thinning.

    ``mean(xi)`` is the unweighted average of the source sampling
    probabilities over strata.
    """
    rng = np.random.default_rng() if rng is None else rng
    space = pi0.space
    xs, xr = _weights(space, xi_source, xi_recipient)
    xbar = xs.mean()
    if not xbar > 0:
        raise ValueError("mean sampling probability must be positive")
    zplus = rng.poisson(n_target / xbar)
    z = FlowCounts(space, rng.multinomial(zplus, pi0.values))
    n = thin_observations(z, xs, None if xi_recipient is None else xr, mode=mode, rng=rng)
    return SimOutput(space, pi0, n=n, z=z, meta={"z_plus": int(zplus), "xi_bar": float(xbar)})


# ---------------------------------------------------------------------------
# Gaussian-process flow surfaces

GP_FLOW_PARAMS = {
    "intercepts": {
        "FM": {"h->h": -1.0, "h->l": -10.0, "l->h": -9.0, "l->l": -2.5},
        "MF": {"h->h": -0.5, "h->l": -9.0, "l->h": -9.0, "l->l": -1.0},
    },
    "lengthscales": {"FM": (4.1, 2.3), "MF": (2.3, 4.6)},
    "sigma": {"FM": 1.8, "MF": 1.5},
}


def gp_strata_space(ages=range(15, 25), locations=("h", "l")):
    """Gender x location x 1-year age strata with same-gender pairs masked."""
    strata = [Stratum(f"{g}:{loc}:{a}", g, int(a), loc) for g in "MF" for loc in locations for a in ages]
    return StrataSpace(strata, gender_semantics=True)


def exact_gp_draw(inputs, theta: SeKernelParams, rng, jitter=1e-8, max_escalations=3):
    """One draw of an exact squared-exponential GP at ``inputs``."""
    K = se_gram(inputs, inputs, theta)
    n = K.shape[0]
    j = jitter
    for attempt in range(max_escalations + 1):
        try:
            Lc = linalg.cholesky(K + j * np.eye(n), lower=True)
            break
        except linalg.LinAlgError:
            j *= 10.0
    else:
        raise SimulationError(f"Gram matrix not factorizable after {max_escalations} jitter escalations")
    return Lc @ rng.standard_normal(n)


def simulate_gp_flows(params=None, space=None, xi_source=1.0, xi_recipient=None, rng=None, jitter=1e-8):
    """Flows from direction-specific exact GP surfaces plus block intercepts.

    ``params`` follows :data:`GP_FLOW_PARAMS`.  One surface ``f`` per direction is
    shared by all location blocks; ``log lambda = mu[dir][loc pair] + f``.
    True events ``z ~ Poisson(lambda)`` are thinned pairwise, so that
    marginally ``n ~ Poisson(lambda xi_S xi_R)``.
    """
    params = GP_FLOW_PARAMS if params is None else params
    rng = np.random.default_rng() if rng is None else rng
    space = gp_strata_space() if space is None else space
    xs, xr = _weights(space, xi_source, xi_recipient)
    loglam = np.empty(space.L)
    f_by_dir = {}
    for direction in params["lengthscales"]:
        cells = [
            k for k, (a, b) in enumerate(space.pairs)
            if space.strata[a].gender + space.strata[b].gender == direction
        ]
        if not cells:
            continue
        ages = np.array([(space.strata[space.pairs[k, 0]].age, space.strata[space.pairs[k, 1]].age) for k in cells])
        uniq, inv = np.unique(ages, axis=0, return_inverse=True)
        l1, l2 = params["lengthscales"][direction]
        theta = SeKernelParams(params["sigma"][direction] ** 2, l1, l2)
        if theta.sigma2 == 0:
            f = np.zeros(len(uniq))
        else:
            f = exact_gp_draw(uniq, theta, rng, jitter)
        f_by_dir[direction] = (uniq, f)
        for k, i in zip(cells, inv.ravel()):
            a, b = space.pairs[k]
            key = f"{space.strata[a].location}->{space.strata[b].location}"
            loglam[k] = params["intercepts"][direction][key] + f[i]
    lam = np.exp(loglam)
    z = rng.poisson(lam)
    w = xs[space.pairs[:, 0]] * xr[space.pairs[:, 1]]
    n = rng.binomial(z, w)
    return SimOutput(
        space,
        FlowProportions(space, lam / lam.sum()),
        n=FlowCounts(space, n),
        z=FlowCounts(space, z),
        lam=FlowIntensities(space, lam),
        meta={"f": f_by_dir, "xi_source": xs, "xi_recipient": xr},
    )
