"""Structured susceptible-infected-treated (SIT) epidemic models.

Per stratum ``r`` with constant size ``N_r``::

    dS_r/dt = mu N_r - lambda_r S_r - mu S_r
    dI_r/dt = lambda_r S_r - (gamma + mu) I_r
    dT_r/dt = gamma I_r - mu T_r
    lambda_r = sum_s beta[s, r] I_s / D[s, r]

``beta[s, r]`` is the transmission coefficient from source stratum ``s`` to
recipient stratum ``r``.  ``D[s, r]`` is a normalising population size
(``N_s`` by default, i.e. frequency-dependent transmission); see
:class:`SitModel` for alternatives.  Cumulative transmissions ``Z[s, r]``
integrate ``beta[s, r] I_s S_r / D[s, r]``.

The stochastic version replaces every death by an immediate birth into the
susceptible class of the same stratum, so stratum sizes stay constant as in
the deterministic model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.integrate import solve_ivp

from .._rng import int_seed
from ..strata import FlowIntensities, FlowProportions, FlowCounts, StrataSpace, Stratum
from .flows import EventList, SimOutput, SimulationError

NORMALIZATIONS = ("source", "recipient", "source_total", "total")


class EventBudgetExceeded(SimulationError):
    pass


@dataclass
class SitModel:
    """Parameters and initial state of a structured SIT model.

    ``normalization`` picks the denominator ``D[s, r]`` of the per-pair
    force of infection: ``"source"`` divides by the source stratum size,
    ``"recipient"`` by the recipient stratum size, ``"source_total"`` by the
    source gender's total size and ``"total"`` by the whole population.
    """

    strata: list
    beta: np.ndarray
    gamma: float
    mu: float
    S0: np.ndarray
    I0: np.ndarray
    T0: np.ndarray
    normalization: str = "source"

    def __post_init__(self):
        A = len(self.strata)
        self.beta = np.asarray(self.beta, dtype=float)
        self.S0 = np.asarray(self.S0, dtype=float)
        self.I0 = np.asarray(self.I0, dtype=float)
        self.T0 = np.asarray(self.T0, dtype=float)
        if self.beta.shape != (A, A):
            raise ValueError(f"beta must be {A}x{A}")
        for name, x in (("S0", self.S0), ("I0", self.I0), ("T0", self.T0)):
            if x.shape != (A,) or np.any(x < 0):
                raise ValueError(f"{name} must be a non-negative length-{A} vector")
        if np.any(self.beta < 0) or self.gamma < 0 or self.mu < 0:
            raise ValueError("rates must be non-negative")
        if np.any(self.N <= 0):
            raise ValueError("every stratum needs a positive population")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")

    @property
    def A(self):
        return len(self.strata)

    @property
    def N(self):
        return self.S0 + self.I0 + self.T0

    @property
    def ids(self):
        return [s.id for s in self.strata]

    def denominators(self):
        """``(A, A)`` matrix ``D[s, r]`` dividing ``beta[s, r] I_s S_r``."""
        N = self.N
        A = self.A
        if self.normalization == "source":
            d = N
        elif self.normalization == "total":
            d = np.full(A, N.sum())
        elif self.normalization == "recipient":
            return np.tile(N[None, :], (A, 1))
        else:
            g = np.array([s.gender for s in self.strata])
            d = np.array([N[g == gi].sum() for gi in g])
        return np.tile(d[:, None], (1, A))

    def space(self):
        mask = self.beta == 0
        gender = all(s.gender in ("M", "F") for s in self.strata)
        return StrataSpace(self.strata, zero_mask=mask if not gender else None, gender_semantics=gender)


SIT_RATES = {
    # (source, recipient) -> rate; groups a, b
    "FM": {("a", "a"): 0.0713, ("b", "a"): 0.0071, ("a", "b"): 0.0122, ("b", "b"): 0.0713},
    "MF": {("a", "a"): 0.1019, ("b", "a"): 0.0173, ("a", "b"): 0.0224, ("b", "b"): 0.1019},
    "gamma": 0.0444,
    "mu": 0.01667,
    "group_share": {"a": 0.4, "b": 0.6},
}


def reference_sit_model(N=30000, initial_prevalence=0.1, normalization="source", integer=True):
    """Two-gender, two-group SIT model with the reference transmission rates.

    Strata are ``M:a, M:b, F:a, F:b``; each group is split evenly by gender.
    A fraction ``initial_prevalence`` of every stratum starts infected.
    """
    groups = ("a", "b")
    strata = [Stratum(f"{g}:{x}", g, None, x) for g in "MF" for x in groups]
    A = len(strata)
    sizes = np.array([N * SIT_RATES["group_share"][s.location] / 2 for s in strata])
    if integer:
        sizes = np.round(sizes)
    beta = np.zeros((A, A))
    for i, s in enumerate(strata):
        for j, r in enumerate(strata):
            key = s.gender + r.gender
            if key in ("FM", "MF"):
                beta[i, j] = SIT_RATES[key][(s.location, r.location)]
    I0 = sizes * initial_prevalence
    if integer:
        I0 = np.round(I0)
    return SitModel(
        strata, beta, SIT_RATES["gamma"], SIT_RATES["mu"], sizes - I0, I0, np.zeros(A), normalization
    )


# ---------------------------------------------------------------------------
# deterministic


def _ode_rhs(model):
    A = model.A
    beta = model.beta
    D = model.denominators()
    N = model.N
    g, mu = model.gamma, model.mu

    def rhs(t, y):
        S, I, T = y[:A], y[A : 2 * A], y[2 * A : 3 * A]
        flow = beta / D * I[:, None] * S[None, :]  # (s, r)
        inf = flow.sum(axis=0)
        dS = mu * N - inf - mu * S
        dI = inf - (g + mu) * I
        dT = g * I - mu * T
        return np.concatenate([dS, dI, dT, flow.ravel()])

    return rhs


def simulate_sit_ode(model: SitModel, t_span, rtol=1e-8, atol=1e-10, window=None, t_eval=None, method="RK45"):
    """Integrate the SIT model with cumulative transmission counters.

    ``window=(t1, t2)`` sets the interval over which transmissions are
    accumulated into ``z`` (default: the whole span).  Returns a
    :class:`SimOutput` whose ``z`` holds the expected number of
    transmissions per ordered pair in the window and ``pi`` their shares.
    """
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    w0, w1 = (t0, t1) if window is None else map(float, window)
    if not (t0 <= w0 < w1 <= t1):
        raise ValueError("window must lie inside t_span")
    A = model.A
    y0 = np.concatenate([model.S0, model.I0, model.T0, np.zeros(A * A)])
    times = np.linspace(t0, t1, 201) if t_eval is None else np.asarray(t_eval, dtype=float)
    grid = np.unique(np.concatenate([times, [w0, w1]]))
    sol = solve_ivp(_ode_rhs(model), (t0, t1), y0, method=method, rtol=rtol, atol=atol, t_eval=grid)
    if sol.status != 0:
        raise SimulationError(f"integration failed: {sol.message}")
    Y = sol.y.T
    tol = 1e-6 * model.N.sum()
    if Y[:, : 3 * A].min() < -tol:
        raise SimulationError(f"negative compartment beyond tolerance ({Y[:, :3 * A].min():.3g})")
    Z = Y[:, 3 * A :].reshape(-1, A, A)
    i0, i1 = np.searchsorted(grid, w0), np.searchsorted(grid, w1)
    zw = Z[i1] - Z[i0]
    space = model.space()
    zvals = zw[space.pairs[:, 0], space.pairs[:, 1]]
    keep = np.isin(grid, times)
    traj = {
        "S": Y[keep, :A],
        "I": Y[keep, A : 2 * A],
        "T": Y[keep, 2 * A : 3 * A],
        "Z": Z[keep],
    }
    tot = zvals.sum()
    pi = FlowProportions(space, zvals / tot) if tot > 0 else None
    return SimOutput(
        space,
        pi,
        z=FlowIntensities(space, np.maximum(zvals, 0.0)),
        times=grid[keep],
        trajectory=traj,
        meta={"window": (w0, w1), "nfev": int(sol.nfev)},
    )


# ---------------------------------------------------------------------------
# stochastic


@numba.njit(cache=True)
def _rates(S, I, T, D, beta, gamma, mu, out):
    A = S.shape[0]
    k = 0
    for s in range(A):
        for r in range(A):
            out[k] = beta[s, r] * I[s] * S[r] / D[s, r]
            k += 1
    for r in range(A):
        out[k] = gamma * I[r]
        k += 1
    for r in range(A):
        out[k] = mu * I[r]
        k += 1
    for r in range(A):
        out[k] = mu * T[r]
        k += 1
    tot = 0.0
    for i in range(out.shape[0]):
        tot += out[i]
    return tot


@numba.njit(cache=True)
def _pick(rates, total, u):
    target = u * total
    acc = 0.0
    last = -1
    for i in range(rates.shape[0]):
        if rates[i] > 0.0:
            last = i
            acc += rates[i]
            if acc > target:
                return i
    return last


@numba.njit(cache=True)
def _frozen_draws(S, I, T, D, beta, gamma, mu, n, seed):
    np.random.seed(seed)
    A = S.shape[0]
    rates = np.empty(A * A + 3 * A)
    tot = _rates(S, I, T, D, beta, gamma, mu, rates)
    dts = np.empty(n)
    ev = np.empty(n, dtype=np.int64)
    for i in range(n):
        dts[i] = -np.log(1.0 - np.random.random()) / tot
        ev[i] = _pick(rates, tot, np.random.random())
    return dts, ev


@numba.njit(cache=True)
def _gillespie(S0, I0, T0, D, beta, gamma, mu, t0, t1, w0, w1, sample_times, seed, max_events, track, cap):
    np.random.seed(seed)
    A = S0.shape[0]
    S = S0.astype(np.float64).copy()
    I = I0.astype(np.float64).copy()
    T = T0.astype(np.float64).copy()
    nsamp = sample_times.shape[0]
    out_S = np.zeros((nsamp, A))
    out_I = np.zeros((nsamp, A))
    out_T = np.zeros((nsamp, A))
    Zw = np.zeros((A, A), dtype=np.int64)
    rates = np.empty(A * A + 3 * A)
    # individual tracking of infected (I) individuals
    maxN = 1
    if track:
        for r in range(A):
            tot_r = int(S0[r] + I0[r] + T0[r])
            if tot_r > maxN:
                maxN = tot_r
    ids = np.zeros((A, maxN if track else 1), dtype=np.int64)
    next_id = 0
    if track:
        for r in range(A):
            for k in range(int(I0[r])):
                ids[r, k] = next_id
                next_id += 1
    # window event log
    ev_t = np.empty(cap)
    ev_src = np.empty(cap, dtype=np.int64)
    ev_rec = np.empty(cap, dtype=np.int64)
    ev_ss = np.empty(cap, dtype=np.int64)
    ev_rs = np.empty(cap, dtype=np.int64)
    n_log = 0
    # ids infected at the start of the window are recorded as a snapshot
    snap = np.empty(0, dtype=np.int64)
    snap_str = np.empty(0, dtype=np.int64)
    snapped = False
    t = t0
    si = 0
    n_events = 0
    status = 0
    while True:
        tot = _rates(S, I, T, D, beta, gamma, mu, rates)
        if tot > 0.0:
            dt = -np.log(1.0 - np.random.random()) / tot
        else:
            dt = np.inf
        t_next = t + dt
        while si < nsamp and sample_times[si] < t_next and sample_times[si] <= t1:
            out_S[si] = S
            out_I[si] = I
            out_T[si] = T
            si += 1
        if track and not snapped and w0 < t_next:
            m = 0
            for r in range(A):
                m += int(I[r])
            snap = np.empty(m, dtype=np.int64)
            snap_str = np.empty(m, dtype=np.int64)
            q = 0
            for r in range(A):
                for k in range(int(I[r])):
                    snap[q] = ids[r, k]
                    snap_str[q] = r
                    q += 1
            snapped = True
        if t_next > t1:
            break
        t = t_next
        n_events += 1
        if n_events > max_events:
            status = 1
            break
        e = _pick(rates, tot, np.random.random())
        if e < A * A:
            s = e // A
            r = e % A
            S[r] -= 1.0
            I[r] += 1.0
            if t >= w0 and t < w1:
                Zw[s, r] += 1
            if track:
                j = int(np.random.random() * I[s]) if s != r else int(np.random.random() * (I[s] - 1.0))
                src = ids[s, j]
                ids[r, int(I[r]) - 1] = next_id
                rec = next_id
                next_id += 1
                if t >= w0 and t < w1:
                    if n_log == ev_t.shape[0]:
                        ncap = 2 * ev_t.shape[0] + 16
                        a1 = np.empty(ncap)
                        a1[:n_log] = ev_t[:n_log]
                        ev_t = a1
                        b1 = np.empty(ncap, dtype=np.int64)
                        b1[:n_log] = ev_src[:n_log]
                        ev_src = b1
                        b2 = np.empty(ncap, dtype=np.int64)
                        b2[:n_log] = ev_rec[:n_log]
                        ev_rec = b2
                        b3 = np.empty(ncap, dtype=np.int64)
                        b3[:n_log] = ev_ss[:n_log]
                        ev_ss = b3
                        b4 = np.empty(ncap, dtype=np.int64)
                        b4[:n_log] = ev_rs[:n_log]
                        ev_rs = b4
                    ev_t[n_log] = t
                    ev_src[n_log] = src
                    ev_rec[n_log] = rec
                    ev_ss[n_log] = s
                    ev_rs[n_log] = r
                    n_log += 1
        elif e < A * A + A:
            r = e - A * A
            if track:
                j = int(np.random.random() * I[r])
                last = int(I[r]) - 1
                ids[r, j] = ids[r, last]
            I[r] -= 1.0
            T[r] += 1.0
        elif e < A * A + 2 * A:
            r = e - A * A - A
            if track:
                j = int(np.random.random() * I[r])
                last = int(I[r]) - 1
                ids[r, j] = ids[r, last]
            I[r] -= 1.0
            S[r] += 1.0
        else:
            r = e - A * A - 2 * A
            T[r] -= 1.0
            S[r] += 1.0
    while si < nsamp and sample_times[si] <= t1:
        out_S[si] = S
        out_I[si] = I
        out_T[si] = T
        si += 1
    return (
        out_S, out_I, out_T, Zw, n_events, status,
        ev_t[:n_log], ev_src[:n_log], ev_rec[:n_log], ev_ss[:n_log], ev_rs[:n_log],
        snap, snap_str,
    )


def simulate_sit_gillespie(
    model: SitModel,
    t_span,
    seed,
    window=None,
    sample_times=None,
    max_events=1_000_000,
    track_individuals=False,
    replicate=0,
):
    """Exact stochastic simulation of the SIT model.

    Transmission, suppression and death (with replacement by a susceptible
    birth) events occur at the deterministic model's rates.  ``z`` holds the
    number of transmissions per ordered pair with event time in ``window``.
    With ``track_individuals`` every infected individual carries an id and
    the window's events are returned as an :class:`EventList`, together with
    ``meta["window_infected"]``: per stratum, the ids of everyone infected at
    some time in the window.
    """
    t0, t1 = map(float, t_span)
    w0, w1 = (t0, t1) if window is None else map(float, window)
    if not (t0 <= w0 < w1 <= t1):
        raise ValueError("window must lie inside t_span")
    for x in (model.S0, model.I0, model.T0):
        if np.any(x != np.round(x)):
            raise ValueError("stochastic simulation needs integer initial counts")
    times = np.linspace(t0, t1, 201) if sample_times is None else np.asarray(sample_times, dtype=float)
    res = _gillespie(
        model.S0, model.I0, model.T0, model.denominators(), model.beta, float(model.gamma), float(model.mu),
        t0, t1, w0, w1, times, int_seed(seed, replicate), int(max_events), bool(track_individuals), 1024,
    )
    oS, oI, oT, Zw, n_events, status, et, es, er, ess, ers, snap, snap_str = res
    if status == 1:
        raise EventBudgetExceeded(f"event budget of {max_events} exceeded before t={t1}")
    space = model.space()
    zvals = Zw[space.pairs[:, 0], space.pairs[:, 1]]
    if np.any(Zw[space.mask] != 0):
        raise SimulationError("transmission on a structurally-zero pair")
    z = FlowCounts(space, zvals)
    pi = FlowProportions(space, zvals / zvals.sum()) if zvals.sum() > 0 else None
    meta = {"n_events": int(n_events), "window": (w0, w1)}
    events = None
    if track_individuals:
        events = EventList(es, er, ess, ers, et)
        infected = []
        for a in range(model.A):
            ids_a = np.concatenate([snap[snap_str == a], er[ers == a]])
            infected.append(np.unique(ids_a))
        meta["window_infected"] = infected
    return SimOutput(
        space,
        pi,
        z=z,
        times=times,
        trajectory={"S": oS, "I": oI, "T": oT},
        events=events,
        meta=meta,
    )


def frozen_waiting_times(model: SitModel, n, seed, state=None):
    """Inter-event times and event indices drawn repeatedly from one frozen state.

    Uses the same rate and selection kernels as the simulator; intended for
    validating them.  Returns ``(dts, events, rates)``.
    """
    S, I, T = (model.S0, model.I0, model.T0) if state is None else state
    D = model.denominators()
    dts, ev = _frozen_draws(
        np.asarray(S, float), np.asarray(I, float), np.asarray(T, float), D, model.beta,
        float(model.gamma), float(model.mu), int(n), int_seed(seed),
    )
    rates = np.empty(model.A**2 + 3 * model.A)
    _rates(np.asarray(S, float), np.asarray(I, float), np.asarray(T, float), D, model.beta,
           float(model.gamma), float(model.mu), rates)
    return dts, ev, rates
