"""Strata, flow states and closed-form flow estimators.

A :class:`StrataSpace` is an ordered catalogue of population strata plus a
mask of ordered pairs that can never carry a flow (structural zeros).  Flow
states (counts, intensities, proportions) are vectors over the unmasked pairs
in row-major order, so cell ``k`` of every state on the same space refers to
the same ``(source, recipient)`` pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

GENDERS = ("M", "F", "U")


class StrataError(ValueError):
    """Invalid strata, masks or stratum references."""


class MaskedPairError(StrataError):
    """A count or score falls on a structurally-zero pair."""


class EstimatorUndefinedError(ValueError):
    """The estimator has no value for the given data (e.g. no counts)."""


class UndefinedFunctionalError(ValueError):
    """A summary functional has a zero denominator."""


@dataclass(frozen=True)
class Stratum:
    id: str
    gender: str = "U"
    age: int | str | None = None
    location: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise StrataError(f"stratum id must be a non-empty string, got {self.id!r}")
        if any(c in self.id for c in ",[]") or "->" in self.id:
            raise StrataError(f"stratum id {self.id!r} contains a reserved character")
        if self.gender not in GENDERS:
            raise StrataError(f"stratum {self.id!r}: gender must be one of {GENDERS}")


class StrataSpace:
    """Ordered strata with a structural-zero mask over ordered pairs.

    Parameters
    ----------
    strata : sequence of Stratum
    zero_mask : (A, A) bool array, optional
        True marks a structurally-zero ordered pair.
    gender_semantics : bool
        If True, same-gender pairs (M->M, F->F) are masked in addition to
        ``zero_mask``.
    """

    def __init__(self, strata, zero_mask=None, gender_semantics=False):
        strata = tuple(strata)
        if not strata:
            raise StrataError("a strata space needs at least one stratum")
        ids = tuple(s.id for s in strata)
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise StrataError(f"duplicate stratum ids: {dup}")
        A = len(strata)
        mask = np.zeros((A, A), dtype=bool)
        if zero_mask is not None:
            zm = np.asarray(zero_mask, dtype=bool)
            if zm.shape != (A, A):
                raise StrataError(f"zero_mask must have shape {(A, A)}, got {zm.shape}")
            mask |= zm
        if gender_semantics:
            g = np.array([s.gender for s in strata])
            same = (g[:, None] == g[None, :]) & (g[:, None] != "U")
            mask |= same
        if mask.all():
            raise StrataError("every ordered pair is masked; no flow cell remains")
        mask.setflags(write=False)
        self.strata = strata
        self.ids = ids
        self.gender_semantics = bool(gender_semantics)
        self.mask = mask
        self._index = {sid: i for i, sid in enumerate(ids)}
        src, rec = np.nonzero(~mask)
        pairs = np.column_stack([src, rec]).astype(np.int64)
        pairs.setflags(write=False)
        self.pairs = pairs
        pos = -np.ones((A, A), dtype=np.int64)
        pos[src, rec] = np.arange(len(src))
        pos.setflags(write=False)
        self._pos = pos

    @property
    def A(self):
        return len(self.strata)

    @property
    def L(self):
        return len(self.pairs)

    def __len__(self):
        return self.A

    def __eq__(self, other):
        return (
            isinstance(other, StrataSpace)
            and self.strata == other.strata
            and np.array_equal(self.mask, other.mask)
        )

    def __hash__(self):
        return hash((self.strata, self.mask.tobytes()))

    def __repr__(self):
        return f"StrataSpace(A={self.A}, L={self.L})"

    def index(self, sid):
        try:
            return self._index[sid]
        except KeyError:
            raise StrataError(f"unknown stratum id {sid!r}") from None

    def stratum(self, sid):
        return self.strata[self.index(sid)]

    def pair_position(self, source, recipient):
        """Cell index of the ordered pair ``(source, recipient)`` (ids)."""
        a, b = self.index(source), self.index(recipient)
        k = self._pos[a, b]
        if k < 0:
            raise MaskedPairError(f"pair {source}->{recipient} is structurally zero")
        return int(k)

    def is_masked(self, source, recipient):
        return bool(self.mask[self.index(source), self.index(recipient)])

    def pair_labels(self):
        """List of ``(source_id, recipient_id)`` for every cell, in cell order."""
        return [(self.ids[a], self.ids[b]) for a, b in self.pairs]

    def cell_names(self, prefix):
        return [f"{prefix}[{s}->{r}]" for s, r in self.pair_labels()]

    def xi_vector(self, xi, name="xi"):
        """Coerce a scalar, mapping id->value or length-A sequence to an (A,) array."""
        if isinstance(xi, Mapping):
            missing = [s for s in self.ids if s not in xi]
            if missing:
                raise StrataError(f"{name} missing strata {missing}")
            out = np.array([float(xi[s]) for s in self.ids])
        else:
            arr = np.asarray(xi, dtype=float)
            if arr.ndim == 0:
                out = np.full(self.A, float(arr))
            elif arr.shape == (self.A,):
                out = arr.copy()
            else:
                raise StrataError(f"{name} must be scalar, mapping or length {self.A}")
        return out

    def pair_weights(self, xi_source, xi_recipient=None):
        """Per-cell product ``xi_S[a] * xi_R[b]``."""
        xs = self.xi_vector(xi_source, "xi_source")
        xr = xs if xi_recipient is None else self.xi_vector(xi_recipient, "xi_recipient")
        return xs[self.pairs[:, 0]] * xr[self.pairs[:, 1]]


class FlowState:
    """Values over the unmasked pairs of a strata space."""

    kind = "state"

    def __init__(self, space: StrataSpace, values):
        v = np.array(values, dtype=self._dtype(), copy=True)
        if v.shape != (space.L,):
            raise StrataError(f"{self.kind} needs {space.L} values, got shape {v.shape}")
        self._validate(v)
        v.setflags(write=False)
        self.space = space
        self.values = v

    @staticmethod
    def _dtype():
        return float

    def _validate(self, v):
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{self.kind} values must be finite")

    @classmethod
    def from_matrix(cls, space, matrix):
        M = np.asarray(matrix)
        if M.shape != (space.A, space.A):
            raise StrataError(f"matrix must have shape {(space.A, space.A)}")
        off = M[space.mask]
        if np.any(off != 0):
            bad = [(space.ids[a], space.ids[b]) for a, b in zip(*np.nonzero(space.mask & (M != 0)))]
            raise MaskedPairError(f"nonzero entries on masked pairs: {bad}")
        return cls(space, M[space.pairs[:, 0], space.pairs[:, 1]])

    @classmethod
    def from_dict(cls, space, d):
        v = np.zeros(space.L, dtype=cls._dtype())
        for (s, r), x in d.items():
            v[space.pair_position(s, r)] += x
        return cls(space, v)

    def matrix(self):
        M = np.zeros((self.space.A, self.space.A), dtype=self.values.dtype)
        M[self.space.pairs[:, 0], self.space.pairs[:, 1]] = self.values
        return M

    def as_dict(self):
        return {lab: v.item() for lab, v in zip(self.space.pair_labels(), self.values)}

    def __getitem__(self, pair):
        return self.values[self.space.pair_position(*pair)].item()

    def __add__(self, other):
        if type(other) is not type(self) or other.space != self.space:
            return NotImplemented
        return type(self)(self.space, self.values + other.values)

    def __repr__(self):
        return f"{type(self).__name__}({self.as_dict()})"

    def to_json(self):
        return json.dumps(
            {
                "kind": self.kind,
                "cells": [
                    {"source": s, "recipient": r, "value": v.item()}
                    for (s, r), v in zip(self.space.pair_labels(), self.values)
                ],
            },
            indent=2,
        )


class FlowCounts(FlowState):
    kind = "counts"

    @staticmethod
    def _dtype():
        return np.int64

    def _validate(self, v):
        if np.any(v < 0):
            raise ValueError("counts must be non-negative")

    @property
    def total(self):
        return int(self.values.sum())


class FlowIntensities(FlowState):
    kind = "intensities"

    def _validate(self, v):
        super()._validate(v)
        if np.any(v < 0):
            raise ValueError("intensities must be non-negative")


class FlowProportions(FlowState):
    kind = "proportions"

    def _validate(self, v):
        super()._validate(v)
        if np.any(v < 0):
            raise ValueError("proportions must be non-negative")
        if abs(v.sum() - 1.0) > 1e-12:
            raise ValueError(f"proportions must sum to 1, got {v.sum()!r}")

    @classmethod
    def normalize(cls, space, values):
        v = np.asarray(values, dtype=float)
        s = v.sum()
        if not s > 0:
            raise EstimatorUndefinedError("cannot normalize a zero vector")
        return cls(space, v / s)


@dataclass(frozen=True)
class ScoreMatrix:
    """Sparse direction scores between individuals.

    ``individuals`` holds ``(id, stratum_id, sampled)`` triples and ``w`` maps
    ordered ``(source_id, recipient_id)`` pairs to scores in [0, 1].
    """

    individuals: tuple
    w: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "individuals", tuple(tuple(x) for x in self.individuals))
        ids = [i[0] for i in self.individuals]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate individual ids")
        info = {i[0]: (i[1], bool(i[2])) for i in self.individuals}
        for (i, j), s in self.w.items():
            if i == j:
                raise ValueError(f"diagonal score for individual {i!r}")
            if i not in info or j not in info:
                raise ValueError(f"score ({i!r}, {j!r}) references an unknown individual")
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"score ({i!r}, {j!r}) = {s} outside [0, 1]")
            if not (info[i][1] and info[j][1]):
                raise ValueError(f"score ({i!r}, {j!r}) involves an unsampled individual")
        object.__setattr__(self, "_info", info)

    def stratum_of(self, ind):
        return self._info[ind][0]


def counts_from_scores(scores: ScoreMatrix, space: StrataSpace, zeta=0.6):
    """Count linked, sampled source-recipient pairs with score above ``zeta``."""
    if not 0.0 < zeta < 1.0:
        raise ValueError("zeta must lie in (0, 1)")
    for ind, sid, _ in scores.individuals:
        if sid not in space._index:
            raise StrataError(f"individual {ind!r} maps to unknown stratum {sid!r}")
    n = np.zeros(space.L, dtype=np.int64)
    offenders = []
    for (i, j), s in scores.w.items():
        if s <= zeta:
            continue
        a, b = scores.stratum_of(i), scores.stratum_of(j)
        k = space._pos[space.index(a), space.index(b)]
        if k < 0:
            offenders.append((i, j, a, b))
        else:
            n[k] += 1
    if offenders:
        raise MaskedPairError(f"linked pairs on structurally-zero cells: {offenders}")
    return FlowCounts(space, n)


def naive_estimate(counts: FlowCounts):
    """Observed flow proportions ``n_ab / n+``."""
    if counts.total == 0:
        raise EstimatorUndefinedError("naive estimate undefined: no observed pairs")
    return FlowProportions(counts.space, counts.values / counts.total)


def _check_weights(counts, xs, xr):
    space = counts.space
    for arr, role in ((xs, "source"), (xr, "recipient")):
        if np.any(arr < 0) or np.any(arr > 1):
            raise ValueError(f"{role} sampling probabilities must lie in [0, 1]")
    w = xs[space.pairs[:, 0]] * xr[space.pairs[:, 1]]
    bad = (w == 0) & (counts.values > 0)
    if bad.any():
        cells = [space.pair_labels()[k] for k in np.nonzero(bad)[0]]
        raise EstimatorUndefinedError(f"zero sampling probability on cells with counts: {cells}")
    return w


def adjusted_estimate(counts: FlowCounts, xi_source, xi_recipient=None):
    """Sampling-adjusted proportions ``(n_ab / w_ab) / sum(n / w)`` for given xi."""
    space = counts.space
    xs = space.xi_vector(xi_source, "xi_source")
    xr = xs if xi_recipient is None else space.xi_vector(xi_recipient, "xi_recipient")
    w = _check_weights(counts, xs, xr)
    if counts.total == 0:
        raise EstimatorUndefinedError("estimate undefined: no observed pairs")
    wo = w[counts.values > 0]
    if np.all(wo == wo[0]):
        # a common weight cancels exactly
        return naive_estimate(counts)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(counts.values > 0, counts.values / w, 0.0)
    return FlowProportions(space, r / r.sum())


def xi_from_sampled(space, sampled):
    """Point estimates ``N^s_a / N_a`` from a mapping id -> (N^s_a, N_a)."""
    xi = np.empty(space.A)
    for i, sid in enumerate(space.ids):
        if sid not in sampled:
            raise StrataError(f"no sampling totals for stratum {sid!r}")
        ns, n = sampled[sid]
        if n <= 0 or ns < 0 or ns > n:
            raise ValueError(f"invalid sampling totals for {sid!r}: ({ns}, {n})")
        xi[i] = ns / n
    return xi


def mle_estimate(counts: FlowCounts, sampled, recipient_sampled=None):
    """Maximum-likelihood flows with ``xi_a = N^s_a / N_a``.

    ``sampled`` maps stratum id to ``(N^s_a, N_a)``; ``recipient_sampled``
    optionally gives separate recipient totals.
    """
    xs = xi_from_sampled(counts.space, sampled)
    xr = None if recipient_sampled is None else xi_from_sampled(counts.space, recipient_sampled)
    return adjusted_estimate(counts, xs, xr)


def _pi_matrix(pi):
    if isinstance(pi, FlowState):
        return pi.matrix().astype(float)
    return np.asarray(pi, dtype=float)


def sources(pi: FlowProportions, b):
    """Distribution over source strata of flows into recipient ``b`` (length A)."""
    M = _pi_matrix(pi)
    j = pi.space.index(b)
    col = M[:, j]
    s = col.sum()
    if not s > 0:
        raise UndefinedFunctionalError(f"sources undefined: no inflow into {b!r}")
    return col / s


def recipients(pi: FlowProportions, a):
    """Distribution over recipient strata of flows out of source ``a`` (length A)."""
    M = _pi_matrix(pi)
    i = pi.space.index(a)
    row = M[i, :]
    s = row.sum()
    if not s > 0:
        raise UndefinedFunctionalError(f"recipients undefined: no outflow from {a!r}")
    return row / s


def flow_ratio(pi: FlowProportions, a, b):
    """Ratio ``pi_ab / pi_ba``."""
    space = pi.space
    if space.is_masked(a, b) or space.is_masked(b, a):
        raise UndefinedFunctionalError(f"flow ratio {a!r}/{b!r} involves a masked pair")
    num, den = pi[(a, b)], pi[(b, a)]
    if not den > 0:
        raise UndefinedFunctionalError(f"flow ratio undefined: pi[{b}->{a}] = 0")
    return num / den


@dataclass(frozen=True)
class SummaryFunctionals:
    """All defined source, recipient and ratio functionals of one flow vector."""

    space: StrataSpace
    sources: dict
    recipients: dict
    ratios: dict

    def to_json(self):
        ids = list(self.space.ids)
        return json.dumps(
            {
                "strata": ids,
                "sources": {b: dict(zip(ids, v.tolist())) for b, v in self.sources.items()},
                "recipients": {a: dict(zip(ids, v.tolist())) for a, v in self.recipients.items()},
                "ratios": [
                    {"source": a, "recipient": b, "value": v} for (a, b), v in self.ratios.items()
                ],
            },
            indent=2,
        )


def summary_functionals(pi: FlowProportions):
    space = pi.space
    src, rec, rat = {}, {}, {}
    for sid in space.ids:
        try:
            src[sid] = sources(pi, sid)
        except UndefinedFunctionalError:
            pass
        try:
            rec[sid] = recipients(pi, sid)
        except UndefinedFunctionalError:
            pass
    for a, b in space.pair_labels():
        if a == b:
            continue
        try:
            rat[(a, b)] = flow_ratio(pi, a, b)
        except UndefinedFunctionalError:
            pass
    return SummaryFunctionals(space, src, rec, rat)


def coarse_space(space: StrataSpace, mapping):
    """Build the coarse strata space induced by a fine->coarse id mapping."""
    missing = [s for s in space.ids if s not in mapping]
    if missing:
        raise StrataError(f"aggregation mapping misses strata {missing}")
    order = []
    for s in space.ids:
        c = mapping[s]
        if c not in order:
            order.append(c)
    members = {c: [space.stratum(s) for s in space.ids if mapping[s] == c] for c in order}

    def common(vals):
        vals = set(vals)
        return vals.pop() if len(vals) == 1 else None

    strata = []
    for c in order:
        ms = members[c]
        strata.append(
            Stratum(
                c,
                gender=common(m.gender for m in ms) or "U",
                age=common(m.age for m in ms),
                location=common(m.location for m in ms),
            )
        )
    cidx = np.array([order.index(mapping[s]) for s in space.ids])
    C = len(order)
    open_ = np.zeros((C, C), dtype=bool)
    open_[cidx[space.pairs[:, 0]], cidx[space.pairs[:, 1]]] = True
    return StrataSpace(strata, zero_mask=~open_)


def aggregate(state: FlowState, mapping, target: StrataSpace | None = None):
    """Sum fine cells into coarse cells given a fine->coarse stratum id mapping."""
    space = state.space
    missing = [s for s in space.ids if s not in mapping]
    if missing:
        raise StrataError(f"aggregation mapping misses strata {missing}")
    cs = coarse_space(space, mapping) if target is None else target
    ci = np.array([cs.index(mapping[s]) for s in space.ids])
    a = ci[space.pairs[:, 0]]
    b = ci[space.pairs[:, 1]]
    pos = cs._pos[a, b]
    if np.any(pos < 0):
        raise MaskedPairError("aggregation maps an open fine cell onto a masked coarse cell")
    out = np.zeros(cs.L, dtype=state.values.dtype)
    np.add.at(out, pos, state.values)
    if isinstance(state, FlowProportions):
        return FlowProportions(cs, out / out.sum())
    return type(state)(cs, out)


def expected_total(counts: FlowCounts, xi_source, xi_recipient=None):
    """Expected number of transmission events implied by counts and sampling.

    Observed cells contribute ``n / w`` and empty cells ``(1 - w) / w`` with
    ``w = xi_S[a] * xi_R[b]``.
    """
    w = counts.space.pair_weights(xi_source, xi_recipient)
    if np.any(w <= 0):
        raise ValueError("expected total undefined: a pair has zero sampling probability")
    n = counts.values
    return float(np.sum(np.where(n > 0, n / w, (1.0 - w) / w)))
