"""Posterior summaries of flow functionals.

Functionals are evaluated on every posterior draw of ``pi`` and only then
summarised, so intervals refer to the functional itself rather than to a
transformation of summarised flows.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ..strata import StrataSpace, coarse_space

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
FUNCTIONALS = ("flows", "sources", "recipients", "ratio", "cv", "age_gap")
AGE_GAP_CATEGORIES = ("younger_or_same", "older_1_5", "older_over_5")


@dataclass
class SummaryTable:
    functional: str
    keys: list  # column names identifying a row
    rows: list  # dicts

    columns = ("mean", "sd", "cv", "q2.5", "q25", "median", "q75", "q97.5", "undefined_fraction", "flagged")

    def to_csv(self, fh=None):
        own = fh is None
        fh = io.StringIO() if own else fh
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(self.keys) + list(self.columns))
        for r in self.rows:
            vals = []
            for c in self.columns:
                v = r[c]
                if isinstance(v, (bool, np.bool_)):
                    vals.append(str(bool(v)).lower())
                elif v is None or (isinstance(v, float) and not np.isfinite(v)):
                    vals.append("")
                else:
                    vals.append(f"{v:.8g}")
            w.writerow([r[k] for k in self.keys] + vals)
        return fh.getvalue() if own else None

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)


def pi_matrices(draws, space: StrataSpace, name="pi"):
    """Pooled draws of ``pi`` as an ``(S, A, A)`` array (zeros on masked pairs)."""
    P = draws.get(name, flatten=True) if hasattr(draws, "get") else np.asarray(draws, dtype=float)
    if P.shape[1] != space.L:
        raise ValueError(f"draws have {P.shape[1]} flow cells, space has {space.L}")
    M = np.zeros((P.shape[0], space.A, space.A))
    M[:, space.pairs[:, 0], space.pairs[:, 1]] = P
    return M


def aggregate_matrices(M, space: StrataSpace, mapping):
    """Sum fine ``(S, A, A)`` flow draws into the coarse space induced by ``mapping``."""
    cs = coarse_space(space, mapping)
    ci = np.array([cs.index(mapping[s]) for s in space.ids])
    C = cs.A
    out = np.zeros((M.shape[0], C, C))
    R = np.zeros((space.A, C))
    R[np.arange(space.A), ci] = 1.0
    out = np.einsum("ia,sij,jb->sab", R, M, R)
    return out, cs


def _summ(x):
    """Summary statistics of a vector of per-draw values (NaN = undefined)."""
    ok = np.isfinite(x)
    frac = 1.0 - ok.mean()
    v = x[ok]
    row = {"undefined_fraction": float(frac), "flagged": bool(frac > 0.5)}
    if v.size == 0:
        row.update({k: float("nan") for k in ("mean", "sd", "cv", "q2.5", "q25", "median", "q75", "q97.5")})
        return row
    q = np.quantile(v, QUANTILES)
    mean = float(v.mean())
    # identical draws give sd exactly 0 (std can round to ~1e-16 otherwise)
    sd = float(v.std(ddof=1)) if v.size > 1 and np.ptp(v) > 0 else 0.0
    if sd == 0.0:
        cv = 0.0
    else:
        cv = sd / mean if mean != 0 else float("nan")
    row.update(
        {
            "mean": mean,
            "sd": sd,
            "cv": cv,
            "q2.5": float(q[0]),
            "q25": float(q[1]),
            "median": float(q[2]),
            "q75": float(q[3]),
            "q97.5": float(q[4]),
        }
    )
    return row


def _ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def functional_draws(M, space: StrataSpace, functional):
    """Per-draw values of a functional: returns (keys, labels, values (S, k))."""
    A = space.A
    ids = space.ids
    open_ = ~space.mask
    if functional in ("flows", "cv"):
        vals = M[:, space.pairs[:, 0], space.pairs[:, 1]]
        return ("source", "recipient"), space.pair_labels(), vals
    if functional == "sources":
        col = M.sum(axis=1)  # (S, A) inflow per recipient
        labels, cols = [], []
        for b in range(A):
            for a in range(A):
                if open_[a, b]:
                    labels.append((ids[b], ids[a]))
                    cols.append(_ratio(M[:, a, b], col[:, b]))
        return ("recipient", "source"), labels, np.column_stack(cols)
    if functional == "recipients":
        row = M.sum(axis=2)
        labels, cols = [], []
        for a in range(A):
            for b in range(A):
                if open_[a, b]:
                    labels.append((ids[a], ids[b]))
                    cols.append(_ratio(M[:, a, b], row[:, a]))
        return ("source", "recipient"), labels, np.column_stack(cols)
    if functional == "ratio":
        labels, cols = [], []
        for a in range(A):
            for b in range(A):
                if a != b and open_[a, b] and open_[b, a]:
                    labels.append((ids[a], ids[b]))
                    cols.append(_ratio(M[:, a, b], M[:, b, a]))
        if not cols:
            return ("source", "recipient"), [], np.zeros((M.shape[0], 0))
        return ("source", "recipient"), labels, np.column_stack(cols)
    if functional == "age_gap":
        return age_gap_draws(M, space)
    raise ValueError(f"unknown functional {functional!r}; choose from {FUNCTIONALS}")


def age_gap_category(source_age, recipient_age):
    d = source_age - recipient_age
    if d <= 0:
        return AGE_GAP_CATEGORIES[0]
    if d <= 5:
        return AGE_GAP_CATEGORIES[1]
    return AGE_GAP_CATEGORIES[2]


def age_gap_draws(M, space: StrataSpace):
    """Share of infections in each female recipient stratum by male source age gap."""
    ids = space.ids
    col = M.sum(axis=1)
    labels, cols = [], []
    for b, sb in enumerate(space.strata):
        if sb.gender != "F":
            continue
        if not isinstance(sb.age, (int, np.integer)):
            raise ValueError("age-gap breakdown needs integer ages")
        groups = {c: [] for c in AGE_GAP_CATEGORIES}
        for a, sa in enumerate(space.strata):
            if sa.gender == "M" and not space.mask[a, b]:
                groups[age_gap_category(sa.age, sb.age)].append(a)
        for c in AGE_GAP_CATEGORIES:
            idx = groups[c]
            num = M[:, idx, b].sum(axis=1) if idx else np.zeros(M.shape[0])
            labels.append((ids[b], c))
            cols.append(_ratio(num, col[:, b]))
    if not cols:
        raise ValueError("age-gap breakdown needs female recipient strata")
    return ("recipient", "category"), labels, np.column_stack(cols)


def summarize(draws, space: StrataSpace, functional="flows", mapping=None, name="pi"):
    """Quantile table of a functional of posterior flow draws.

    ``draws`` is a :class:`PosteriorDraws` (the ``name`` block is used) or an
    ``(S, L)`` array of flow draws on ``space``.  ``mapping`` optionally
    aggregates strata (fine id -> coarse id) per draw before the functional.
    """
    M = pi_matrices(draws, space, name)
    sp = space
    if mapping is not None:
        M, sp = aggregate_matrices(M, space, mapping)
    keys, labels, vals = functional_draws(M, sp, functional)
    rows = []
    for lab, j in zip(labels, range(vals.shape[1])):
        r = dict(zip(keys, lab))
        r.update(_summ(vals[:, j]))
        rows.append(r)
    return SummaryTable(functional, list(keys), rows)
