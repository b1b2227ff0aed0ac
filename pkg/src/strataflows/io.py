"""CSV readers and writers for strata, scores, counts, stage counts and draws.

Every file carries a header row; fields are quoted only where needed.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .cascade import StageCounts
from .strata import FlowCounts, FlowState, ScoreMatrix, StrataError, StrataSpace, Stratum


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def _rows(path, required):
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from e
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {missing}")
        return list(reader)


def _writer(path, header):
    fh = Path(path).open("w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    return fh, w


def _num(v):
    """Shortest round-tripping text for a float; integers stay integers."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# strata


def _age(text):
    text = text.strip()
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return text


def read_strata(path, gender_semantics=None):
    """Strata file with columns ``id, gender, age, location``.

    ``gender_semantics`` defaults to masking same-gender pairs whenever every
    stratum has gender ``M`` or ``F``.
    """
    rows = _rows(path, ("id", "gender", "age", "location"))
    try:
        strata = [
            Stratum(r["id"], r["gender"].strip() or "U", _age(r["age"]), r["location"].strip() or None)
            for r in rows
        ]
    except StrataError as e:
        raise InputError(f"{path}: {e}") from e
    if gender_semantics is None:
        gender_semantics = bool(strata) and all(s.gender in ("M", "F") for s in strata)
    try:
        return StrataSpace(strata, gender_semantics=gender_semantics)
    except StrataError as e:
        raise InputError(f"{path}: {e}") from e


def write_strata(space: StrataSpace, path):
    fh, w = _writer(path, ["id", "gender", "age", "location"])
    with fh:
        for s in space.strata:
            w.writerow([s.id, s.gender, "" if s.age is None else s.age, s.location or ""])


# ---------------------------------------------------------------------------
# scores and counts


def read_scores(scores_path, individuals_path):
    """Scores (``source_id, recipient_id, score``) plus individuals (``id, stratum, sampled``)."""
    inds = _rows(individuals_path, ("id", "stratum", "sampled"))
    individuals = [(r["id"], r["stratum"], r["sampled"].strip().lower() in ("1", "true", "yes")) for r in inds]
    w = {}
    for r in _rows(scores_path, ("source_id", "recipient_id", "score")):
        try:
            w[(r["source_id"], r["recipient_id"])] = float(r["score"])
        except ValueError as e:
            raise InputError(f"{scores_path}: bad score {r['score']!r}") from e
    try:
        return ScoreMatrix(individuals, w)
    except ValueError as e:
        raise InputError(str(e)) from e


def read_counts(path, space: StrataSpace):
    """Counts file with columns ``source_stratum, recipient_stratum, count``.

    Cells absent from the file are zero; a positive count on a masked pair
    or an unknown stratum is an error.
    """
    n = np.zeros(space.L, dtype=np.int64)
    for r in _rows(path, ("source_stratum", "recipient_stratum", "count")):
        a, b = r["source_stratum"], r["recipient_stratum"]
        try:
            c = int(r["count"])
        except ValueError as e:
            raise InputError(f"{path}: non-integer count {r['count']!r}") from e
        if c < 0:
            raise InputError(f"{path}: negative count for {a}->{b}")
        try:
            k = space.pair_position(a, b)
        except (KeyError, StrataError) as e:
            if c == 0 and a in space.ids and b in space.ids:
                continue
            raise InputError(f"{path}: {e}") from e
        n[k] += c
    return FlowCounts(space, n)


def write_flow(state: FlowState, path, column="count"):
    fh, w = _writer(path, ["source_stratum", "recipient_stratum", column])
    with fh:
        for (a, b), v in zip(state.space.pair_labels(), state.values):
            w.writerow([a, b, _num(v)])


# ---------------------------------------------------------------------------
# cascade inputs and outputs


def read_stage_counts(path):
    """Stage counts (``stratum_id, trials, successes, stage, role``) grouped by (stage, role)."""
    groups = {}
    for r in _rows(path, ("stratum_id", "trials", "successes", "stage", "role")):
        key = (r["stage"], r["role"] or None)
        groups.setdefault(key, []).append(r)
    out = {}
    for (stage, role), rows in groups.items():
        try:
            out[(stage, role)] = StageCounts(
                [r["stratum_id"] for r in rows],
                [int(r["trials"]) for r in rows],
                [int(r["successes"]) for r in rows],
                stage,
                role,
            )
        except ValueError as e:
            raise InputError(f"{path}: stage {stage!r}: {e}") from e
    return out


def write_stage_counts(stages, path):
    fh, w = _writer(path, ["stratum_id", "trials", "successes", "stage", "role"])
    with fh:
        for st in stages:
            for i, t, s in zip(st.ids, st.trials, st.successes):
                w.writerow([i, int(t), int(s), st.stage, st.role or ""])


def write_xi_draws(ids, draws, path):
    """Per-stratum draws as ``stratum, draw_index, value``."""
    draws = np.asarray(draws, dtype=float)
    fh, w = _writer(path, ["stratum", "draw_index", "value"])
    with fh:
        for a, sid in enumerate(ids):
            for d in range(draws.shape[0]):
                w.writerow([sid, d, _num(draws[d, a])])


def read_xi_draws(path):
    """``{stratum: array of draws}`` ordered by draw index."""
    acc = {}
    for r in _rows(path, ("stratum", "draw_index", "value")):
        acc.setdefault(r["stratum"], []).append((int(r["draw_index"]), float(r["value"])))
    out = {}
    for sid, pairs in acc.items():
        pairs.sort()
        idx = [p[0] for p in pairs]
        if idx != list(range(len(idx))):
            raise InputError(f"{path}: draw indices for {sid!r} are not 0..{len(idx) - 1}")
        out[sid] = np.array([p[1] for p in pairs])
    return out


def read_mapping(path):
    """Aggregation mapping with columns ``fine, coarse``."""
    m = {}
    for r in _rows(path, ("fine", "coarse")):
        if r["fine"] in m and m[r["fine"]] != r["coarse"]:
            raise InputError(f"{path}: stratum {r['fine']!r} mapped twice")
        m[r["fine"]] = r["coarse"]
    return m


def write_rows(path, header, rows):
    fh, w = _writer(path, header)
    with fh:
        for r in rows:
            w.writerow(r)
