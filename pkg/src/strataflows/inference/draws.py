"""Container for MCMC output."""

from __future__ import annotations

import csv
import io

import numpy as np


class PosteriorDraws:
    """Named posterior draws of shape ``(chains, iterations, dim)``.

    Scalars are named plainly (``"sigma_fm"``); vector entries use brackets
    (``"pi[a->b]"``, ``"xi_S[a]"``).  :meth:`get` accepts either a full name
    or a block prefix, so ``draws.get("pi")`` returns every ``pi[...]`` column.
    """

    def __init__(self, names, values, stats=None):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3:
            raise ValueError("draws must have shape (chains, iterations, dim)")
        names = list(names)
        if len(names) != values.shape[2]:
            raise ValueError(f"{len(names)} names for {values.shape[2]} columns")
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError("need at least one chain and one iteration")
        self.names = names
        self.values = values
        self.stats = dict(stats or {})
        self._col = {n: i for i, n in enumerate(names)}

    @property
    def chains(self):
        return self.values.shape[0]

    @property
    def iterations(self):
        return self.values.shape[1]

    def __contains__(self, name):
        return name in self._col or bool(self.block_names(name))

    def block_names(self, prefix):
        p = prefix + "["
        return [n for n in self.names if n.startswith(p)]

    def columns(self, name):
        if name in self._col:
            return [self._col[name]]
        cols = [self._col[n] for n in self.block_names(name)]
        if not cols:
            raise KeyError(f"no parameter named {name!r}")
        return cols

    def get(self, name, flatten=False):
        """Draws of one parameter ``(chains, iters)`` or a block ``(chains, iters, k)``.

        With ``flatten=True`` chains are pooled along the first axis.
        """
        if name in self._col:
            out = self.values[:, :, self._col[name]]
            return out.reshape(-1) if flatten else out
        out = self.values[:, :, self.columns(name)]
        return out.reshape(-1, out.shape[2]) if flatten else out

    def subset(self, names):
        cols = [c for n in names for c in self.columns(n)]
        return PosteriorDraws([self.names[c] for c in cols], self.values[:, :, cols], self.stats)

    @classmethod
    def concat(cls, parts):
        """Join parameter blocks drawn jointly (same chains and iterations)."""
        names = [n for p in parts for n in p.names]
        stats = {}
        for p in parts:
            stats.update(p.stats)
        return cls(names, np.concatenate([p.values for p in parts], axis=2), stats)

    def mean(self, name):
        return self.get(name, flatten=True).mean(axis=0)

    def quantile(self, name, q):
        return np.quantile(self.get(name, flatten=True), q, axis=0)

    def to_long_csv(self, fh=None, float_format="%.10g"):
        """Write long-format CSV (chain, iteration, parameter, value)."""
        own = fh is None
        fh = io.StringIO() if own else fh
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iteration", "parameter", "value"])
        C, T, D = self.values.shape
        for c in range(C):
            for t in range(T):
                row = self.values[c, t]
                for d in range(D):
                    w.writerow([c, t, self.names[d], float_format % row[d]])
        return fh.getvalue() if own else None

    @classmethod
    def from_long_csv(cls, fh):
        r = csv.DictReader(fh)
        data = {}
        order = []
        C = T = 0
        for row in r:
            c, t, p = int(row["chain"]), int(row["iteration"]), row["parameter"]
            if p not in data:
                data[p] = {}
                order.append(p)
            data[p][(c, t)] = float(row["value"])
            C, T = max(C, c + 1), max(T, t + 1)
        vals = np.full((C, T, len(order)), np.nan)
        for j, p in enumerate(order):
            for (c, t), v in data[p].items():
                vals[c, t, j] = v
        if np.isnan(vals).any():
            raise ValueError("draws CSV is ragged: some (chain, iteration, parameter) missing")
        return cls(order, vals)
