"""Discrete Markov random fields with exact junction-tree inference.

A model over variables V with structure cliques 𝒮 represents
p(x) ∝ exp Σ_S θ_S(x_S).  Inference runs on a junction tree obtained by
min-fill triangulation; beliefs are kept calibrated in log space (Hugin
architecture) so that an update to one clique potential is propagated with a
single outward pass.  Parameters are fitted to target marginals with
iterative proportional fitting.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import networkx as nx
import numpy as np
from networkx.utils import UnionFind

from .errors import NonConvergence, WidthExceeded

log = logging.getLogger(__name__)

Var = Hashable
FLOOR = 1e-300
LOG_FLOOR = np.log(FLOOR)
DEFAULT_CELL_CAP = 10 ** 7
EINSUM_LETTERS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"


# ------------------------------------------------------------ junction tree

@dataclass
class JunctionTree:
    variables: list
    domains: dict
    cliques: list[tuple]
    edges: list[tuple[int, int]]

    def __post_init__(self):
        self.g = nx.Graph()
        self.g.add_nodes_from(range(len(self.cliques)))
        self.g.add_edges_from(self.edges)
        self.separators = {}
        for i, j in self.edges:
            sep = tuple(v for v in self.cliques[i] if v in set(self.cliques[j]))
            self.separators[(i, j)] = sep
            self.separators[(j, i)] = sep

    @property
    def cells(self) -> int:
        return sum(_cells(c, self.domains) for c in self.cliques)

    def check_running_intersection(self) -> None:
        for v in self.variables:
            holders = [i for i, c in enumerate(self.cliques) if v in c]
            assert holders, f"variable {v!r} not covered"
            assert nx.is_connected(self.g.subgraph(holders)), f"running intersection fails for {v!r}"

    def home(self, vars_: Sequence) -> int | None:
        """Index of the smallest clique containing all of ``vars_``."""
        want = set(vars_)
        best = None
        for i, c in enumerate(self.cliques):
            if want <= set(c) and (best is None or _cells(c, self.domains) < _cells(self.cliques[best], self.domains)):
                best = i
        return best


def _cells(vars_, domains) -> int:
    n = 1
    for v in vars_:
        n *= domains[v]
    return n


def build_junction_tree(variables: Sequence, domains: Mapping, cliques: Sequence[Sequence],
                        cell_cap: float = DEFAULT_CELL_CAP) -> JunctionTree:
    """Min-fill triangulation, maximal cliques, maximum-weight spanning tree."""
    variables = list(variables)
    if not variables:
        raise ValueError("empty structure")
    order = {v: i for i, v in enumerate(variables)}
    adj = {v: set() for v in variables}
    for c in cliques:
        for a, b in itertools.combinations(c, 2):
            adj[a].add(b)
            adj[b].add(a)
    work = {v: set(n) for v, n in adj.items()}
    remaining = set(variables)
    elim_cliques = []
    while remaining:
        def fill(v):
            nb = list(work[v])
            return sum(1 for a, b in itertools.combinations(nb, 2) if b not in work[a])
        v = min(remaining, key=lambda u: (fill(u), len(work[u]), order[u]))
        nb = work[v]
        for a, b in itertools.combinations(nb, 2):
            work[a].add(b)
            work[b].add(a)
        elim_cliques.append(frozenset(nb | {v}))
        for u in nb:
            work[u].discard(v)
        remaining.discard(v)
        del work[v]
    maximal = []
    for c in elim_cliques:
        if not any(c < d for d in elim_cliques) and c not in maximal:
            maximal.append(c)
    jt_cliques = sorted((tuple(sorted(c, key=order.__getitem__)) for c in maximal),
                        key=lambda c: [order[v] for v in c])
    total = sum(_cells(c, domains) for c in jt_cliques)
    if total > cell_cap:
        raise WidthExceeded(f"junction tree needs {total} cells > cap {int(cell_cap)}")
    cand = []
    for i, j in itertools.combinations(range(len(jt_cliques)), 2):
        w = len(set(jt_cliques[i]) & set(jt_cliques[j]))
        cand.append((-w, i, j))
    cand.sort()
    uf = UnionFind(range(len(jt_cliques)))
    edges = []
    for _, i, j in cand:
        if uf[i] != uf[j]:
            uf.union(i, j)
            edges.append((i, j))
    jt = JunctionTree(variables, dict(domains), jt_cliques, edges)
    jt.check_running_intersection()
    return jt


# ----------------------------------------------------------------- helpers

def _expand(table: np.ndarray, src: Sequence, dst: Sequence) -> np.ndarray:
    """View of ``table`` (axes ``src``) broadcastable against axes ``dst``."""
    src = list(src)
    present = [v for v in dst if v in src]
    t = np.transpose(table, [src.index(v) for v in present]) if len(src) > 1 else table
    shape = [table.shape[src.index(v)] if v in src else 1 for v in dst]
    return np.reshape(t, shape)


def logsumexp(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray | float:
    """log Σ exp over ``axis``; all -inf slices give -inf.  (A lean stand-in for scipy's.)"""
    a = np.asarray(a)
    top = np.max(a, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - top), axis=axis, keepdims=True)) + top
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out if out.ndim else float(out)


def _marg_log(belief: np.ndarray, src: Sequence, keep: Sequence) -> np.ndarray:
    """log Σ over axes not in ``keep``; result axes in ``keep`` order."""
    src = list(src)
    drop = tuple(i for i, v in enumerate(src) if v not in keep)
    t = logsumexp(belief, axis=drop) if drop else belief
    rest = [v for v in src if v in keep]
    if len(rest) > 1:
        t = np.transpose(t, [rest.index(v) for v in keep])
    return np.asarray(t)


def project_simplex(t: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection of ``t`` onto {x >= 0, sum(x) = total}.

    Unlike clipping negatives to zero, this does not add mass to the
    near-empty cells of a noisy table (which flattens correlations).
    """
    t = np.asarray(t, dtype=np.float64)
    u = np.sort(t.ravel())[::-1]
    css = np.cumsum(u) - total
    rho = np.nonzero(u * np.arange(1, u.size + 1) > css)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(t - theta, 0.0)


def _normalize_target(t: np.ndarray, total: float | None = None) -> np.ndarray:
    """Project a noisy count table onto tables summing to ``total`` (or its
    clipped mass), then normalize."""
    t = np.asarray(t, dtype=np.float64)
    s = float(total) if total is not None and total > 0 else float(np.clip(t, 0, None).sum())
    if s <= 0:
        return np.full(t.shape, 1.0 / t.size)
    return project_simplex(t, s) / s


# --------------------------------------------------------------------- MRF

class MRF:
    """A log-linear model with one parameter table per structure clique."""

    def __init__(self, variables: Sequence, domains: Mapping, cliques: Sequence[Sequence],
                 theta: Mapping | None = None, cell_cap: float = DEFAULT_CELL_CAP, tag=None):
        self.variables = list(variables)
        self.domains = {v: int(domains[v]) for v in self.variables}
        cl = [tuple(c) for c in cliques]
        covered = set(itertools.chain.from_iterable(cl))
        for v in self.variables:
            if v not in covered:
                cl.append((v,))
        self.cliques = list(dict.fromkeys(cl))
        self.tag = tag
        self.cell_cap = cell_cap
        self.jt = build_junction_tree(self.variables, self.domains, self.cliques, cell_cap)
        self.theta = {}
        for c in self.cliques:
            shape = tuple(self.domains[v] for v in c)
            if theta is not None and c in theta:
                self.theta[c] = np.array(theta[c], dtype=np.float64).reshape(shape)
            else:
                self.theta[c] = np.zeros(shape)
        self.assign = {c: self.jt.home(c) for c in self.cliques}
        self.gap_history: list[float] = []
        self._cache: dict = {}
        self.calibrate()

    # -- propagation ------------------------------------------------------
    def calibrate(self) -> None:
        jt = self.jt
        beliefs = []
        for i, c in enumerate(jt.cliques):
            b = np.zeros(tuple(self.domains[v] for v in c))
            for sc, home in self.assign.items():
                if home == i:
                    b = b + _expand(self.theta[sc], sc, c)
            beliefs.append(b)
        self.beliefs = beliefs
        self.seps = {}
        for i, j in jt.edges:
            sep = jt.separators[(i, j)]
            self.seps[frozenset((i, j))] = np.zeros(tuple(self.domains[v] for v in sep))
        root = 0
        order = list(nx.dfs_preorder_nodes(jt.g, root))
        parent = {root: None}
        for u, v in nx.dfs_edges(jt.g, root):
            parent[v] = u
        for v in reversed(order):  # collect
            if parent[v] is not None:
                self._pass(v, parent[v])
        for v in order:  # distribute
            if parent[v] is not None:
                self._pass(parent[v], v)
        self.logZ = float(logsumexp(self.beliefs[root]))
        self._cache = {}

    def _pass(self, src: int, dst: int) -> None:
        jt = self.jt
        sep_vars = jt.separators[(src, dst)]
        key = frozenset((src, dst))
        new = _marg_log(self.beliefs[src], jt.cliques[src], sep_vars)
        self.beliefs[dst] = self.beliefs[dst] + _expand(new - self.seps[key], sep_vars, jt.cliques[dst])
        self.seps[key] = new

    def _update(self, clique: tuple, delta: np.ndarray) -> None:
        """Add ``delta`` to θ_clique and re-calibrate by one outward pass."""
        self.theta[clique] = self.theta[clique] + delta
        home = self.assign[clique]
        self.beliefs[home] = self.beliefs[home] + _expand(delta, clique, self.jt.cliques[home])
        for u, v in nx.bfs_edges(self.jt.g, home):
            self._pass(u, v)
        self.logZ = float(logsumexp(self.beliefs[home]))
        self._cache = {}

    # -- queries ----------------------------------------------------------
    def marginal_of(self, attrs: Sequence) -> np.ndarray:
        """Normalized marginal table on ``attrs`` (axes in ``attrs`` order)."""
        attrs = tuple(attrs)
        if not attrs:
            return np.array(1.0)
        if attrs in self._cache:
            return self._cache[attrs]
        home = self.jt.home(attrs)
        if home is not None:
            t = np.exp(_marg_log(self.beliefs[home], self.jt.cliques[home], attrs) - self.logZ)
        else:
            t = self._marginal_product(attrs)
            if t is None or not np.isfinite(t).all() or abs(float(t.sum()) - 1.0) > 1e-6:
                t = self._eliminate(attrs, {})
        t = t / t.sum()
        self._cache[attrs] = t
        return t

    def _steiner(self, vars_: Sequence) -> list[int]:
        anchors = []
        for v in vars_:
            anchors.append(next(i for i, c in enumerate(self.jt.cliques) if v in c))
        nodes = {anchors[0]}
        for a in anchors[1:]:
            nodes.update(nx.shortest_path(self.jt.g, anchors[0], a))
        return sorted(nodes)

    def _marginal_product(self, attrs: tuple) -> np.ndarray | None:
        """Marginal over ``attrs`` as Π clique marginals / Π separator marginals
        on the Steiner subtree, contracted with einsum (probability space)."""
        nodes = self._steiner(attrs)
        node_set = set(nodes)
        letters: dict = {}

        def sub(vars_):
            for v in vars_:
                if v not in letters:
                    if len(letters) == len(EINSUM_LETTERS):
                        raise WidthExceeded("too many variables for einsum")
                    letters[v] = EINSUM_LETTERS[len(letters)]
            return "".join(letters[v] for v in vars_)

        ops, subs = [], []
        try:
            for i in nodes:
                ops.append(np.exp(self.beliefs[i] - self.logZ))
                subs.append(sub(self.jt.cliques[i]))
            for i, j in self.jt.edges:
                if i in node_set and j in node_set:
                    p = np.exp(self.seps[frozenset((i, j))] - self.logZ)
                    ops.append(np.divide(1.0, p, out=np.zeros_like(p), where=p > FLOOR))
                    subs.append(sub(self.jt.separators[(i, j)]))
            spec = ",".join(subs) + "->" + sub(attrs)
        except WidthExceeded:
            return None
        return np.asarray(np.einsum(spec, *ops, optimize=True))

    def _eliminate(self, keep: Sequence, evidence: Mapping, nodes: Sequence[int] | None = None) -> np.ndarray:
        """Normalized table over ``keep`` given ``evidence``, by a log-domain
        collect pass over a connected subtree of the calibrated junction tree."""
        keep = tuple(keep)
        if nodes is None:
            nodes = self._steiner(keep + tuple(evidence))
        nodes = set(nodes)
        keep_set = set(keep)

        def sliced(vars_, logt):
            t = logt[tuple(evidence[v] if v in evidence else slice(None) for v in vars_)]
            return [v for v in vars_ if v not in evidence], t

        def collect(node: int, parent: int | None):
            vars_, t = sliced(self.jt.cliques[node], self.beliefs[node])
            sep = []
            if parent is not None:
                sv, st = sliced(self.jt.separators[(parent, node)], self.seps[frozenset((parent, node))])
                t = t - _expand(st, sv, vars_)
                sep = sv
            for child in self.jt.g.neighbors(node):
                if child == parent or child not in nodes:
                    continue
                cv, ct = collect(child, node)
                union = vars_ + [v for v in cv if v not in vars_]
                t = _expand(t, vars_, union) + _expand(ct, cv, union)
                vars_ = union
            out = [v for v in vars_ if v in keep_set or v in sep]
            return out, np.asarray(_marg_log(t, vars_, out) if len(out) < len(vars_) else t)

        root = min(nodes)
        vars_, t = collect(root, None)
        t = np.asarray(_marg_log(t, vars_, keep))
        if not keep:
            return np.array(1.0)
        return np.exp(t - logsumexp(t))

    def conditional(self, target, evidence: Mapping) -> np.ndarray:
        """p(target | evidence); falls back to p(target) if the evidence has zero mass."""
        evidence = {v: int(x) for v, x in evidence.items() if v != target}
        if not evidence:
            return self.marginal_of((target,))
        t = self._eliminate((target,), evidence)
        s = t.sum()
        if not np.isfinite(s) or s <= 0:
            return self.marginal_of((target,))
        return t / s

    def conditional_complete(self, target, others: Sequence, values: np.ndarray) -> np.ndarray:
        """p(target | all other variables) for a batch of rows.

        ``values`` is (n, len(others)); only cliques touching ``target``
        contribute, so this is exact and cheap.
        """
        values = np.asarray(values, dtype=np.int64)
        n = values.shape[0]
        dt = self.domains[target]
        logits = np.zeros((n, dt))
        pos = {v: j for j, v in enumerate(others)}
        for c in self.cliques:
            if target not in c:
                continue
            th = self.theta[c]
            tpos = c.index(target)
            th = np.moveaxis(th, tpos, -1)
            rest = [v for v in c if v != target]
            if rest:
                flat = np.ravel_multi_index(tuple(values[:, pos[v]] for v in rest),
                                            tuple(self.domains[v] for v in rest))
                logits += th.reshape(-1, dt)[flat]
            else:
                logits += th[None, :]
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Forward-sample ``n`` rows (columns in ``variables`` order)."""
        jt = self.jt
        out = np.full((n, len(self.variables)), -1, dtype=np.int64)
        col = {v: j for j, v in enumerate(self.variables)}
        if n == 0:
            return out
        root = 0
        b = self.beliefs[root]
        p = np.exp(b - logsumexp(b)).ravel()
        draw = _categorical(np.broadcast_to(p, (n, p.size)), rng)
        vals = np.unravel_index(draw, b.shape)
        for v, x in zip(jt.cliques[root], vals):
            out[:, col[v]] = x
        for u, v in nx.bfs_edges(jt.g, root):
            c = jt.cliques[v]
            sep = jt.separators[(u, v)]
            new = [x for x in c if x not in sep]
            if not new:
                continue
            t = np.transpose(self.beliefs[v], [c.index(x) for x in list(sep) + new])
            sep_shape = tuple(self.domains[x] for x in sep)
            new_shape = tuple(self.domains[x] for x in new)
            t = t.reshape(int(np.prod(sep_shape, dtype=np.int64)), -1)
            t = np.exp(t - logsumexp(t, axis=1, keepdims=True))
            if sep:
                sidx = np.ravel_multi_index(tuple(out[:, col[x]] for x in sep), sep_shape)
            else:
                sidx = np.zeros(n, dtype=np.int64)
            draw = _categorical(t[sidx], rng)
            for x, val in zip(new, np.unravel_index(draw, new_shape)):
                out[:, col[x]] = val
        return out

    def joint(self) -> np.ndarray:
        """Full normalized joint over ``variables`` (small models only)."""
        t = self._eliminate(tuple(self.variables), {}, list(range(len(self.jt.cliques))))
        return t / t.sum()

    def to_json(self) -> dict:
        return {
            "variables": [str(v) for v in self.variables],
            "domains": [self.domains[v] for v in self.variables],
            "cliques": [[str(v) for v in c] for c in self.cliques],
            "theta": [self.theta[c].ravel().tolist() for c in self.cliques],
        }


def _categorical(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a (n, k) probability matrix."""
    c = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0]) * c[:, -1]
    idx = (c < u[:, None]).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


# -------------------------------------------------------------- estimation

def estimate(variables: Sequence, domains: Mapping, targets: Mapping[tuple, np.ndarray],
             total: float | None = None, tol: float = 1e-3, max_iters: int = 2000,
             init: MRF | None = None, cell_cap: float = DEFAULT_CELL_CAP, stall: float = 1e-5,
             tag=None) -> MRF:
    """Fit θ so the model's clique marginals match ``targets`` (IPF sweeps).

    Targets are noisy count tables: each is projected onto the nonnegative
    tables summing to ``total`` and then normalized.  Stops when the largest per-clique L1 gap is at most ``tol``, when a
    sweep improves it by less than a ``stall`` fraction, or after
    ``max_iters`` sweeps.
    """
    cliques = [tuple(c) for c in targets]
    theta = None
    if init is not None:
        theta = {c: t for c, t in init.theta.items() if c in set(cliques) or len(c) == 1}
    model = MRF(variables, domains, cliques, theta, cell_cap, tag=tag)
    dist = {c: _normalize_target(targets[c], total) for c in cliques}
    logt = {c: np.log(np.maximum(dist[c], FLOOR)) for c in cliques}

    def gap() -> float:
        return max((float(np.abs(model.marginal_of(c) - dist[c]).sum()) for c in cliques), default=0.0)

    history = [gap()]
    it = 0
    while history[-1] > tol and it < max_iters:
        for c in cliques:
            m = model.marginal_of(c)
            model._update(c, logt[c] - np.log(np.maximum(m, FLOOR)))
        history.append(gap())
        it += 1
        prev, cur = history[-2], history[-1]
        if prev - cur <= stall * prev:
            break
    model.gap_history = history
    if history[-1] > 1e-2 and it >= max_iters:
        msg = f"estimation stopped at {max_iters} sweeps with gap {history[-1]:.3g}"
        log.warning(msg)
        warnings.warn(msg, NonConvergence, stacklevel=2)
    return model


def h_score(npms: Mapping[int, np.ndarray], models: Mapping[int, MRF], attrs: Sequence,
            totals: Mapping[int, float]) -> float:
    """Σ_s ‖M_{S,s} − ñ_s · p_s(S)‖₁ over the group sizes present in ``npms``."""
    h = 0.0
    for s, m in npms.items():
        p = models[s].marginal_of(tuple(attrs)) * totals[s]
        h += float(np.abs(np.asarray(m) - p).sum())
    return h
