"""Utility evaluation: random group-count queries, Pearson reports, the
random-link baseline and a planted-correlation toy-data generator."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateVariance, InfeasibleHistogram
from .relational import (AttributeSpec, Database, FlattenedRelation, ForeignKey, Relation, RelationSchema,
                         group_sizes, is_size_attr)

log = logging.getLogger(__name__)

Predicate = tuple[tuple[str, frozenset], ...]   # conjunctive clauses (attribute, allowed codes)


@dataclass(frozen=True)
class GroupQuery:
    """Households with exactly ``s`` members, satisfying ``p_h`` and containing
    ``c`` distinct members p_1..p_c with p_j satisfying ``p_i[j]``."""

    s: int
    p_h: Predicate
    p_i: tuple[Predicate, ...]

    @property
    def c(self) -> int:
        return len(self.p_i)

    def to_json(self) -> dict:
        def pred(p):
            return [{"attribute": a, "values": sorted(int(v) for v in vals)} for a, vals in p]
        return {"s": self.s, "household": pred(self.p_h), "individuals": [pred(p) for p in self.p_i]}


def set_size(selectivity: float, k: int, domain: int) -> int:
    """|S_A| for one clause when the query has ``k`` attribute clauses in total."""
    return max(1, int(math.floor(selectivity ** (1.0 / k) * domain + 1e-9)))


def gen_queries(household: RelationSchema, individual: RelationSchema, count: int, selectivity: float, c: int,
                rng: np.random.Generator, max_size: int) -> list[GroupQuery]:
    """Random queries: each predicate has 1 or 2 clauses on distinct attributes."""
    if not 0 < selectivity < 1:
        raise ValueError("selectivity must lie in (0, 1)")
    if c not in (1, 2):
        raise ValueError("c must be 1 or 2")
    h_attrs = [a for a in household.attributes if not is_size_attr(a.name)]
    i_attrs = list(individual.attributes)
    out = []
    for _ in range(count):
        s = int(rng.integers(1, max_size + 1))
        picks = []
        for pool in [h_attrs] + [i_attrs] * c:
            m = int(rng.integers(1, min(2, len(pool)) + 1)) if pool else 0
            picks.append([pool[j] for j in sorted(rng.choice(len(pool), m, replace=False))] if m else [])
        k = sum(len(p) for p in picks)

        def clause(a: AttributeSpec):
            size = min(set_size(selectivity, k, a.domain_size), a.domain_size)
            return (a.name, frozenset(int(v) for v in rng.choice(a.domain_size, size, replace=False)))

        preds = [tuple(clause(a) for a in p) for p in picks]
        out.append(GroupQuery(s, preds[0], tuple(preds[1:])))
    return out


def _holds(data: np.ndarray, names: Sequence[str], pred: Predicate) -> np.ndarray:
    ok = np.ones(len(data), dtype=bool)
    for a, vals in pred:
        ok &= np.isin(data[:, list(names).index(a)], list(vals))
    return ok


def _count(h_ok: np.ndarray, sizes: np.ndarray, member_ok: list[np.ndarray], owner: np.ndarray, q: GroupQuery,
           distinct: bool) -> int:
    n = len(sizes)
    sel = h_ok & (sizes == q.s)
    if q.c == 0:
        return int(sel.sum())
    cnt = [np.bincount(owner, weights=m, minlength=n) for m in member_ok]
    sel &= cnt[0] >= 1
    if q.c == 2:
        sel &= cnt[1] >= 1
        if distinct:
            either = np.bincount(owner, weights=member_ok[0] | member_ok[1], minlength=n)
            sel &= either >= 2
    return int(sel.sum())


@dataclass
class QueryContext:
    """Pre-indexed household/individual pair for answering many queries."""

    h_names: list[str]
    i_names: list[str]
    h_data: np.ndarray
    i_data: np.ndarray
    owner: np.ndarray
    sizes: np.ndarray

    @classmethod
    def from_db(cls, db: Database, individual: str, household: str, fk: str) -> "QueryContext":
        r_i, r_h = db[individual], db[household]
        index = {k: j for j, k in enumerate(r_h.keys)}
        owner = np.array([index[v] for v in r_i.fk_values[fk]], dtype=np.int64)
        return cls(r_h.schema.attr_names, r_i.schema.attr_names, r_h.data, r_i.data, owner,
                   group_sizes(r_h.keys, r_i.fk_values[fk]))

    @classmethod
    def from_fr(cls, fr: FlattenedRelation) -> "QueryContext":
        live = np.arange(fr.N)[None, :] < fr.sizes[:, None]
        owner = np.nonzero(live)[0]
        return cls(fr.household_names, fr.individual_names, fr.household, fr.slots[live], owner, fr.sizes.copy())

    @property
    def n_households(self) -> int:
        return len(self.sizes)


def answer_query(ctx: QueryContext, q: GroupQuery, distinct: bool = True) -> int:
    h_ok = _holds(ctx.h_data, ctx.h_names, q.p_h)
    members = [_holds(ctx.i_data, ctx.i_names, p) for p in q.p_i]
    return _count(h_ok, ctx.sizes, members, ctx.owner, q, distinct)


def rel_error(real: float, syn: float, n_households: int) -> float:
    return abs(real - syn) / max(real, 0.01 * n_households)


# ------------------------------------------------------------------ Pearson

def _values(rel: Relation, attr: str) -> np.ndarray:
    spec = rel.schema.attr(attr)
    codes = rel.column(attr)
    if spec.bin_representatives is None:
        return codes.astype(np.float64)
    return np.asarray(spec.bin_representatives, dtype=np.float64)[codes]


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateVariance("constant column: Pearson coefficient undefined")
    return float(np.corrcoef(x, y)[0, 1])


def inter_pairs(db: Database, individual: str, household: str, fk: str, h_attr: str, i_attr: str):
    r_i, r_h = db[individual], db[household]
    index = {k: j for j, k in enumerate(r_h.keys)}
    owner = np.array([index[v] for v in r_i.fk_values[fk]], dtype=np.int64)
    return _values(r_h, h_attr)[owner], _values(r_i, i_attr)


def intra_pairs(db: Database, individual: str, fk: str, a: str, b: str):
    """Self-join on the shared FK: all ordered pairs of distinct co-members."""
    r_i = db[individual]
    xa, xb = _values(r_i, a), _values(r_i, b)
    groups: dict[str, list[int]] = {}
    for j, v in enumerate(r_i.fk_values[fk]):
        groups.setdefault(v, []).append(j)
    left, right = [], []
    for members in groups.values():
        if len(members) < 2:
            continue
        m = np.asarray(members)
        p, q = np.meshgrid(m, m, indexing="ij")
        off = p != q
        left.append(p[off])
        right.append(q[off])
    if not left:
        return np.zeros(0), np.zeros(0)
    li, ri = np.concatenate(left), np.concatenate(right)
    return xa[li], xb[ri]


def pearson_report(db: Database, pairs: Sequence[tuple[str, str]], mode: str, individual: str, fk: str,
                   household: str | None = None) -> dict[tuple[str, str], float | None]:
    """Pearson r per attribute pair; ``None`` where a column is constant."""
    out = {}
    for a, b in pairs:
        if mode == "inter":
            x, y = inter_pairs(db, individual, household, fk, a, b)
        elif mode == "intra":
            x, y = intra_pairs(db, individual, fk, a, b)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        try:
            out[(a, b)] = pearson(x, y)
        except DegenerateVariance:
            out[(a, b)] = None
    return out


# ----------------------------------------------------------- random linking

def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    w = np.clip(np.asarray(weights, dtype=np.float64), 0, None)
    if w.sum() <= 0:
        w = np.ones_like(w)
    quota = w / w.sum() * total
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        base[np.argsort(-(quota - base), kind="stable")[:short]] += 1
    return base


def random_link_baseline(r_i: Relation, r_h: Relation, fk: str, size_hist: np.ndarray,
                         rng: np.random.Generator) -> Relation:
    """Attach individuals to households uniformly at random, following a size histogram.

    ``size_hist[s]`` is the (noisy) number of households with s members.  The
    histogram is scaled to |R_H| households; if the implied member count
    differs from |R_I|, sizes are rescaled proportionally (InfeasibleHistogram
    warning) and the remainder is fixed one member at a time.
    """
    hist = np.asarray(size_hist, dtype=np.float64)
    N = len(hist) - 1
    counts = _largest_remainder(hist, len(r_h))
    sizes = np.repeat(np.arange(N + 1), counts)
    m = len(r_i)
    if sizes.sum() != m:
        msg = f"histogram implies {int(sizes.sum())} members but there are {m}; rescaling"
        log.info(msg)
        warnings.warn(msg, InfeasibleHistogram, stacklevel=2)
        if sizes.sum() > 0:
            sizes = np.minimum(np.floor(sizes * (m / sizes.sum())).astype(np.int64), max(N, 1))
        cap = max(N, 1)
        while sizes.sum() < m:
            open_ = np.flatnonzero(sizes < cap)
            if not len(open_):
                cap += 1
                continue
            sizes[rng.choice(open_)] += 1
        while sizes.sum() > m:
            sizes[rng.choice(np.flatnonzero(sizes > 0))] -= 1
    sizes = rng.permutation(sizes)
    owner = np.repeat(np.arange(len(sizes)), sizes)
    perm = rng.permutation(m)
    fk_vals = [""] * m
    for j, h in zip(perm, owner):
        fk_vals[j] = r_h.keys[h]
    fkv = {k: list(v) for k, v in r_i.fk_values.items()}
    fkv[fk] = fk_vals
    return Relation(r_i.schema, list(r_i.keys), fkv, r_i.data.copy())


# -------------------------------------------------------- planted generator

@dataclass
class PlantedSpec:
    """Latent factor z per household: member attribute I0 = a·z + noise and
    household attribute H0 = b·z + noise, so corr(I0, I0') = a² and
    corr(H0, I0) = a·b before binning.  The loadings are inflated so that
    the correlations measured on bin midpoints hit ``intra`` and ``inter``."""

    intra: float = 0.6
    inter: float = 0.5
    size_probs: tuple[float, ...] = (0.3, 0.3, 0.2, 0.2)   # sizes 1..len
    n_bins: int = 8
    n_household_attrs: int = 2
    n_individual_attrs: int = 4
    within: float = 0.5        # correlation of I1 with I0 inside a person

    @property
    def loadings(self) -> tuple[float, float]:
        k = binning_attenuation(self.n_bins) ** 2
        a = math.sqrt(min(self.intra / k, 1.0))
        b = self.inter / k / a if a > 0 else 0.0
        if abs(b) > 1:
            raise ValueError("inter-relational strength too large for the intra-group strength")
        return a, b


BIN_EDGE = 2.5


def binning_attenuation(n_bins: int) -> float:
    """corr(X, midpoint(bin(X))) for standard normal X (numerical quadrature)."""
    x = np.linspace(-9, 9, 200_001)
    w = np.exp(-x * x / 2)
    w /= w.sum()
    codes, mids = _bin(x, n_bins)
    y = np.asarray(mids)[codes]
    my = (w * y).sum()
    return float((w * x * (y - my)).sum() / math.sqrt((w * (y - my) ** 2).sum()))


def _bin(x: np.ndarray, n_bins: int) -> tuple[np.ndarray, list[float]]:
    edges = np.linspace(-BIN_EDGE, BIN_EDGE, n_bins + 1)
    codes = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    mids = [float(v) for v in (edges[:-1] + edges[1:]) / 2]
    return codes.astype(np.int64), mids


def gen_planted_db(n_households: int, spec: PlantedSpec, rng: np.random.Generator) -> Database:
    a, b = spec.loadings
    N = len(spec.size_probs)
    z = rng.standard_normal(n_households)
    sizes = rng.choice(np.arange(1, N + 1), n_households, p=np.asarray(spec.size_probs) / sum(spec.size_probs))
    h_cols = []
    for j in range(spec.n_household_attrs):
        e = rng.standard_normal(n_households)
        h_cols.append(b * z + math.sqrt(1 - b * b) * e if j == 0 else e)
    owner = np.repeat(np.arange(n_households), sizes)
    m = len(owner)
    i_cols = []
    for j in range(spec.n_individual_attrs):
        e = rng.standard_normal(m)
        if j == 0:
            i_cols.append(a * z[owner] + math.sqrt(1 - a * a) * e)
        elif j == 1:
            w = spec.within
            i_cols.append(w * i_cols[0] + math.sqrt(1 - w * w) * e)
        else:
            i_cols.append(e)
    h_data, h_specs = [], []
    for j, col in enumerate(h_cols):
        codes, mids = _bin(col, spec.n_bins)
        h_data.append(codes)
        h_specs.append(AttributeSpec(f"H{j}", spec.n_bins, mids))
    i_data, i_specs = [], []
    for j, col in enumerate(i_cols):
        codes, mids = _bin(col, spec.n_bins)
        i_data.append(codes)
        i_specs.append(AttributeSpec(f"I{j}", spec.n_bins, mids))
    hh = RelationSchema("household", "hid", h_specs, [], "primary")
    ind = RelationSchema("individual", "pid", i_specs, [ForeignKey("hid", "household", max_group_size=N, tau=1)],
                         "secondary")
    hkeys = [str(h + 1) for h in range(n_households)]
    r_h = Relation(hh, hkeys, {}, np.column_stack(h_data) if n_households else np.zeros((0, len(h_specs))))
    r_i = Relation(ind, [str(j + 1) for j in range(m)], {"hid": [hkeys[h] for h in owner]},
                   np.column_stack(i_data) if m else np.zeros((0, len(i_specs))))
    return Database([r_i, r_h])


# ------------------------------------------------------------------ report

@dataclass
class EvalReport:
    queries: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    pearson: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"queries": self.queries, "summary": self.summary, "pearson": self.pearson}


def default_link(db: Database) -> tuple[str, str, str]:
    """(individual, household, fk) of the first private foreign key."""
    for r in db.relations.values():
        if not r.schema.is_private:
            continue
        for fk in r.schema.foreign_keys:
            return r.name, fk.references, fk.column
    raise ValueError("database has no private foreign key to evaluate")


def query_errors(real: Database, syn: Database, queries: Sequence[GroupQuery], individual: str, household: str,
                 fk: str, distinct: bool = True) -> list[dict]:
    rc = QueryContext.from_db(real, individual, household, fk)
    sc = QueryContext.from_db(syn, individual, household, fk)
    rows = []
    for q in queries:
        r, s = answer_query(rc, q, distinct), answer_query(sc, q, distinct)
        rows.append({"query": q.to_json(), "real": r, "syn": s, "rel_error": rel_error(r, s, rc.n_households)})
    return rows


def evaluate(real: Database, syn: Database, n_queries: int = 1000, selectivity: float = 0.2, c: int = 1,
             seed: int = 0, link: tuple[str, str, str] | None = None, distinct: bool = True) -> EvalReport:
    individual, household, fk = link or default_link(real)
    cap = real[individual].schema.fk(fk).max_group_size
    if cap is None:
        cap = int(group_sizes(real[household].keys, real[individual].fk_values[fk]).max(initial=1))
    rng = np.random.default_rng(seed)
    qs = gen_queries(real[household].schema, real[individual].schema, n_queries, selectivity, c, rng, cap)
    rows = query_errors(real, syn, qs, individual, household, fk, distinct)
    errs = np.array([r["rel_error"] for r in rows]) if rows else np.zeros(0)
    summary = {"n_queries": len(rows), "selectivity": selectivity, "c": c}
    if len(errs):
        summary.update(mean=float(errs.mean()), median=float(np.median(errs)),
                       p90=float(np.percentile(errs, 90)), p99=float(np.percentile(errs, 99)))
    h_names = real[household].schema.attr_names
    i_names = real[individual].schema.attr_names
    report = EvalReport(rows, summary)
    for name, db in (("real", real), ("synthetic", syn)):
        inter = pearson_report(db, [(h, i) for h in h_names for i in i_names], "inter", individual, fk, household)
        intra = pearson_report(db, [(x, y) for x in i_names for y in i_names], "intra", individual, fk)
        report.pearson[name] = {"inter": {f"{h}|{i}": v for (h, i), v in inter.items()},
                                "intra": {f"{x}|{y}": v for (x, y), v in intra.items()}}
    return report


def random_link_synthesize(db: Database, params, seed: int = 0, link: tuple[str, str, str] | None = None,
                           lam: float = 6.0) -> Database:
    """The comparison baseline: each relation synthesized on its own, then linked at random.

    The budget is split by attribute count over the household relation, the
    individual relation and the group-size histogram (counted as one).
    """
    from .orchestrator import relation_tau
    from .privacy import Ledger, Streams, charge_and_noise
    from .single import synthesize_single, table_oracle

    individual, household, fk = link or default_link(db)
    r_i, r_h = db[individual], db[household]
    ledger, streams = Ledger(params.budget), Streams(seed)
    n_h, n_i = len(r_h.schema.attributes), len(r_i.schema.attributes)
    unit = params.budget / (n_h + n_i + 1)
    out = {}
    for rel, share in ((r_h, unit * n_h), (r_i, unit * n_i)):
        names, doms = rel.schema.attr_names, rel.schema.domain_sizes
        res = synthesize_single(names, doms, table_oracle(rel.data, names, doms), share,
                                relation_tau(db, rel.name), ledger, streams, f"baseline/{rel.name}", lam=lam)
        out[rel.name] = res.data
    cap = r_i.schema.fk(fk).max_group_size
    sizes = group_sizes(r_h.keys, r_i.fk_values[fk])
    cap = int(cap if cap is not None else sizes.max(initial=1))
    hist = np.bincount(sizes, minlength=cap + 1).astype(np.float64)
    noisy = charge_and_noise(ledger, streams, "baseline/sizes", 1.0, 1 / math.sqrt(unit), hist,
                             key=("baseline", "sizes"))
    h_keys = [str(j + 1) for j in range(len(out[household]))]
    syn_h = Relation(r_h.schema, h_keys, {k.column: [""] * len(h_keys) for k in r_h.schema.foreign_keys},
                     out[household])
    m = len(out[individual])
    syn_i = Relation(r_i.schema, [str(j + 1) for j in range(m)],
                     {k.column: [""] * m for k in r_i.schema.foreign_keys}, out[individual])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InfeasibleHistogram)
        linked = random_link_baseline(syn_i, syn_h, fk, np.maximum(noisy, 0), streams.generator("baseline", "link"))
    rels = [linked if r.name == individual else syn_h if r.name == household else r for r in db.relations.values()]
    return Database(rels, validate=False)
