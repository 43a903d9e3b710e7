"""Whole-database synthesis: stage ordering, dispatch and foreign-key merging."""

from __future__ import annotations

import logging
import math
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np

from .errors import ConfigError
from .privacy import BudgetPlan, FKShape, Ledger, PrivacyParams, Streams, plan_budget
from .relational import (Database, Relation, RelationSchema, augment_size_attribute, decompose, flatten,
                         is_size_attr, size_attr_name, strip_size_attributes)
from .single import table_oracle, synthesize_single
from .synthesis import SynthesisConfig, TuplePool, synthesize_fk

log = logging.getLogger(__name__)


@dataclass
class SynthesisResult:
    database: Database
    plan: BudgetPlan
    ledger: Ledger
    order: list[str]
    timings: dict[str, float] = field(default_factory=dict)
    progress: dict[str, list] = field(default_factory=dict)
    stage_costs: dict[str, float] = field(default_factory=dict)


def synthesis_order(db: Database) -> list[str]:
    """Private relations with every referenced relation before its referencing ones."""
    g = db.fk_graph
    return list(reversed(list(nx.lexicographical_topological_sort(g))))


def relation_tau(db: Database, name: str, _memo: dict | None = None) -> int:
    """How many tuples of ``name`` can differ between neighbouring databases."""
    memo = {} if _memo is None else _memo
    if name in memo:
        return memo[name]
    schema = db[name].schema
    if schema.privacy == "primary":
        memo[name] = 1
        return 1
    total = 0
    for fk in schema.foreign_keys:
        ref = db[fk.references].schema
        if not ref.is_private:
            continue
        if fk.max_group_size is None:
            raise ConfigError(f"tau for foreign keys above {name}.{fk.column} cannot be derived: "
                              f"declare max_group_size for {name}.{fk.column} or give tau explicitly")
        total += fk.max_group_size * relation_tau(db, fk.references, memo)
    memo[name] = total
    return total


def fk_tau(db: Database, rel: str, column: str, overrides: dict[str, int] | None = None) -> int:
    key = f"{rel}.{column}"
    if overrides and key in overrides:
        return int(overrides[key])
    fk = db[rel].schema.fk(column)
    if fk.tau is not None:
        return int(fk.tau)
    try:
        if db[fk.references].schema.is_private:
            return relation_tau(db, fk.references)
        return relation_tau(db, rel)
    except ConfigError as exc:
        raise ConfigError(f"no tau for private foreign key {key}: {exc}") from None


def augment_database(db: Database) -> dict[str, Relation]:
    """Every relation referenced by a private one gets one size attribute per such FK."""
    aug = dict(db.relations)
    for r in db.relations.values():
        if not r.schema.is_private:
            continue
        for fk in r.schema.foreign_keys:
            aug[fk.references] = augment_size_attribute(aug[fk.references], r, fk.column)
    return aug


def _fk_cap(aug: dict[str, Relation], rel: str, column: str) -> int:
    ref = aug[rel].schema.fk(column).references
    return aug[ref].schema.attr(size_attr_name(rel, column)).domain_size - 1


def plan_database(db: Database, params: PrivacyParams, config: SynthesisConfig,
                  weights: dict[str, float] | None = None, taus: dict[str, int] | None = None
                  ) -> tuple[BudgetPlan, dict[str, Relation], list[str]]:
    aug = augment_database(db)
    order = synthesis_order(db)
    singles, shapes = {}, []
    for name in order:
        schema = aug[name].schema
        if not schema.foreign_keys:
            singles[name] = (relation_tau(db, name), len(schema.attributes))
            continue
        for fk in schema.foreign_keys:
            ref = aug[fk.references].schema
            shapes.append(FKShape(name, fk.column, fk.references, fk_tau(db, name, fk.column, taus),
                                  n_h=len(ref.attributes) - 1, n_i=len(schema.attributes),
                                  N=_fk_cap(aug, name, fk.column), referenced_private=ref.is_private))
    plan = plan_budget(params, singles, shapes, weights, o=config.o, k=config.k, t2=config.t2,
                       init_mode=config.init_mode)
    return plan, aug, order


def merge_foreign_keys(variants: Sequence[tuple[str, Relation]], ref_keys: dict[str, list[str]],
                       rng: np.random.Generator) -> Relation:
    """Combine per-FK synthetic versions of one relation into one.

    The first variant's rows are kept.  Every later variant consists of
    tuples drawn from the first one's pool; its FK values are attached to
    matching rows by tuple value.  Rows left unmatched take the variant's
    surplus FK values, then uniformly random referenced keys.
    """
    col0, base = variants[0]
    n = len(base)
    fk_values = {k: list(v) for k, v in base.fk_values.items()}
    rows = [tuple(r) for r in base.data.tolist()]
    buckets: dict[tuple, list[int]] = defaultdict(list)
    for idx, t in enumerate(rows):
        buckets[t].append(idx)
    for col, other in variants[1:]:
        avail = {t: deque(ix) for t, ix in buckets.items()}
        assigned: list[str | None] = [None] * n
        surplus = []
        for t, v in zip((tuple(r) for r in other.data.tolist()), other.fk_values[col]):
            q = avail.get(t)
            if q:
                assigned[q.popleft()] = v
            else:
                surplus.append(v)
        surplus_q = deque(surplus)
        keys = ref_keys[col]
        for r in range(n):
            if assigned[r] is None:
                if surplus_q:
                    assigned[r] = surplus_q.popleft()
                else:
                    assigned[r] = keys[int(rng.integers(len(keys)))]
        fk_values[col] = assigned
    return Relation(base.schema, list(base.keys), fk_values, base.data.copy())


def synthesize_database(db: Database, params: PrivacyParams, config: SynthesisConfig,
                        weights: dict[str, float] | None = None, taus: dict[str, int] | None = None
                        ) -> SynthesisResult:
    plan, aug, order = plan_database(db, params, config, weights, taus)
    ledger = Ledger(params.budget)
    streams = Streams(config.seed)
    result = SynthesisResult(None, plan, ledger, order)
    syn: dict[str, Relation] = {}
    marginals: dict[str, list] = {}
    for r in db.relations.values():
        if not r.schema.is_private:
            syn[r.name] = r
    for name in order:
        t0 = time.perf_counter()
        schema = aug[name].schema
        before = ledger.total
        if not schema.foreign_keys:
            sp = plan.singles[name]
            rel = aug[name]
            names = schema.attr_names
            doms = schema.domain_sizes
            res = synthesize_single(names, doms, table_oracle(rel.data, names, doms), sp.cost, sp.tau, ledger,
                                    streams, name, required=[a for a in names if is_size_attr(a)], lam=config.lam,
                                    k=config.k, max_attrs=config.single_max_attrs, cell_cap=config.cell_cap,
                                    ipf_tol=config.ipf_tol, ipf_max_iters=config.ipf_max_iters)
            n = len(res.data)
            syn[name] = Relation(schema, [str(i + 1) for i in range(n)], {}, res.data)
            marginals[name] = res.marginals
        else:
            variants = []
            pool = None
            for idx, fk in enumerate(schema.foreign_keys):
                stage = f"{name}.{fk.column}"
                fkp = plan.fks[stage]
                ref = aug[fk.references]
                fr = flatten(aug[name], ref, fk.column, fkp.N)
                public = not ref.schema.is_private
                if public:
                    base = db[fk.references]
                    house = np.column_stack([base.data, np.zeros(len(base), dtype=np.int64)]) \
                        if len(base) else np.zeros((0, len(fr.household_attrs)), dtype=np.int64)
                    keys = list(base.keys)
                    pub = (base.data, base.schema.attr_names, base.schema.domain_sizes)
                else:
                    house = syn[fk.references].data
                    keys = list(syn[fk.references].keys)
                    pub = None
                syn_fr, state = synthesize_fk(
                    fr, house, fkp, config, ledger, streams, stage,
                    household_marginals=marginals.get(fk.references) if config.init_mode == "decompose" else None,
                    public_household=pub, pool=pool, assign_sizes=public, min_size=fk.min_group_size)
                r_i, _ = decompose(syn_fr, schema, ref.schema, fk.column, household_keys=keys)
                variants.append((fk.column, r_i))
                result.progress[stage] = state.progress
                if idx == 0 and len(schema.foreign_keys) > 1:
                    pool = TuplePool(r_i.data, schema.attr_names, schema.domain_sizes) if len(r_i) else None
            if len(variants) == 1:
                syn[name] = variants[0][1]
            else:
                ref_keys = {fk.column: list(syn[fk.references].keys) for fk in schema.foreign_keys}
                syn[name] = merge_foreign_keys(variants, ref_keys, streams.generator(name, "merge"))
        result.stage_costs[name] = ledger.total - before
        result.timings[name] = time.perf_counter() - t0
        log.info("stage %s done in %.1fs (ledger %.6g / %.6g)", name, result.timings[name], ledger.total,
                 ledger.budget)
    out = []
    for r in db.relations.values():
        if r.schema.is_private:
            rel = strip_size_attributes(syn[r.name])
            out.append(Relation(r.schema, rel.keys, rel.fk_values, rel.data))
        else:
            out.append(r)
    result.database = Database(out, validate=True)
    return result
