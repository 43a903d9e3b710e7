"""The per-foreign-key pipeline.

Given a referencing relation flattened into its referenced relation, and a
synthetic version of the referenced relation, sample every member attribute
slot by slot.  Each target attribute gets one MRF per group size, built from
noisy NPMs (normalized permutation marginals) held in an :class:`NPMStore`.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, EmptyCandidates, MissingNPM, WidthExceeded
from .marginals import (HOUSEHOLD, NPM, Attr, NPMStore, RScores, basic_pairs, canonicalize, count_npm,
                        r_score, slots_of)
from .mrf import MRF, build_junction_tree, estimate
from .privacy import FKPlan, Ledger, Streams, charge_and_noise
from .relational import UNSAMPLED, FlattenedRelation
from .single import Marginal, cfs, lambda_useful, synthesize_single, table_oracle

log = logging.getLogger(__name__)


@dataclass
class SynthesisConfig:
    o: int = 3
    n_mrf: int = 8
    t1: int = 10
    t2: int = 1
    k: int = 4
    lam: float = 6.0
    merge_from: int | None = None      # merging interval [merge_from, ∞); None = no merging
    seed: int = 0
    cell_cap: float = 1e7
    max_clique_attrs: int = 4
    init_mode: str = "full"            # "full" or "decompose"
    ipf_tol: float = 1e-3
    ipf_max_iters: int = 2000
    single_max_attrs: int = 3
    threads: int = 1

    def __post_init__(self):
        if self.init_mode not in ("full", "decompose"):
            raise ValueError(f"init_mode must be 'full' or 'decompose', got {self.init_mode!r}")
        if self.o < 1 or self.k < 1 or self.t2 < 0 or self.t1 < 0:
            raise ValueError("o, k must be >= 1 and T1, T2 >= 0")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class FKState:
    """Everything one foreign-key run carries between steps."""

    fr: FlattenedRelation
    size_name: str
    tau: float
    config: SynthesisConfig
    ledger: Ledger
    streams: Streams
    label: str
    store: NPMStore = None
    scores: RScores = field(default_factory=RScores)
    n_tilde: np.ndarray | None = None
    syn_house: np.ndarray | None = None
    syn_slots: np.ndarray | None = None
    synthesized: list[Attr] = field(default_factory=list)
    queries: int = 0
    progress: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.store is None:
            self.store = NPMStore(self.config.o)
        self._hdom = {a.name: a.domain_size for a in self.fr.household_attrs}
        self._idom = {a.name: a.domain_size for a in self.fr.individual_attrs}
        self._hidx = {n: j for j, n in enumerate(self.fr.household_names)}
        self._iidx = {n: j for j, n in enumerate(self.fr.individual_names)}

    @property
    def N(self) -> int:
        return self.fr.N

    @property
    def o(self) -> int:
        return self.config.o

    @property
    def household_names(self) -> list[str]:
        """Household attributes taking part in scores and NPMs (this FK's size attribute excluded)."""
        return [n for n in self.fr.household_names if n != self.size_name]

    @property
    def individual_names(self) -> list[str]:
        return self.fr.individual_names

    def dom(self, a: Attr) -> int:
        return self._hdom[a.name] if a.slot == HOUSEHOLD else self._idom[a.name]

    def cells(self, attrs: Sequence[Attr]) -> int:
        return int(np.prod([self.dom(a) for a in attrs], dtype=np.int64)) if attrs else 1

    def syn_values(self, a: Attr, rows: np.ndarray) -> np.ndarray:
        if a.slot == HOUSEHOLD:
            return self.syn_house[rows, self._hidx[a.name]]
        return self.syn_slots[rows, a.slot - 1, self._iidx[a.name]]

    def next_key(self, kind: str) -> tuple:
        self.queries += 1
        return (self.label, kind, self.queries)


# ------------------------------------------------------------ basic queries

def noisy_group_counts(state: FKState, sigma_n: float) -> np.ndarray:
    """ñ_s for s = 0..N: one vector query, rounded half-up and clipped at 0."""
    exact = state.fr.group_counts.astype(np.float64)
    noisy = charge_and_noise(state.ledger, state.streams, f"{state.label}/n_s", state.tau, sigma_n, exact,
                             key=(state.label, "n_s"))
    state.n_tilde = np.maximum(np.floor(noisy + 0.5), 0.0)
    return state.n_tilde


def compute_noisy_r_scores(state: FKState, sigma_r: float) -> RScores:
    """Noisy R-scores of every basic pair; all other pairs follow by letter renaming."""
    pairs = basic_pairs(state.household_names, state.individual_names)
    for a1, a2 in pairs:
        exact = r_score(a1, a2, state.fr, state.o)
        v = charge_and_noise(state.ledger, state.streams, f"{state.label}/r/{a1}|{a2}", 2 * state.tau, sigma_r,
                             np.array([exact]), key=(state.label, "r", a1, a2))[0]
        state.scores[(a1, a2)] = float(v)
    return state.scores


def canonical_rank(state: FKState, a: Attr) -> tuple:
    """Household attributes first, then slot-major, then schema order."""
    if a.slot == HOUSEHOLD:
        return (0, 0, state.fr.household_names.index(a.name))
    return (1, a.slot, state.individual_names.index(a.name))


def select_correlated(state: FKState, target: Attr, synthesized: Sequence[Attr], n_mrf: int) -> list[Attr]:
    """Top ``n_mrf`` synthesized attributes (size attribute excluded) by noisy R-score with ``target``."""
    pool = [a for a in synthesized if not (a.slot == HOUSEHOLD and a.name == state.size_name) and a != target]
    pool.sort(key=lambda a: (-state.scores.get(target, a), canonical_rank(state, a)))
    return pool[:n_mrf]


def query_npms(state: FKState, attrs: Sequence[Attr], sigma: float, label: str) -> tuple[Attr, ...]:
    """Noisy NPMs of ``attrs`` for every group size D..N, stored with all roll-ups.

    Sizes in the merging interval share one merged noisy table, rescaled to
    each size's noisy total.  The whole query is one Gaussian charge.
    """
    D = len(slots_of(attrs))
    if D > state.o:
        raise DomainError(f"{[str(a) for a in attrs]} uses {D} slots > o={state.o}")
    canon, _ = canonicalize(attrs)
    sizes = list(range(max(D, 1), state.N + 1))
    lo = state.config.merge_from
    merged = [s for s in sizes if lo is not None and s >= lo]
    plain = [s for s in sizes if s not in merged]
    exact = {s: count_npm(state.fr, canon, s, state.o).counts for s in sizes}
    shape = exact[sizes[0]].shape if sizes else ()
    parts = [exact[s].ravel() for s in plain]
    if merged:
        parts.append(sum(exact[s] for s in merged).ravel())
    if not parts:
        return canon
    vec = np.concatenate(parts)
    noisy = charge_and_noise(state.ledger, state.streams, label, state.tau, sigma, vec, key=state.next_key("npm"))
    var = 0.0 if state.tau == 0 else sigma ** 2
    off = 0
    size = int(np.prod(shape, dtype=np.int64)) if shape else 1
    for s in plain:
        state.store.add_with_rollups(NPM(canon, s, noisy[off:off + size].reshape(shape), var))
        off += size
    if merged:
        table = noisy[off:off + size].reshape(shape)
        tot = float(sum(state.n_tilde[s] for s in merged))
        for s in merged:
            w = state.n_tilde[s] / tot if tot > 0 else 1.0 / len(merged)
            state.store.add_with_rollups(NPM(canon, s, w * table, var * w * w))
    return canon


def exact_h_score(state: FKState, attrs: Sequence[Attr], models: dict[int, MRF]) -> float:
    h = 0.0
    for s, m in models.items():
        M = count_npm(state.fr, attrs, s, state.o).counts
        h += float(np.abs(M - state.n_tilde[s] * m.marginal_of(tuple(attrs))).sum())
    return h


def noisy_h_score(state: FKState, attrs: Sequence[Attr], models: dict[int, MRF]) -> float:
    """h-score against stored noisy NPMs, minus the L1 the noise alone contributes.

    Without the correction a perfectly modelled set still scores about
    cells·σ·sqrt(2/π), so wide sets win on noise rather than on missing
    correlation.
    """
    h = 0.0
    for s, m in models.items():
        npm = state.store.get(attrs, s)
        h += float(np.abs(npm.counts - state.n_tilde[s] * m.marginal_of(tuple(attrs))).sum())
        h -= npm.counts.size * math.sqrt(2 * npm.variance / math.pi)
    return h


# ---------------------------------------------------------- MRF construction

def _available(state: FKState, attrs: Sequence[Attr], sizes: Sequence[int]) -> bool:
    try:
        return all(state.store.has(attrs, s) for s in sizes)
    except DomainError:
        return False


def _subsets(pool: Sequence[Attr], max_size: int, must: Attr | None = None):
    for r in range(1, min(max_size, len(pool)) + 1):
        for combo in itertools.combinations(pool, r):
            if must is None or must in combo:
                yield combo


def _fit(state: FKState, variables: list[Attr], structure: list[tuple], sizes: Sequence[int],
         prev: dict[int, MRF] | None) -> dict[int, MRF]:
    domains = {v: state.dom(v) for v in variables}

    def one(s: int) -> MRF:
        if not structure:
            return MRF(variables, domains, [], cell_cap=state.config.cell_cap)
        targets = {c: state.store.instantiate(c, s) for c in structure}
        init = prev.get(s) if prev else None
        return estimate(variables, domains, targets, float(state.n_tilde[s]), tol=state.config.ipf_tol,
                        max_iters=state.config.ipf_max_iters, init=init, cell_cap=state.config.cell_cap,
                        tag=(state.label, s))

    if state.config.threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(state.config.threads) as ex:
            fitted = list(ex.map(one, sizes))
    else:
        fitted = [one(s) for s in sizes]
    return dict(zip(sizes, fitted))


def _feasible(variables, domains, structure, cand, cap) -> bool:
    try:
        build_junction_tree(variables, domains, list(structure) + [cand], cap)
        return True
    except WidthExceeded:
        return False


def construct_mrfs(state: FKState, target: Attr, sigma_m: float, sigma_h: float) -> tuple[dict[int, MRF], list[Attr], list[tuple]]:
    """Build one MRF per group size s >= target slot; returns (models, C, structure)."""
    cfg = state.config
    i = target.slot
    sizes = list(range(i, state.N + 1))
    C = select_correlated(state, target, state.synthesized, cfg.n_mrf)
    variables = list(C) + [target]
    domains = {v: state.dom(v) for v in variables}
    max_sz = cfg.max_clique_attrs

    # step 2: reuse stored NPMs (no privacy cost)
    c_all = [S for S in _subsets(variables, max_sz) if len(slots_of(S)) <= state.o and _available(state, S, sizes)]
    sets = [frozenset(S) for S in c_all]
    c_all = [S for S, fs in zip(c_all, sets) if not any(fs < other for other in sets)]
    structure: list[tuple] = []
    models = _fit(state, variables, structure, sizes, None)
    for _ in range(cfg.t1):
        c_all = [S for S in c_all if _feasible(variables, domains, structure, S, cfg.cell_cap)]
        if not c_all:
            break
        best = max(c_all, key=lambda S: (noisy_h_score(state, S, models), [-canonical_rank(state, a)[2] for a in S]))
        c_all.remove(best)
        structure.append(best)
        models = _fit(state, variables, structure, sizes, models)

    # step 3: query new NPMs (charged)
    if cfg.t2 > 0:
        n_sum = float(sum(state.n_tilde[s] for s in sizes))
        c_new = []
        for S in _subsets(variables, max_sz, must=target):
            if len(slots_of(S)) > state.o or S in structure:
                continue
            if not lambda_useful(n_sum, state.cells(S) * len(sizes), sigma_m, cfg.lam):
                continue
            if not _feasible(variables, domains, structure, S, cfg.cell_cap):
                continue
            c_new.append(S)
        if not c_new:
            log.info("%s: no useful candidates for %s; falling back to its unary NPM", state.label, target)
            c_new = [(target,)]
        rng = state.streams.generator(state.label, "candidates", target)
        for t in range(cfg.t2):
            picks = rng.choice(len(c_new), size=cfg.k, replace=len(c_new) < cfg.k)
            best, best_val = None, -math.inf
            for j, idx in enumerate(picks):
                S = c_new[int(idx)]
                h = np.array([exact_h_score(state, S, models)])
                v = charge_and_noise(state.ledger, state.streams, f"{state.label}/h/{target}/{t}", state.tau, sigma_h,
                                     h, key=state.next_key("h"))[0]
                if v > best_val:
                    best, best_val = S, v
            query_npms(state, best, sigma_m, f"{state.label}/npm/{target}/{t}")
            if len(c_new) > 1:
                c_new.remove(best)
            if best not in structure:
                structure.append(best)
            models = _fit(state, variables, structure, sizes, models)
    return models, C, structure


# --------------------------------------------------------- initialization

def decompose_marginals(state: FKState, marginals: Sequence[Marginal]) -> int:
    """Slice each marginal at every value of the size attribute into household NPMs."""
    added = 0
    for m in marginals:
        if state.size_name not in m.attrs or len(m.attrs) < 2:
            continue
        ax = m.attrs.index(state.size_name)
        rest = tuple(Attr(HOUSEHOLD, a) for a in m.attrs if a != state.size_name)
        for s in range(1, state.N + 1):
            table = np.take(m.counts, s, axis=ax)
            state.store.add_with_rollups(NPM(rest, s, np.array(table, dtype=np.float64), m.variance))
            added += 1
    return added


def public_household_npms(state: FKState, household_data: np.ndarray, names: Sequence[str],
                          domains: Sequence[int]) -> None:
    """Zero-cost household NPMs for a public referenced relation.

    Synthetic sizes are assigned independently of the public attributes, so
    the NPM for size s is the public marginal scaled to ñ_s.
    """
    oracle = table_oracle(household_data, names, domains)
    total = max(float(len(household_data)), 1.0)
    for r in range(1, min(state.config.max_clique_attrs, len(names)) + 1):
        for combo in itertools.combinations(names, r):
            table = oracle(combo)
            for s in range(1, state.N + 1):
                state.store.add(NPM(tuple(Attr(HOUSEHOLD, a) for a in combo), s,
                                    table * state.n_tilde[s] / total, 0.0))


def _cfs_pick(state: FKState, target: Attr, cands: list[tuple], n_sum: float, n_sizes: int,
              sigma: float) -> tuple | None:
    mine = [S for S in cands if target in S]
    if not mine:
        return None
    useful = [S for S in mine if lambda_useful(n_sum, state.cells(S) * n_sizes, sigma, state.config.lam)]
    pool = useful or mine
    score = state.scores.get
    return max(pool, key=lambda S: (cfs(target, S, score), -len(S), [-canonical_rank(state, a)[2] for a in S]))


def init_npm_store(state: FKState, plan: FKPlan, household_marginals: Sequence[Marginal] | None = None,
                   public_household: tuple | None = None) -> NPMStore:
    """Fill the store before any member attribute is sampled.

    ``full`` mode spends the planned initialization budget on four parts;
    ``decompose`` mode only slices the referenced relation's noisy marginals.
    ``public_household`` = (data, names, domains) adds zero-cost NPMs.
    """
    cfg = state.config
    if public_household is not None:
        public_household_npms(state, *public_household)
    if household_marginals:
        decompose_marginals(state, household_marginals)
    if cfg.init_mode != "full":
        return state.store
    parts = plan.init.parts
    fr = state.fr
    N, o = state.N, state.o
    if "household" in parts:
        hn = fr.household_names
        res = synthesize_single(hn, [a.domain_size for a in fr.household_attrs],
                                table_oracle(fr.household, hn, [a.domain_size for a in fr.household_attrs]),
                                parts["household"], state.tau, state.ledger, state.streams,
                                f"{state.label}/init/household", required=[state.size_name], sample=False,
                                lam=cfg.lam, k=cfg.k, max_attrs=cfg.single_max_attrs, cell_cap=cfg.cell_cap,
                                ipf_tol=cfg.ipf_tol, ipf_max_iters=cfg.ipf_max_iters)
        decompose_marginals(state, res.marginals)
    if "individual" in parts:
        names = state.individual_names
        doms = [a.domain_size for a in fr.individual_attrs]
        with state.ledger.parallel(f"{state.label}/init/individual") as g:
            for s in range(1, N + 1):
                def oracle(attrs, s=s):
                    if not attrs:
                        return np.array(float(fr.group_counts[s]))
                    return count_npm(fr, tuple(Attr(1, a) for a in attrs), s, o).counts
                with g.branch(s):
                    res = synthesize_single(names, doms, oracle, parts["individual"], state.tau, state.ledger,
                                            state.streams, f"{state.label}/init/individual/{s}",
                                            n_tilde=float(state.n_tilde[s]), sample=False, lam=cfg.lam, k=cfg.k,
                                            max_attrs=cfg.single_max_attrs, cell_cap=cfg.cell_cap,
                                            ipf_tol=cfg.ipf_tol, ipf_max_iters=cfg.ipf_max_iters)
                for m in res.marginals:
                    state.store.add_with_rollups(NPM(tuple(Attr(1, a) for a in m.attrs), s, m.counts, m.variance))
    H = [Attr(HOUSEHOLD, a) for a in state.household_names]
    I1 = [Attr(1, a) for a in state.individual_names]
    max_sz = cfg.max_clique_attrs
    if "inter" in parts:
        sigma = plan.init.sigma_inter
        cands = [S for S in _subsets(H + I1, max_sz) if any(a.slot == 0 for a in S) and any(a.slot for a in S)]
        n_sum = float(state.n_tilde[1:].sum())
        for A in H + I1:
            S = _cfs_pick(state, A, cands, n_sum, N, sigma)
            query_npms(state, S, sigma, f"{state.label}/init/inter/{A}")
    if "intra" in parts:
        sigma = plan.init.sigma_intra
        for i in range(2, min(o, N) + 1):
            pool = [Attr(j, a) for j in range(1, i + 1) for a in state.individual_names]
            cands = [S for S in _subsets(pool, max(max_sz, i)) if len(slots_of(S)) == i]
            n_sum = float(state.n_tilde[i:].sum())
            for name in state.individual_names:
                A = Attr(i, name)
                S = _cfs_pick(state, A, cands, n_sum, N - i + 1, sigma)
                query_npms(state, S, sigma, f"{state.label}/init/intra/{A}")
    return state.store


# ---------------------------------------------------------------- sampling

class TuplePool:
    """Restricts member tuples to those present in a reference relation."""

    def __init__(self, data: np.ndarray, names: Sequence[str], domains: Sequence[int]):
        self.names = list(names)
        self.domains = [int(d) for d in domains]
        self.tuples, self.freq = np.unique(np.asarray(data, dtype=np.int64), axis=0, return_counts=True)
        if len(self.tuples) == 0:
            raise ValueError("empty tuple pool")

    def prefix_codes(self, values: np.ndarray, cols: Sequence[int]) -> np.ndarray:
        code = np.zeros(values.shape[0], dtype=np.int64)
        for c in cols:
            code = code * (self.domains[c] + 1) + values[:, c]
        return code

    def allowed(self, order_cols: Sequence[int], col: int, member_prefix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(indicator, frequency) tables over ``col``'s values for each member prefix code."""
        pc = self.prefix_codes(self.tuples, order_cols)
        dom = self.domains[col]
        uniq, inv = np.unique(pc, return_inverse=True)
        freq = np.zeros((len(uniq), dom))
        np.add.at(freq, (inv, self.tuples[:, col]), self.freq)
        pos = np.searchsorted(uniq, member_prefix)
        pos = np.minimum(pos, len(uniq) - 1)
        hit = uniq[pos] == member_prefix
        f = np.where(hit[:, None], freq[pos], 0.0)
        return (f > 0).astype(np.float64), f


def _draw(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    c = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0]) * c[:, -1]
    return np.minimum((c < u[:, None]).sum(axis=1), p.shape[1] - 1)


def attribute_order(state: FKState) -> list[str]:
    """Within a slot: descending total noisy R-score against household attributes."""
    names = state.individual_names

    def key(a):
        tot = sum(state.scores.get(Attr(HOUSEHOLD, h), Attr(1, a)) for h in state.household_names)
        return (-tot, names.index(a))

    return sorted(names, key=key)


def synthesize_fk(fr: FlattenedRelation, syn_household: np.ndarray, plan: FKPlan, config: SynthesisConfig,
                  ledger: Ledger, streams: Streams, label: str, household_marginals=None,
                  public_household: tuple | None = None, pool: TuplePool | None = None,
                  assign_sizes: bool = False, min_size: int = 0) -> tuple[FlattenedRelation, FKState]:
    """Sample the member attributes of a synthetic flattened relation.

    ``syn_household`` holds synthetic referenced rows with columns in
    ``fr.household_names`` order; its size column fixes each row's group size
    unless ``assign_sizes`` is set, in which case sizes are drawn from the
    noisy group counts (for public referenced relations).  Sizes below the
    declared ``min_size`` are raised to it.
    """
    size_name = fr.household_names[fr.size_index]
    state = FKState(fr, size_name, plan.tau, config, ledger, streams, label)
    start = ledger.total
    t0 = time.perf_counter()
    noisy_group_counts(state, plan.sigma_n)
    if math.isfinite(plan.sigma_r):
        compute_noisy_r_scores(state, plan.sigma_r)
    init_npm_store(state, plan, household_marginals, public_household)

    house = np.array(syn_household, dtype=np.int64).reshape(-1, len(fr.household_attrs))
    if assign_sizes:
        w = state.n_tilde.copy()
        w[:min_size] = 0
        house[:, fr.size_index] = assign_group_sizes(w, len(house), streams.generator(label, "sizes"))
    sizes = np.clip(house[:, fr.size_index], min_size, fr.N)
    house[:, fr.size_index] = sizes
    n_rows = len(house)
    n_i = len(fr.individual_attrs)
    nulls = fr.null_codes
    slots = np.broadcast_to(nulls, (n_rows, fr.N, n_i)).copy()
    live = np.arange(fr.N)[None, :] < sizes[:, None]
    slots[live] = UNSAMPLED
    state.syn_house, state.syn_slots = house, slots
    state.synthesized = [Attr(HOUSEHOLD, a) for a in fr.household_names]

    order = attribute_order(state)
    pool_cols = None
    if pool is not None:
        pool_cols = [pool.names.index(a) for a in fr.individual_names]
    for i in range(1, fr.N + 1):
        for j, name in enumerate(order):
            target = Attr(i, name)
            models, C, structure = construct_mrfs(state, target, plan.sigma_m, plan.sigma_h)
            rng = streams.generator(label, "sample", str(target))
            col = state._iidx[name]
            for s in range(i, fr.N + 1):
                rows = np.flatnonzero(sizes == s)
                if not len(rows):
                    continue
                ev = np.column_stack([state.syn_values(a, rows) for a in C]) if C else np.zeros((len(rows), 0), int)
                p = models[s].conditional_complete(target, C, ev)
                if pool is not None:
                    prev_names = order[:j]
                    member = np.column_stack([slots[rows, i - 1, state._iidx[a]] for a in prev_names]) \
                        if prev_names else np.zeros((len(rows), 0), dtype=np.int64)
                    pcols = [pool_cols[state._iidx[a]] for a in prev_names]
                    mp = np.zeros(len(rows), dtype=np.int64)
                    for c, a in zip(pcols, prev_names):
                        mp = mp * (pool.domains[c] + 1) + member[:, prev_names.index(a)]
                    ind, freq = pool.allowed(pcols, pool_cols[col], mp)
                    q = p * ind
                    z = q.sum(axis=1, keepdims=True)
                    empty = z[:, 0] <= 0
                    if np.any(empty):
                        log.info("%s: %d rows fall back to pool frequencies for %s", label, int(empty.sum()), target)
                        q[empty] = freq[empty]
                        z = q.sum(axis=1, keepdims=True)
                    p = q / z
                slots[rows, i - 1, col] = _draw(p, rng)
            state.synthesized.append(target)
            state.progress.append({"target": str(target), "correlated": [str(a) for a in C],
                                   "structure": [[str(a) for a in S] for S in structure],
                                   "gaps": {int(s): (m.gap_history[-1] if m.gap_history else 0.0)
                                            for s, m in models.items()},
                                   "ledger": ledger.total})
            log.info("%s %s: C=%s, %d cliques, ledger %.6g", label, target, [str(a) for a in C],
                     len(structure), ledger.total)
    syn = FlattenedRelation(list(fr.household_attrs), list(fr.individual_attrs), fr.size_index, fr.N, house, slots)
    syn.check_padding()
    spent = ledger.total - start
    log.info("%s finished in %.1fs, spent %.6g of a %.6g share", label, time.perf_counter() - t0, spent, plan.share)
    return syn, state


def assign_group_sizes(n_tilde: np.ndarray, n_rows: int, rng: np.random.Generator) -> np.ndarray:
    """Group sizes for ``n_rows`` referenced rows, proportional to ñ_s (largest remainder), shuffled."""
    w = np.asarray(n_tilde, dtype=np.float64)
    if w.sum() <= 0:
        w = np.ones_like(w)
    quota = w / w.sum() * n_rows
    base = np.floor(quota).astype(np.int64)
    short = n_rows - int(base.sum())
    if short > 0:
        order = np.argsort(-(quota - base), kind="stable")
        base[order[:short]] += 1
    sizes = np.repeat(np.arange(len(w)), base)
    return rng.permutation(sizes)
