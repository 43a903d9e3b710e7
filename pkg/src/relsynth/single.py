"""Marginal-based synthesizer for one relation.

A compact member of the select-measure-estimate family: noisy pairwise
R-scores guide which low-dimensional marginals to measure, noisy h-scores pick
among the best-ranked candidates, an MRF is fitted to all noisy marginals and
rows are drawn from it.  Two adaptations matter to the relational pipeline:

* ``required`` forces every measured marginal to contain one of the given
  attributes (the group-size attribute), so each marginal can be sliced into
  per-size NPMs afterwards;
* the data are only seen through a ``marginal oracle``, so the same code runs
  on a base table or on the slot-1 projection of a permutation relation.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, WidthExceeded
from .mrf import MRF, build_junction_tree, estimate
from .privacy import Ledger, Streams, charge_and_noise

log = logging.getLogger(__name__)

Oracle = Callable[[tuple], np.ndarray]

# budget fractions: row count, R-scores, h-scores, marginals
FRACTIONS = {"count": 0.05, "r": 0.15, "h": 0.10, "m": 0.70}
MAD = math.sqrt(2 / math.pi)


@dataclass
class Marginal:
    attrs: tuple[str, ...]
    counts: np.ndarray
    variance: float


@dataclass
class SingleResult:
    n_tilde: float
    marginals: list[Marginal]
    model: MRF | None
    data: np.ndarray | None = None
    r_scores: dict[tuple[str, str], float] = field(default_factory=dict)


def table_oracle(data: np.ndarray, names: Sequence[str], domains: Sequence[int],
                 weights: np.ndarray | None = None) -> Oracle:
    """Exact marginals of an integer table, memoized."""
    data = np.asarray(data, dtype=np.int64)
    col = {n: j for j, n in enumerate(names)}
    dom = dict(zip(names, domains))
    cache: dict[tuple, np.ndarray] = {}

    def oracle(attrs: tuple) -> np.ndarray:
        attrs = tuple(attrs)
        if attrs not in cache:
            dims = [dom[a] for a in attrs]
            if not attrs:
                cache[attrs] = np.array(float(len(data) if weights is None else weights.sum()))
            else:
                idx = np.zeros(len(data), dtype=np.int64)
                for a, d in zip(attrs, dims):
                    idx = idx * d + data[:, col[a]]
                ncell = int(np.prod(dims))
                cache[attrs] = np.bincount(idx, weights=weights, minlength=ncell).astype(np.float64).reshape(dims)
        return cache[attrs]

    return oracle


def cfs(target, subset: Sequence, score: Callable) -> float:
    """Correlation-based feature-selection merit of ``subset`` (which contains ``target``)."""
    rest = [a for a in subset if a != target]
    num = sum(max(score(target, a), 0.0) for a in rest)
    red = sum(max(score(a, b), 0.0) for a in rest for b in rest if a != b)
    return num / math.sqrt(len(subset) + red)


def lambda_useful(n_tilde: float, cells: float, sigma: float, lam: float) -> bool:
    """Mean count per cell at least λ times the mean absolute noise."""
    if cells <= 0:
        return False
    return n_tilde / cells >= lam * MAD * sigma


def _r_table(joint: np.ndarray, n: float) -> float:
    if n <= 0:
        return 0.0
    a, b = joint.sum(axis=1), joint.sum(axis=0)
    return 0.5 * float(np.abs(joint - np.outer(a, b) / n).sum())


def synthesize_single(names: Sequence[str], domains: Sequence[int], oracle: Oracle, cost: float, tau: float,
                      ledger: Ledger, streams: Streams, label: str, required: Sequence[str] = (),
                      n_tilde: float | None = None, sample: bool = True, exact: bool = False,
                      lam: float = 6.0, k: int = 4, max_attrs: int = 3, cell_cap: float = 1e7,
                      ipf_tol: float = 1e-3, ipf_max_iters: int = 2000) -> SingleResult:
    """Measure noisy marginals of one relation, fit an MRF, optionally sample.

    Spends exactly ``cost`` (γ² units) unless ``exact`` is set, in which case
    the data are treated as public: every query has sensitivity 0.
    """
    names = list(names)
    dom = dict(zip(names, (int(d) for d in domains)))
    required = [r for r in names if r in set(required)]
    if not exact and cost <= 0:
        raise ConfigError(f"{label}: single-relation synthesis needs a positive budget")
    sens = 0.0 if exact else float(tau)
    d = len(names)
    parts = {"count": FRACTIONS["count"] if n_tilde is None else 0.0,
             "r": FRACTIONS["r"] if d >= 2 else 0.0,
             "rounds": FRACTIONS["h"] + FRACTIONS["m"] if d >= 1 else 0.0}
    z = sum(parts.values())
    if z == 0:
        return SingleResult(float(n_tilde or 0.0), [], None, np.zeros((int(n_tilde or 0), 0), dtype=np.int64))
    budget = {p: (cost * v / z if not exact else 1.0) for p, v in parts.items()}

    # -- row count
    if n_tilde is None:
        sigma = sens / math.sqrt(budget["count"]) if not exact else 1.0
        n_noisy = charge_and_noise(ledger, streams, f"{label}/count", sens, sigma,
                                   np.array([float(oracle(()))]), key=(label, "count"))[0]
        n_tilde = max(float(np.floor(n_noisy + 0.5)), 0.0)
    n_tilde = float(n_tilde)
    if d == 0:
        return SingleResult(n_tilde, [], None, np.zeros((int(n_tilde), 0), dtype=np.int64) if sample else None)

    # -- noisy pairwise R-scores
    pairs = list(itertools.combinations(names, 2))
    r_noisy: dict[tuple[str, str], float] = {}
    if pairs:
        sigma_r = 2 * sens * math.sqrt(len(pairs) / budget["r"]) if not exact else 1.0
        for a, b in pairs:
            val = np.array([_r_table(oracle((a, b)), float(oracle(())))])
            r_noisy[(a, b)] = float(charge_and_noise(ledger, streams, f"{label}/r/{a}|{b}", 2 * sens, sigma_r, val,
                                                     key=(label, "r", a, b))[0])

    def score(a, b):
        return r_noisy.get((a, b), r_noisy.get((b, a), 0.0))

    # -- attribute order: required first, then greedily most correlated with what is placed
    order = list(required)
    rest = [a for a in names if a not in order]
    while rest:
        if order:
            nxt = max(rest, key=lambda a: (sum(score(a, b) for b in order), -names.index(a)))
        else:
            nxt = rest[0]
        order.append(nxt)
        rest.remove(nxt)

    marginals: list[Marginal] = []
    model = MRF(names, dom, [], cell_cap=cell_cap, tag=label)
    b_round = budget["rounds"] / max(d, 1)
    for r, target in enumerate(order):
        placed = order[:r]
        sigma_m_nominal = sens / math.sqrt(b_round * FRACTIONS["m"] / (FRACTIONS["m"] + FRACTIONS["h"])) \
            if not exact else 0.0
        cands = []
        for size in range(0, min(max_attrs - 1, len(placed)) + 1):
            for others in itertools.combinations(placed, size):
                S = tuple(sorted((target,) + others, key=names.index))
                if required and target not in required and not set(S) & set(required):
                    continue
                cands.append(S)
        structure = [m.attrs for m in marginals]
        feasible = []
        for S in cands:
            try:
                build_junction_tree(names, dom, structure + [S], cell_cap)
            except WidthExceeded:
                continue
            feasible.append(S)
        if not feasible:
            feasible = [(target,)]
        useful = [S for S in feasible
                  if lambda_useful(n_tilde, float(np.prod([dom[a] for a in S])), sigma_m_nominal, lam)]
        if not useful:
            useful = [min(feasible, key=lambda S: (np.prod([dom[a] for a in S]), len(S)))]
        ranked = sorted(useful, key=lambda S: (-cfs(target, S, score), len(S), S))[:k]

        if len(ranked) == 1:
            chosen = ranked[0]
            b_m = b_round
        else:
            b_h = b_round * FRACTIONS["h"] / (FRACTIONS["m"] + FRACTIONS["h"])
            b_m = b_round - b_h
            sigma_h = sens * math.sqrt(len(ranked) / b_h) if not exact else 1.0
            best, best_val = None, -math.inf
            for j, S in enumerate(ranked):
                p = model.marginal_of(S) * n_tilde
                h = np.array([float(np.abs(oracle(S) - p).sum())])
                noisy = charge_and_noise(ledger, streams, f"{label}/h/{r}/{'|'.join(S)}", sens, sigma_h, h,
                                         key=(label, "h", r, j))[0]
                if noisy > best_val:
                    best, best_val = S, noisy
            chosen = best
        sigma_m = sens / math.sqrt(b_m) if not exact else 1.0
        counts = charge_and_noise(ledger, streams, f"{label}/m/{'|'.join(chosen)}", sens, sigma_m, oracle(chosen),
                                  key=(label, "m", r))
        marginals.append(Marginal(chosen, counts, 0.0 if exact else sigma_m ** 2))
        model = estimate(names, dom, {m.attrs: m.counts for m in marginals}, n_tilde, tol=ipf_tol,
                         max_iters=ipf_max_iters, init=model, cell_cap=cell_cap, tag=label)
        log.debug("%s round %d: target %s, chose %s", label, r, target, chosen)

    data = None
    if sample:
        data = model.sample(int(n_tilde), streams.generator(label, "sample"))
    return SingleResult(n_tilde, marginals, model, data, r_noisy)
