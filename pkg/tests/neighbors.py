"""Exhaustive neighbor enumeration on a tiny household database.

A household is (H0 value, tuple of member A0 values).  Neighbors of a
database at distance tau differ by removing and/or adding households, at
most tau changes in total.  For each neighbor we recompute the exact
statistics the synthesizer releases and record the largest change.
"""

import itertools

import numpy as np

from relsynth.marginals import Attr, count_npm, r_score
from relsynth.mrf import MRF
from relsynth.relational import AttributeSpec, FlattenedRelation

N, O = 3, 2
H_DOM, I_DOM = 2, 2
H0, A1, A2 = Attr(0, "H0"), Attr(1, "A0"), Attr(2, "A0")
NPM_SETS = [(A1,), (H0, A1), (A1, A2), (H0, A1, A2)]
R_PAIRS = [(H0, A1), (A1, A2)]
H_SETS = [(A1,), (H0, A1), (A1, A2)]

ALL_HOUSEHOLDS = [(h, members) for h in range(H_DOM) for s in range(1, N + 1)
                  for members in itertools.product(range(I_DOM), repeat=s)]


def build_fr(households) -> FlattenedRelation:
    n = len(households)
    house = np.array([[h, len(m)] for h, m in households], dtype=np.int64).reshape(n, 2)
    slots = np.full((n, N, 1), I_DOM, dtype=np.int64)
    for r, (_, m) in enumerate(households):
        slots[r, :len(m), 0] = m
    return FlattenedRelation([AttributeSpec("H0", H_DOM), AttributeSpec("#size", N + 1)],
                             [AttributeSpec("A0", I_DOM)], 1, N, house, slots)


def _sizes_for(attrs):
    d = len({a.slot for a in attrs if a.slot})
    return [s for s in range(1, N + 1) if d <= min(s, O)]


def joint_npm_vector(fr, attrs) -> np.ndarray:
    return np.concatenate([count_npm(fr, attrs, s, O).counts.ravel() for s in _sizes_for(attrs)])


def size_vector(fr) -> np.ndarray:
    return np.bincount(fr.sizes, minlength=N + 1)[1:].astype(float)


def fixed_models(seed=0) -> dict:
    """One arbitrary, data-independent model per group size (h-score is judged against a fixed model)."""
    rng = np.random.default_rng(seed)
    variables = [H0, A1, A2]
    doms = {H0: H_DOM, A1: I_DOM, A2: I_DOM}
    cliques = [(H0, A1), (A1, A2)]
    models = {}
    for s in range(1, N + 1):
        vs = [v for v in variables if v.slot <= min(s, O)]
        cl = [c for c in cliques if all(v in vs for v in c)]
        models[s] = MRF(vs, {v: doms[v] for v in vs}, cl,
                        {c: rng.normal(size=tuple(doms[v] for v in c)) for c in cl})
    return models


def h_scores(fr, models, totals) -> np.ndarray:
    out = []
    for attrs in H_SETS:
        h = 0.0
        for s in _sizes_for(attrs):
            p = models[s].marginal_of(attrs) * totals[s]
            h += float(np.abs(count_npm(fr, attrs, s, O).counts - p).sum())
        out.append(h)
    return np.array(out)


def statistics(households, models, totals) -> dict:
    fr = build_fr(households)
    return {
        "npm": [joint_npm_vector(fr, a) for a in NPM_SETS],
        "h": h_scores(fr, models, totals),
        "r": np.array([r_score(a, b, fr, O) for a, b in R_PAIRS]),
        "size": size_vector(fr),
    }


def neighbors(base, tau):
    """All databases reachable by removing r and adding tau - r households (order ignored)."""
    seen = set()
    for r in range(tau + 1):
        for drop in itertools.combinations(range(len(base)), r):
            kept = [h for i, h in enumerate(base) if i not in drop]
            for add in itertools.combinations_with_replacement(ALL_HOUSEHOLDS, tau - r):
                if r == 0 and not add:
                    continue
                key = (drop, add)
                if key in seen:
                    continue
                seen.add(key)
                yield kept + list(add)


def max_changes(base, tau, models, totals) -> dict:
    ref = statistics(base, models, totals)
    worst = {"npm": 0.0, "h": 0.0, "r": 0.0, "size": 0.0}
    for nb in neighbors(base, tau):
        st = statistics(nb, models, totals)
        worst["npm"] = max(worst["npm"], max(float(np.linalg.norm(a - b)) for a, b in zip(st["npm"], ref["npm"])))
        worst["h"] = max(worst["h"], float(np.abs(st["h"] - ref["h"]).max()))
        worst["r"] = max(worst["r"], float(np.abs(st["r"] - ref["r"]).max()))
        worst["size"] = max(worst["size"], float(np.linalg.norm(st["size"] - ref["size"])))
    return worst


def random_base(seed, n=4):
    rng = np.random.default_rng(seed)
    return [ALL_HOUSEHOLDS[i] for i in rng.integers(0, len(ALL_HOUSEHOLDS), n)]


def run_harness(seeds=(0, 1, 2), taus=(1, 2)) -> dict[int, dict]:
    """Worst-case changes over several base databases, keyed by tau."""
    models = fixed_models()
    totals = {1: 1.3, 2: 1.7, 3: 0.9}      # fixed (already released) group counts
    out = {}
    for tau in taus:
        agg = {"npm": 0.0, "h": 0.0, "r": 0.0, "size": 0.0}
        for seed in seeds:
            w = max_changes(random_base(seed), tau, models, totals)
            agg = {k: max(agg[k], w[k]) for k in agg}
        out[tau] = agg
    return out
