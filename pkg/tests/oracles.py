"""Brute-force reference implementations used only by the tests.

These deliberately share no code with the library: they enumerate
permutations explicitly and count with exact rational arithmetic.
"""

import itertools
from collections import Counter
from fractions import Fraction
from math import factorial, perm


def _rows(fr, s):
    """(household dict, list of member dicts) for every flattened row of size s."""
    out = []
    for r in range(len(fr.household)):
        if int(fr.household[r, fr.size_index]) != s:
            continue
        h = {a.name: int(fr.household[r, j]) for j, a in enumerate(fr.household_attrs)}
        members = [{a.name: int(fr.slots[r, p, j]) for j, a in enumerate(fr.individual_attrs)} for p in range(s)]
        out.append((h, members))
    return out


def _value(attr, h, ordered):
    slot, name = attr
    return h[name] if slot == 0 else ordered[slot - 1][name]


def full_permutation_npm(fr, attrs, s):
    """Reference count over all s! member orderings, divided by s!."""
    c = Counter()
    for h, members in _rows(fr, s):
        for order in itertools.permutations(members):
            c[tuple(_value(a, h, order) for a in attrs)] += 1
    return {k: Fraction(v, factorial(s)) for k, v in c.items()}


def materialized_pr_npm(fr, attrs, s, o):
    """Materialize P_{s,o}: all ordered o'-tuples of distinct members, o' = min(s, o); divide by W_s."""
    op = min(s, o)
    w = perm(s, op)
    c = Counter()
    for h, members in _rows(fr, s):
        for tup in itertools.permutations(members, op):
            c[tuple(_value(a, h, tup) for a in attrs)] += 1
    return {k: Fraction(v, w) for k, v in c.items()}


def pr_r_score(fr, a1, a2, o):
    """R-score evaluated from materialized permutation relations, exactly."""
    total = Fraction(0)
    for s in range(1, fr.N + 1):
        rows = _rows(fr, s)
        n = len(rows)
        d = len({a[0] for a in (a1, a2) if a[0] != 0})
        if n == 0 or d > min(s, o):
            continue
        joint = materialized_pr_npm(fr, (a1, a2), s, o)
        m1 = Counter()
        m2 = Counter()
        for (x, y), v in joint.items():
            m1[x] += v
            m2[y] += v
        dom1 = _dom(fr, a1)
        dom2 = _dom(fr, a2)
        for x in range(dom1):
            for y in range(dom2):
                total += abs(joint.get((x, y), 0) - m1.get(x, 0) * m2.get(y, 0) / n) / 2
    return total


def _dom(fr, attr):
    slot, name = attr
    attrs = fr.household_attrs if slot == 0 else fr.individual_attrs
    return next(a.domain_size for a in attrs if a.name == name)


def as_dense(table, dims):
    """Fraction dict -> nested list of floats in row-major order (for comparison)."""
    out = []
    for idx in itertools.product(*[range(d) for d in dims]):
        out.append(float(table.get(idx, 0)))
    return out


def enumerate_joint(variables, domains, cliques, theta):
    """Normalized joint of a log-linear model by explicit enumeration (dict state->prob)."""
    import math
    weights = {}
    for state in itertools.product(*[range(domains[v]) for v in variables]):
        assign = dict(zip(variables, state))
        e = 0.0
        for c in cliques:
            e += float(theta[c][tuple(assign[v] for v in c)])
        weights[state] = math.exp(e)
    z = sum(weights.values())
    return {k: v / z for k, v in weights.items()}
