"""Permutation-relation marginals, computed without materializing the relation.

An attribute of a permutation relation is an :class:`Attr` whose ``slot`` is
0 for the referenced ("household") tuple and a letter number 1, 2, ... for the
individual positions a, b, ....  The same type addresses flattened-relation
columns, where ``slot`` is the member position 1..N.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, MissingNPM, SubsetError
from .relational import FlattenedRelation

HOUSEHOLD = 0


class Attr(NamedTuple):
    slot: int
    name: str

    def __str__(self):
        if self.slot == HOUSEHOLD:
            return f"H.{self.name}"
        return f"I{self.slot}.{self.name}"


AttrSet = tuple[Attr, ...]


def letter(i: int) -> str:
    return "abcdefghijklmnopqrstuvwxyz"[i - 1]


def pr_label(a: Attr) -> str:
    return f"H.{a.name}" if a.slot == HOUSEHOLD else f"I_{letter(a.slot)}.{a.name}"


def slots_of(attrs: Iterable[Attr]) -> list[int]:
    return sorted({a.slot for a in attrs if a.slot != HOUSEHOLD})


def permutation_weight(s: int, o: int) -> int:
    """W_s: ordered member tuples generated per flattened row of size s."""
    return math.perm(s, min(s, o))


def canonicalize(attrs: Sequence[Attr]) -> tuple[AttrSet, dict[int, int]]:
    """Letter-renaming normal form of an attribute set.

    Returns the canonical (sorted) attribute tuple and the slot -> letter map
    that produces it.  Any renaming of the slots yields the same canonical
    tuple.
    """
    slots = slots_of(attrs)
    best, best_map = None, None
    for perm in itertools.permutations(range(1, len(slots) + 1)):
        m = dict(zip(slots, perm))
        cand = tuple(sorted(Attr(m.get(a.slot, HOUSEHOLD), a.name) for a in attrs))
        if best is None or cand < best:
            best, best_map = cand, m
    if best is None:  # household-only set
        best, best_map = tuple(sorted(attrs)), {}
    return best, best_map


@dataclass
class NPM:
    """Normalized permutation marginal on ``attrs`` for group size ``group_size``.

    ``counts`` has one axis per attribute, in ``attrs`` order.  ``variance``
    is the per-cell noise variance (0 for exact tables).
    """

    attrs: AttrSet
    group_size: int
    counts: np.ndarray
    variance: float = 0.0

    @property
    def total(self) -> float:
        return float(self.counts.sum())


def _domains(fr: FlattenedRelation, attrs: Sequence[Attr]) -> list[int]:
    h = {a.name: a.domain_size for a in fr.household_attrs}
    i = {a.name: a.domain_size for a in fr.individual_attrs}
    try:
        return [h[a.name] if a.slot == HOUSEHOLD else i[a.name] for a in attrs]
    except KeyError as exc:
        raise KeyError(f"unknown attribute {exc}") from None


def attr_domains(fr: FlattenedRelation, attrs: Sequence[Attr]) -> list[int]:
    return _domains(fr, attrs)


def _set_partitions(items: list) -> Iterable[list[list]]:
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for j in range(len(part)):
            yield part[:j] + [[first] + part[j]] + part[j + 1:]


PERMUTATION_LIMIT = 64      # above this many ordered member tuples per row, count by inclusion-exclusion
CHUNK_CELLS = 1 << 22


def count_npm(fr: FlattenedRelation, attrs: Sequence[Attr], s: int, o: int, method: str = "auto") -> NPM:
    """Exact NPM of ``attrs`` (letters as slots) over rows of group size ``s``.

    Each row contributes every ordered assignment of distinct members to the
    D letters; the integer counts are then divided by s!/(s-D)!, which equals
    the (s-D)!/(s-o')! extension multiplier divided by W_s.

    Small groups enumerate the assignments directly.  Large groups sum, over
    set partitions of the letters, Möbius-weighted products of per-row member
    histograms (letters in one block read the same member), which counts
    distinct assignments exactly in O(rows · cells) instead of O(rows · s^D).
    """
    attrs = tuple(attrs)
    letters = slots_of(attrs)
    D = len(letters)
    if D > min(s, o):
        raise DomainError(f"{D} letters exceed min(s={s}, o={o})")
    dims = _domains(fr, attrs)
    ncell = int(np.prod(dims, dtype=np.int64)) if dims else 1
    rows = fr.rows_of_size(s)
    if method == "auto":
        method = "permutations" if math.perm(s, D) <= PERMUTATION_LIMIT else "partitions"
    if not len(rows):
        counts = np.zeros(ncell, dtype=np.int64)
    elif method == "permutations":
        counts = _count_permutations(fr, attrs, letters, dims, ncell, rows, s)
    else:
        counts = _count_partitions(fr, attrs, letters, dims, rows, s)
    table = (counts / math.perm(s, D)).reshape(dims)
    return NPM(attrs, s, table)


def _count_permutations(fr, attrs, letters, dims, ncell, rows, s) -> np.ndarray:
    hidx = {n: j for j, n in enumerate(fr.household_names)}
    iidx = {n: j for j, n in enumerate(fr.individual_names)}
    hh = fr.household[rows]
    sl = fr.slots[rows]
    counts = np.zeros(ncell, dtype=np.int64)
    for members in itertools.permutations(range(s), len(letters)):
        pos = dict(zip(letters, members))
        idx = np.zeros(len(rows), dtype=np.int64)
        for a, d in zip(attrs, dims):
            col = hh[:, hidx[a.name]] if a.slot == HOUSEHOLD else sl[:, pos[a.slot], iidx[a.name]]
            idx = idx * d + col
        counts += np.bincount(idx, minlength=ncell)
    return counts


def _count_partitions(fr, attrs, letters, dims, rows, s) -> np.ndarray:
    hidx = {n: j for j, n in enumerate(fr.household_names)}
    iidx = {n: j for j, n in enumerate(fr.individual_names)}
    dom = dict(zip(attrs, dims))
    h_attrs = [a for a in attrs if a.slot == HOUSEHOLD]
    by_letter = {l: [a for a in attrs if a.slot == l] for l in letters}
    h_cells = int(np.prod([dom[a] for a in h_attrs], dtype=np.int64)) if h_attrs else 1
    l_cells = {l: int(np.prod([dom[a] for a in by_letter[l]], dtype=np.int64)) for l in letters}
    hh = fr.household[rows]
    sl = fr.slots[rows, :s]                                      # (n, s, |A_I|)
    h_code = np.zeros(len(rows), dtype=np.int64)
    for a in h_attrs:
        h_code = h_code * dom[a] + hh[:, hidx[a.name]]
    m_code = {}
    for l in letters:
        c = np.zeros(sl.shape[:2], dtype=np.int64)
        for a in by_letter[l]:
            c = c * dom[a] + sl[:, :, iidx[a.name]]
        m_code[l] = c
    out_shape = [h_cells] + [l_cells[l] for l in letters]
    total = np.zeros(out_shape, dtype=np.int64)
    n = len(rows)
    widest = max((int(np.prod([l_cells[l] for l in letters], dtype=np.int64))), 1) * h_cells
    step = max(1, CHUNK_CELLS // widest)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        r = hi - lo
        h_hot = np.zeros((r, h_cells), dtype=np.int64)
        h_hot[np.arange(r), h_code[lo:hi]] = 1
        for part in _set_partitions(list(letters)):
            coef = 1
            operands = [h_hot, [0, 1]]
            for block in part:
                coef *= (-1) ** (len(block) - 1) * math.factorial(len(block) - 1)
                cells = [l_cells[l] for l in block]
                code = np.zeros((r, s), dtype=np.int64)
                for l, cl in zip(block, cells):
                    code = code * cl + m_code[l][lo:hi]
                width = int(np.prod(cells, dtype=np.int64))
                flat = (np.arange(r)[:, None] * width + code).ravel()
                hist = np.bincount(flat, minlength=r * width).reshape([r] + cells)
                operands += [hist, [0] + [2 + letters.index(l) for l in block]]
            total += coef * np.einsum(*operands, [1] + [2 + j for j in range(len(letters))])
    # unpack letter codes back to per-attribute axes in ``attrs`` order
    axes_names = h_attrs + [a for l in letters for a in by_letter[l]]
    t = total.reshape([dom[a] for a in axes_names]) if axes_names else total.reshape(())
    if axes_names:
        t = np.transpose(t, [axes_names.index(a) for a in attrs])
    return t.ravel()


def rollup(m: NPM, sub: Sequence[Attr]) -> NPM:
    """Sum ``m`` down to ``sub`` (axes in ``sub`` order)."""
    sub = tuple(sub)
    if not set(sub) <= set(m.attrs) or len(set(sub)) != len(sub):
        raise SubsetError(f"{[str(a) for a in sub]} is not a subset of {[str(a) for a in m.attrs]}")
    keep = [m.attrs.index(a) for a in sub]
    drop = tuple(j for j in range(len(m.attrs)) if j not in keep)
    t = m.counts.sum(axis=drop) if drop else m.counts
    # remaining axes are in original order; permute to ``sub`` order
    remaining = sorted(keep)
    t = np.transpose(t, [remaining.index(j) for j in keep]) if keep else np.asarray(t)
    merged = int(np.prod([m.counts.shape[j] for j in drop], dtype=np.int64)) if drop else 1
    return NPM(sub, m.group_size, np.array(t, dtype=np.float64), m.variance * merged)


def relabel(m: NPM, attrs: Sequence[Attr]) -> NPM:
    """Reorder the axes of ``m`` to ``attrs`` (a permutation of ``m.attrs``)."""
    attrs = tuple(attrs)
    return NPM(attrs, m.group_size, np.transpose(m.counts, [m.attrs.index(a) for a in attrs]), m.variance)


class NPMStore:
    """Noisy NPMs keyed by (canonical attribute set, group size).

    Several estimates of the same key are combined by inverse-variance
    weighting.  Flattened-relation attribute sets are served by letter
    renaming at lookup time.
    """

    def __init__(self, o: int):
        self.o = o
        self._items: dict[tuple[AttrSet, int], NPM] = {}

    def __len__(self):
        return len(self._items)

    def keys(self):
        return self._items.keys()

    def _put(self, m: NPM) -> None:
        canon, mapping = canonicalize(m.attrs)
        mapped = tuple(Attr(mapping.get(a.slot, HOUSEHOLD), a.name) for a in m.attrs)
        table = np.transpose(m.counts, [mapped.index(c) for c in canon]) if canon else m.counts
        new = NPM(canon, m.group_size, np.array(table, dtype=np.float64), m.variance)
        key = (canon, m.group_size)
        old = self._items.get(key)
        if old is not None:
            new = _combine(old, new)
        self._items[key] = new

    def add(self, m: NPM) -> None:
        self._put(m)

    def add_with_rollups(self, m: NPM) -> None:
        """Store ``m`` and each non-empty roll-up (once per canonical subset)."""
        seen = set()
        attrs = m.attrs
        for r in range(len(attrs), 0, -1):
            for sub in itertools.combinations(attrs, r):
                canon, _ = canonicalize(sub)
                if canon in seen:
                    continue
                seen.add(canon)
                self._put(rollup(m, sub) if r < len(attrs) else m)

    def has(self, attrs: Sequence[Attr], s: int) -> bool:
        canon, _ = canonicalize(attrs)
        return (canon, s) in self._items

    def get(self, attrs: Sequence[Attr], s: int) -> NPM:
        """NPM for a flattened-relation attribute set, axes in ``attrs`` order."""
        attrs = tuple(attrs)
        slots = slots_of(attrs)
        if slots and (max(slots) > s or len(slots) > min(s, self.o)):
            raise DomainError(f"slots {slots} not representable for s={s}, o={self.o}")
        canon, mapping = canonicalize(attrs)
        m = self._items.get((canon, s))
        if m is None:
            raise MissingNPM(f"no NPM for {[pr_label(a) for a in canon]} at s={s}")
        mapped = [Attr(mapping.get(a.slot, HOUSEHOLD), a.name) for a in attrs]
        table = np.transpose(m.counts, [canon.index(c) for c in mapped]) if attrs else m.counts
        return NPM(attrs, s, table, m.variance)

    def instantiate(self, attrs: Sequence[Attr], s: int) -> np.ndarray:
        return self.get(attrs, s).counts


def _combine(a: NPM, b: NPM) -> NPM:
    if a.variance == 0 and b.variance == 0:
        return NPM(a.attrs, a.group_size, (a.counts + b.counts) / 2, 0.0)
    if a.variance == 0:
        return a
    if b.variance == 0:
        return b
    wa, wb = 1 / a.variance, 1 / b.variance
    return NPM(a.attrs, a.group_size, (wa * a.counts + wb * b.counts) / (wa + wb), 1 / (wa + wb))


# ------------------------------------------------------------------ R-scores

def r_score_tables(pair: np.ndarray, m1: np.ndarray, m2: np.ndarray, n: float) -> float:
    """½‖M12 − M1⊗M2 / n‖₁ for one group size."""
    if n <= 0:
        return 0.0
    return 0.5 * float(np.abs(pair - np.outer(m1, m2) / n).sum())


def r_score(a1: Attr, a2: Attr, fr: FlattenedRelation, o: int) -> float:
    """Noise-free R-score of a permutation-relation pair, summed over group sizes."""
    if a1 == a2:
        raise ValueError("R-score needs two distinct attributes")
    D = len(slots_of((a1, a2)))
    total = 0.0
    counts = fr.group_counts
    for s in range(1, fr.N + 1):
        if counts[s] == 0 or D > min(s, o):
            continue
        m = count_npm(fr, (a1, a2), s, o).counts
        total += r_score_tables(m, m.sum(axis=1), m.sum(axis=0), float(counts[s]))
    return total


def basic_pairs(household: Sequence[str], individual: Sequence[str]) -> list[AttrSet]:
    """The pairs whose R-scores determine all others by letter renaming.

    Household–individual pairs, unordered household pairs, unordered same-slot
    individual pairs and cross-slot pairs (I_a.A_i, I_b.A_j) with i <= j.
    """
    out = []
    for h in household:
        for a in individual:
            out.append((Attr(0, h), Attr(1, a)))
    for h1, h2 in itertools.combinations(household, 2):
        out.append((Attr(0, h1), Attr(0, h2)))
    for a1, a2 in itertools.combinations(individual, 2):
        out.append((Attr(1, a1), Attr(1, a2)))
    for i, a1 in enumerate(individual):
        for a2 in individual[i:]:
            out.append((Attr(1, a1), Attr(2, a2)))
    return [canonicalize(p)[0] for p in out]


def basic_pair_count(n_h: int, n_i: int) -> int:
    return (n_h * n_h + 2 * n_h * n_i + 2 * n_i * n_i - n_h) // 2


class RScores:
    """Pair scores looked up through letter renaming."""

    def __init__(self, values: dict[AttrSet, float] | None = None):
        self.values: dict[AttrSet, float] = dict(values or {})

    def __setitem__(self, pair: Sequence[Attr], v: float):
        self.values[canonicalize(pair)[0]] = float(v)

    def __getitem__(self, pair: Sequence[Attr]) -> float:
        return self.values[canonicalize(pair)[0]]

    def get(self, a1: Attr, a2: Attr, default: float = 0.0) -> float:
        return self.values.get(canonicalize((a1, a2))[0], default)

    def __len__(self):
        return len(self.values)


def npm_to_csv(m: NPM, path: str | Path) -> None:
    """Debug dump: one row per value combination, last column the count."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([pr_label(a) for a in m.attrs] + ["count"])
        for idx in itertools.product(*[range(d) for d in m.counts.shape]):
            w.writerow(list(idx) + [repr(float(m.counts[idx]))])
