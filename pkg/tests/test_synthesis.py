import dataclasses

import numpy as np
import pytest
from scipy.optimize import brentq

from relsynth.marginals import HOUSEHOLD, NPM, Attr, canonicalize, count_npm
from relsynth.privacy import FKShape, Ledger, Streams, plan_fk
from relsynth.relational import (AttributeSpec, Database, ForeignKey, Relation, RelationSchema,
                                 augment_size_attribute, flatten)
from relsynth.synthesis import (FKState, SynthesisConfig, assign_group_sizes, compute_noisy_r_scores,
                                construct_mrfs, init_npm_store, noisy_group_counts, noisy_h_score, query_npms,
                                select_correlated,
                                synthesize_fk)

from conftest import random_toy_fr, table1_fr

SIZE = "#size(individual.hid)"


def _state(fr, tau=1.0, budget=1e9, seed=0, **cfg):
    config = SynthesisConfig(seed=seed, **cfg)
    size_name = fr.household_names[fr.size_index]
    return FKState(fr, size_name, tau, config, Ledger(budget), Streams(seed), "t")


def _plan(fr, share=50.0, o=3, k=4, t2=1, mode="full", private=True):
    shape = FKShape("individual", "hid", "household", 1, n_h=len(fr.household_attrs) - 1,
                    n_i=len(fr.individual_attrs), N=fr.N, referenced_private=private)
    return plan_fk(shape, share, o, k, t2, mode)


def _build_fr(households, n_i_doms, h_doms, cap):
    """households: list of (household codes, [member code rows])."""
    ind = RelationSchema("individual", "pid", [AttributeSpec(f"A{j}", d) for j, d in enumerate(n_i_doms)],
                         [ForeignKey("hid", "household", max_group_size=cap, tau=1)], "secondary")
    hh = RelationSchema("household", "hid", [AttributeSpec(f"H{j}", d) for j, d in enumerate(h_doms)], [],
                        "primary")
    keys, fks, rows = [], [], []
    for h, (_, members) in enumerate(households):
        for m in members:
            keys.append(str(len(keys)))
            fks.append(str(h))
            rows.append(list(m))
    r_i = Relation(ind, keys, {"hid": fks}, np.array(rows).reshape(len(rows), len(n_i_doms)))
    r_h = Relation(hh, [str(h) for h in range(len(households))], {},
                   np.array([list(hv) for hv, _ in households]).reshape(len(households), len(h_doms)))
    db = Database([r_i, r_h])
    return flatten(db["individual"], augment_size_attribute(db["household"], db["individual"], "hid"), "hid")


# ---------------------------------------------------------------- R-scores

def test_basic_query_count_and_reuse():
    fr = random_toy_fr(3, n_h_attrs=2, n_i_attrs=2)
    st = _state(fr)
    compute_noisy_r_scores(st, 1.0)
    assert len(st.ledger.charges) == 9
    before = len(st.ledger.charges)
    a, b = st.individual_names
    assert st.scores.get(Attr(2, a), Attr(2, b)) == st.scores.get(Attr(1, a), Attr(1, b))
    assert st.scores.get(Attr(3, a), Attr(1, b)) == st.scores.get(Attr(1, a), Attr(2, b))
    assert len(st.ledger.charges) == before


def test_select_correlated_excludes_size_and_breaks_ties():
    fr = table1_fr()
    st = _state(fr)
    syn = [Attr(HOUSEHOLD, n) for n in fr.household_names] + [Attr(1, "AGE")]
    C = select_correlated(st, Attr(1, "EMP"), syn, 8)
    assert Attr(HOUSEHOLD, SIZE) not in C
    assert C == [Attr(HOUSEHOLD, "OWN"), Attr(1, "AGE")]  # all scores 0 -> canonical order


def test_copy_attribute_ranks_first():
    rng = np.random.default_rng(0)
    households = []
    for _ in range(300):
        h = rng.integers(0, 3, 2)
        size = int(rng.integers(1, 4))
        members = [(int(h[1]), int(rng.integers(0, 3)), int(rng.integers(0, 3))) for _ in range(size)]
        households.append((h, members))
    fr = _build_fr(households, [3, 3, 3], [3, 3], 3)
    st = _state(fr, budget=1e15)
    compute_noisy_r_scores(st, 1e-6)
    syn = [Attr(HOUSEHOLD, n) for n in fr.household_names] + [Attr(1, "A1"), Attr(1, "A2")]
    assert select_correlated(st, Attr(1, "A0"), syn, 2)[0] == Attr(HOUSEHOLD, "H1")


# ------------------------------------------------------------- NPM queries

def test_query_npms_exact_on_table1():
    fr = table1_fr()
    st = _state(fr, tau=0.0)
    st.n_tilde = fr.group_counts.astype(float)
    canon = query_npms(st, [Attr(1, "EMP"), Attr(2, "EMP")], 1.0, "q")
    assert st.ledger.total == 0
    for s in (2, 3, 4):
        want = count_npm(fr, canon, s, 3).counts
        assert np.allclose(st.store.get(canon, s).counts, want, atol=1e-12)


def test_merged_sizes_rescale():
    fr = table1_fr()
    st = _state(fr, tau=0.0, merge_from=2)
    st.n_tilde = np.array([0.0, 0.0, 1.0, 1.0, 1.0])
    canon, _ = canonicalize([Attr(1, "EMP"), Attr(2, "EMP")])
    query_npms(st, canon, 1.0, "q")
    merged = sum(count_npm(fr, canon, s, 3).counts for s in (2, 3, 4))
    stored = [st.store.get(canon, s).counts for s in (2, 3, 4)]
    assert np.allclose(sum(stored), merged)
    for s, t in zip((2, 3, 4), stored):
        assert t.sum() == pytest.approx(merged.sum() * st.n_tilde[s] / 3)


@pytest.mark.parametrize("merge_from", [None, 2, 3])
def test_one_charge_per_query(merge_from):
    fr = table1_fr()
    st = _state(fr, merge_from=merge_from)
    st.n_tilde = fr.group_counts.astype(float)
    query_npms(st, [Attr(1, "EMP"), Attr(2, "AGE")], 2.0, "q")
    assert len(st.ledger.charges) == 1 and st.ledger.total == pytest.approx(0.25)


class _ExactModel:
    def __init__(self, table):
        self.table = table

    def marginal_of(self, attrs):
        return self.table


def test_noisy_h_score_is_debiased():
    """A perfect model scores ~0 on average; the raw L1 would sit near cells*sigma*sqrt(2/pi)."""
    fr = random_toy_fr(5, max_households=40, n_i_attrs=2, dom=4)
    st = _state(fr)
    st.n_tilde = fr.group_counts.astype(float)
    attrs = (Attr(1, fr.individual_names[0]), Attr(1, fr.individual_names[1]))
    sizes = [s for s in range(1, fr.N + 1) if st.n_tilde[s] > 0]
    exact = {s: count_npm(fr, attrs, s, 3).counts for s in sizes}
    models = {s: _ExactModel(exact[s] / st.n_tilde[s]) for s in sizes}
    rng = np.random.default_rng(0)
    scores = []
    for _ in range(400):
        st.store = type(st.store)(3)
        for s in sizes:
            st.store.add(NPM(attrs, s, exact[s] + rng.normal(0, 2.0, exact[s].shape), 4.0))
        scores.append(noisy_h_score(st, attrs, models))
    cells = sum(exact[s].size for s in sizes)
    bias_removed = cells * 2.0 * np.sqrt(2 / np.pi)
    assert abs(np.mean(scores)) < 0.05 * bias_removed


def test_query_beyond_order_raises():
    from relsynth.errors import DomainError
    st = _state(table1_fr(), o=2)
    st.n_tilde = st.fr.group_counts.astype(float)
    with pytest.raises(DomainError):
        query_npms(st, [Attr(1, "EMP"), Attr(2, "EMP"), Attr(3, "EMP")], 1.0, "q")


# ------------------------------------------------------------ construction

def _prepared(fr, plan, seed=0, **cfg):
    st = _state(fr, tau=plan.tau, seed=seed, **cfg)
    noisy_group_counts(st, plan.sigma_n)
    compute_noisy_r_scores(st, plan.sigma_r)
    return st


def test_construct_mrfs_ledger_delta():
    fr = random_toy_fr(5, max_households=6, max_size=4, n_h_attrs=1, n_i_attrs=2)
    plan = _plan(fr)
    st = _prepared(fr, plan)
    st.synthesized = [Attr(HOUSEHOLD, n) for n in fr.household_names]
    before = st.ledger.total
    models, C, structure = construct_mrfs(st, Attr(1, st.individual_names[0]), plan.sigma_m, plan.sigma_h)
    want = plan.tau ** 2 * (plan.k / plan.sigma_h ** 2 + 1 / plan.sigma_m ** 2) * plan.t2
    assert st.ledger.total - before == pytest.approx(want, rel=1e-12)
    assert set(models) == set(range(1, fr.N + 1))
    for S in structure:
        assert set(S) <= set(C) | {Attr(1, st.individual_names[0])}


def test_first_target_without_context_is_unary():
    fr = random_toy_fr(2, n_h_attrs=1, n_i_attrs=1)
    plan = _plan(fr)
    st = _prepared(fr, plan)
    target = Attr(1, st.individual_names[0])
    models, C, structure = construct_mrfs(st, target, plan.sigma_m, plan.sigma_h)
    assert C == [] and structure == [(target,)]
    for s, m in models.items():
        noisy, total = st.store.instantiate((target,), s), float(st.n_tilde[s])
        if total <= 0:
            continue
        # projection onto {x >= 0, sum x = n_s}: shift by theta, clip at 0
        theta = brentq(lambda th: np.maximum(noisy - th, 0).sum() - total, noisy.min() - total, noisy.max())
        want = np.maximum(noisy - theta, 0) / total
        assert np.allclose(m.marginal_of((target,)), want, atol=2e-3)


def test_full_init_spends_its_share():
    rng = np.random.default_rng(3)
    households = [(rng.integers(0, 2, 1), [tuple(rng.integers(0, 3, 2)) for _ in range(rng.integers(1, 5))])
                  for _ in range(200)]
    fr = _build_fr(households, [3, 3], [2], 4)
    plan = _plan(fr)
    st = _prepared(fr, plan)
    before = st.ledger.total
    init_npm_store(st, plan)
    assert st.ledger.total - before == pytest.approx(plan.init.cost, rel=1e-9)
    assert set(plan.init.parts) == {"household", "individual", "inter", "intra"}
    assert len(st.store) > 0


# ---------------------------------------------------------------- pipeline

def _two_relation(seed=0, n=120):
    rng = np.random.default_rng(seed)
    households = []
    for _ in range(n):
        own = int(rng.integers(0, 2))
        size = int(rng.integers(1, 4))
        households.append(([own], [(own if rng.random() < .8 else 1 - own, int(rng.integers(0, 3)))
                                   for _ in range(size)]))
    return _build_fr(households, [2, 3], [2], 3)


def test_synthesize_fk_ledger_padding_determinism():
    fr = _two_relation()
    plan = _plan(fr, share=20.0)
    outs = []
    for threads in (1, 2):
        led = Ledger(25.0)
        syn, st = synthesize_fk(fr, fr.household, plan, SynthesisConfig(seed=4, threads=threads), led, Streams(4),
                                "individual.hid")
        assert led.total == pytest.approx(plan.share, rel=1e-9)
        syn.check_padding()
        assert np.array_equal(syn.sizes, fr.sizes)
        outs.append(syn.slots)
        assert len(st.progress) == fr.N * len(fr.individual_attrs)
    assert np.array_equal(outs[0], outs[1])
    size2 = np.flatnonzero(fr.sizes == 2)
    assert (outs[0][size2, 2] == fr.null_codes).all()


def test_pure_noise_scores_still_run():
    fr = _two_relation(1, 40)
    plan = dataclasses.replace(_plan(fr, share=20.0), sigma_r=1e12)
    led = Ledger(1e9)
    syn, _ = synthesize_fk(fr, fr.household, plan, SynthesisConfig(seed=0), led, Streams(0), "x")
    syn.check_padding()


def _canonical_rows(fr):
    rows = []
    for h in range(len(fr)):
        s = fr.sizes[h]
        members = sorted(tuple(m) for m in fr.slots[h, :s].tolist())
        rows.append((tuple(fr.household[h].tolist()), tuple(members)))
    return rows


def test_zero_noise_saturated_model_matches_distribution():
    # one household and one member attribute, N = 2: every joint fits in one clique
    rng = np.random.default_rng(2)
    households = []
    for _ in range(400):
        own = int(rng.integers(0, 2))
        size = int(rng.integers(1, 3))
        households.append(([own], [((own + int(rng.random() < 0.3)) % 3,) for _ in range(size)]))
    fr = _build_fr(households, [3], [2], 2)
    plan = dataclasses.replace(_plan(fr, share=20.0, o=2), tau=0.0)
    house = fr.household[rng.integers(0, len(fr), 100_000)]
    syn, st = synthesize_fk(fr, house, plan, SynthesisConfig(seed=1, o=2), Ledger(1.0), Streams(1), "x")
    assert st.ledger.total == 0
    real = _canonical_rows(fr)
    fake = _canonical_rows(syn)
    keys = set(real) | set(fake)
    pr = {k: 0.0 for k in keys}
    pf = dict(pr)
    for k in real:
        pr[k] += 1 / len(real)
    for k in fake:
        pf[k] += 1 / len(fake)
    tv = 0.5 * sum(abs(pr[k] - pf[k]) for k in keys)
    assert tv <= 0.05


def test_assign_group_sizes_largest_remainder():
    sizes = assign_group_sizes(np.array([0, 5, 3, 2]), 10, np.random.default_rng(0))
    assert sorted(np.bincount(sizes, minlength=4).tolist()) == sorted([0, 5, 3, 2])
    assert np.bincount(sizes, minlength=4).tolist() == [0, 5, 3, 2]
    sizes = assign_group_sizes(np.array([0, 1, 1]), 3, np.random.default_rng(0))
    assert len(sizes) == 3 and set(sizes.tolist()) <= {1, 2}
