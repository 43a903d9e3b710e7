import json
import random

import numpy as np
import pytest

from relsynth.relational import (AttributeSpec, Database, ForeignKey, Relation, RelationSchema,
                                 augment_size_attribute, flatten)

# Small census example (4 households), coded:
#   AGE  10,12,25,30,35,40,55,60 -> 0..7     EMP No/Yes -> 0/1
#   EDU  Low/Mid/High -> 0/1/2               MAR No/Yes -> 0/1     OWN No/Yes -> 0/1
AGE = {10: 0, 12: 1, 25: 2, 30: 3, 35: 4, 40: 5, 55: 6, 60: 7}
T1_INDIVIDUALS = [
    # AGE EMP EDU MAR H-ID
    (40, 1, 1, 1, "1"),
    (35, 1, 2, 1, "1"),
    (12, 0, 0, 0, "1"),
    (10, 0, 0, 0, "1"),
    (55, 0, 2, 1, "2"),
    (60, 0, 1, 1, "2"),
    (25, 1, 1, 0, "2"),
    (30, 1, 2, 1, "3"),
    (25, 1, 2, 1, "3"),
]
T1_HOUSEHOLDS = [("1", 0), ("2", 0), ("3", 1)]


def table1_schemas(cap=4):
    ind = RelationSchema(
        "individual", "pid",
        [AttributeSpec("AGE", 8), AttributeSpec("EMP", 2), AttributeSpec("EDU", 3), AttributeSpec("MAR", 2)],
        [ForeignKey("hid", "household", max_group_size=cap, tau=1)],
        "secondary",
    )
    hh = RelationSchema("household", "hid", [AttributeSpec("OWN", 2)], [], "primary")
    return ind, hh


def table1_db(cap=4) -> Database:
    ind, hh = table1_schemas(cap)
    r_i = Relation(ind, [str(i + 1) for i in range(9)], {"hid": [r[4] for r in T1_INDIVIDUALS]},
                   np.array([[AGE[r[0]], r[1], r[2], r[3]] for r in T1_INDIVIDUALS]))
    r_h = Relation(hh, [h[0] for h in T1_HOUSEHOLDS], {}, np.array([[h[1]] for h in T1_HOUSEHOLDS]))
    return Database([r_i, r_h])


def table1_fr(cap=4):
    db = table1_db(cap)
    r_h = augment_size_attribute(db["household"], db["individual"], "hid")
    return flatten(db["individual"], r_h, "hid")


def write_table1(tmp_path, cap=4):
    schema = {"relations": [
        {"name": "individual", "primary_key": "pid",
         "attributes": [{"name": "AGE", "domain_size": 8}, {"name": "EMP", "domain_size": 2},
                        {"name": "EDU", "domain_size": 3}, {"name": "MAR", "domain_size": 2}],
         "foreign_keys": [{"attribute": "hid", "references": "household", "max_group_size": cap}],
         "privacy": "secondary"},
        {"name": "household", "primary_key": "hid", "attributes": [{"name": "OWN", "domain_size": 2}],
         "foreign_keys": [], "privacy": "primary"},
    ]}
    (tmp_path / "schema.json").write_text(json.dumps(schema))
    data = tmp_path / "data"
    data.mkdir()
    lines = ["pid,hid,AGE,EMP,EDU,MAR"] + [
        f"{i + 1},{r[4]},{AGE[r[0]]},{r[1]},{r[2]},{r[3]}" for i, r in enumerate(T1_INDIVIDUALS)]
    (data / "individual.csv").write_text("\n".join(lines) + "\n")
    (data / "household.csv").write_text("hid,OWN\n" + "".join(f"{h},{o}\n" for h, o in T1_HOUSEHOLDS))
    return tmp_path / "schema.json", data


def random_toy_fr(seed: int, max_households=6, max_size=5, n_h_attrs=1, n_i_attrs=2, dom=3):
    """A tiny random flattened relation with sizes in 1..max_size."""
    rng = random.Random(seed)
    n = rng.randint(1, max_households)
    ind = RelationSchema("ind", "pid", [AttributeSpec(f"A{j}", rng.randint(2, dom)) for j in range(n_i_attrs)],
                         [ForeignKey("hid", "hh", max_group_size=max_size, tau=1)], "secondary")
    hh = RelationSchema("hh", "hid", [AttributeSpec(f"H{j}", rng.randint(2, dom)) for j in range(n_h_attrs)],
                        [], "primary")
    keys, fks, rows = [], [], []
    for h in range(n):
        for _ in range(rng.randint(1, max_size)):
            keys.append(str(len(keys)))
            fks.append(str(h))
            rows.append([rng.randrange(a.domain_size) for a in ind.attributes])
    r_i = Relation(ind, keys, {"hid": fks}, np.array(rows))
    r_h = Relation(hh, [str(h) for h in range(n)], {},
                   np.array([[rng.randrange(a.domain_size) for a in hh.attributes] for _ in range(n)]))
    db = Database([r_i, r_h])
    return flatten(db["ind"], augment_size_attribute(db["hh"], db["ind"], "hid"), "hid")


@pytest.fixture
def fr1():
    return table1_fr()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for text in mod.summary_lines():
        terminalreporter.write_line(text)
