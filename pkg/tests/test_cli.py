import json

import numpy as np
import pytest

from relsynth import cli
from relsynth.errors import BudgetOverdraw
from relsynth.privacy import ci_width_demo
from relsynth.relational import write_database

from test_orchestrator import instacart_like


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert cli.main(["gen-toy", "--households", "150", "--seed", "3", "--out", str(d)]) == 0
    return d


def _synth(toy, out, *extra):
    return cli.main(["synthesize", "--schema", str(toy / "schema.json"), "--data", str(toy), "--epsilon", "1.6",
                     "--delta", "auto", "--seed", "42", "--out", str(out), "--n-mrf", "2", "--t2", "2", *extra])


def test_synthesize_writes_files(toy, tmp_path):
    out = tmp_path / "o"
    assert _synth(toy, out) == 0
    for f in ("household.csv", "individual.csv", "schema.json", "ledger.json", "manifest.json"):
        assert (out / f).exists()
    man = json.loads((out / "manifest.json").read_text())
    led = json.loads((out / "ledger.json").read_text())
    assert man["ledger"]["total"] == pytest.approx(man["plan"]["total"], abs=1e-9)
    assert len(led) == man["ledger"]["charges"] and all(c["cost"] >= 0 for c in led)
    assert man["ledger"]["total"] <= man["privacy"]["budget"] * (1 + 1e-9)
    n_ind = sum(1 for _ in open(toy / "individual.csv")) - 1
    assert man["privacy"]["delta"] == pytest.approx(1 / n_ind)


def test_manifest_rerun_is_byte_identical(toy, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _synth(toy, a) == 0
    assert cli.main(["synthesize", "--manifest", str(a / "manifest.json"), "--out", str(b), "--threads", "3"]) == 0
    for f in ("household.csv", "individual.csv", "ledger.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_missing_tau_exits_2_naming_fk(tmp_path, capsys):
    db = instacart_like()
    db["orders"].schema.foreign_keys[0].max_group_size = None
    write_database(db, tmp_path / "d")
    rc = cli.main(["synthesize", "--schema", str(tmp_path / "d" / "schema.json"), "--data", str(tmp_path / "d"),
                   "--epsilon", "1", "--out", str(tmp_path / "o")])
    assert rc == 2 and "order_products.order_id" in capsys.readouterr().err


def test_config_errors_exit_2(toy, tmp_path):
    assert _synth(toy, tmp_path / "o", "--tau", "garbage") == 2
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    assert _synth(toy, tmp_path / "o", "--config", str(bad)) == 2
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert _synth(toy, tmp_path / "o", "--config", str(bad)) == 2


def test_data_errors_exit_3(toy, tmp_path):
    assert cli.main(["synthesize", "--schema", str(toy / "schema.json"), "--data", str(tmp_path / "missing"),
                     "--epsilon", "1", "--out", str(tmp_path / "o")]) == 3
    d = tmp_path / "d"
    d.mkdir()
    for f in ("household.csv", "schema.json"):
        (d / f).write_bytes((toy / f).read_bytes())
    lines = (toy / "individual.csv").read_text().splitlines()
    parts = lines[1].split(",")
    parts[1] = "no-such-household"
    (d / "individual.csv").write_text("\n".join([lines[0], ",".join(parts)] + lines[2:]) + "\n")
    assert cli.main(["synthesize", "--schema", str(d / "schema.json"), "--data", str(d), "--epsilon", "1",
                     "--out", str(tmp_path / "o")]) == 3


def test_budget_overdraw_exits_4(toy, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise BudgetOverdraw("spent too much")
    monkeypatch.setattr(cli, "synthesize_database", boom)
    assert _synth(toy, tmp_path / "o") == 4


def test_evaluate_identical_dirs_and_mismatch(toy, tmp_path, capsys):
    rep = tmp_path / "r.json"
    assert cli.main(["evaluate", "--schema", str(toy / "schema.json"), "--real", str(toy), "--synthetic", str(toy),
                     "--queries", "200", "--c", "2", "--out", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert report["summary"]["mean"] == 0 and report["summary"]["median"] == 0
    other = tmp_path / "other"
    other.mkdir()
    schema = json.loads((toy / "schema.json").read_text())
    schema["relations"][0]["attributes"][0]["bin_representatives"][0] = -3.0
    (other / "schema.json").write_text(json.dumps(schema))
    for f in ("household.csv", "individual.csv"):
        (other / f).write_bytes((toy / f).read_bytes())
    assert cli.main(["evaluate", "--schema", str(toy / "schema.json"), "--real", str(toy),
                     "--synthetic", str(other)]) == 3


def test_demo_ci_defaults(capsys):
    assert cli.main(["demo-ci"]) == 0
    out = capsys.readouterr().out
    assert "ratio" in out and out.strip().endswith("100")
    assert cli.main(["demo-ci", "--M", "1"]) == 0
    assert capsys.readouterr().out.strip().endswith(" 1")
    widths = [ci_width_demo(100, e, 1 / 3_000_000)[1] for e in (0.2, 0.4, 0.8, 1.6, 3.2)]
    assert all(np.diff(widths) < 0)
