import json

from ctrlcouple.cli import main


def test_unknown_key_exits_2_and_names_it(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("sim:\n  seeed: 3\n")
    assert main(["rates", "--scenario", str(p), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert "sim.seeed" in err["error"] and err["kind"] == "scenario"


def test_bad_value_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("grid:\n  dx: -1\n")
    assert main(["rates", "--scenario", str(p), "--out", str(tmp_path)]) == 2


def test_missing_file_exits_2(tmp_path):
    assert main(["rates", "--scenario", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2


def test_rates_writes_artifacts(tmp_path):
    assert main(["rates", "--smoke", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "rates.json").read_text())
    assert data["membership"]["in_K"] and "ledger" in data
    assert (tmp_path / "bundle.csv").read_text().startswith("r,")


def test_hjb_and_ergodic(tmp_path):
    assert main(["hjb", "--smoke", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "value.csv").exists()
    assert main(["ergodic", "--smoke", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "ergodic.json").read_text())
    assert 1.0 < data["alpha_inf"] < 1.3546 and data["residual"] < 1e-6


def test_coupling_subcommand(tmp_path):
    assert main(["coupling", "--smoke", "--paths", "300", "--dt", "0.01", "--out", str(tmp_path)]) == 0
    head = (tmp_path / "coupling_reflection.csv").read_text().splitlines()[0]
    assert head == "s,mean_dist,mean_f_r,coalesced_frac,stderr"


def test_verify_subset(tmp_path, capsys):
    code = main(["verify", "--scenario", "scenarios/smoke.yaml", "--checks", "1,4,10", "--out", str(tmp_path)])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3 and all(l.startswith("PASS") for l in lines)
    report = json.loads((tmp_path / "report.json").read_text())
    assert [c["id"] for c in report["checks"]] == [1, 4, 10] and report["passed"]


def test_unknown_check_id(tmp_path, capsys):
    assert main(["verify", "--smoke", "--checks", "99", "--out", str(tmp_path)]) == 2
    assert "99" in json.loads(capsys.readouterr().err)["error"]
