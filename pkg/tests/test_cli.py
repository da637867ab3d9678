import json

import pytest

from prefmargin.cli import main
from prefmargin.diagnostics import REPORT_COLUMNS, parse_report

DUMP = (
    '{"id": "s0", "logp_policy_chosen": -1.0, "logp_policy_rejected": -4.0, "chosen_length": 1, "rejected_length": 1}\n'
    '{"id": "s1", "logp_policy_chosen": -2.0, "logp_policy_rejected": -4.0, "chosen_length": 1, "rejected_length": 1}\n'
    '{"id": "s2", "logp_policy_chosen": -3.0, "logp_policy_rejected": -4.0, "chosen_length": 1, "rejected_length": 1}\n'
)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--seed", "3", "--prompts", "40", "--valid-prompts", "10", "--out", str(d / "data.jsonl"), "--quiet"]) == 0
    code = main(
        [
            "train", "--data", str(d / "data.jsonl"), "--out", str(d / "model.json"), "--epochs", "20",
            "--batch-size", "8", "--seed", "1", "--report", str(d / "report.csv"),
            "--histograms", str(d / "hist.csv"), "--dump-out", str(d / "dump.jsonl"), "--quiet",
        ]
    )
    assert code == 0
    (d / "fixture.jsonl").write_text(DUMP)
    return d


class TestGen:
    def test_output(self, workdir, capsys):
        out = workdir / "g.jsonl"
        assert main(["gen", "--seed", "3", "--prompts", "40", "--valid-prompts", "10", "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "id: 40 pairs" in text and "mutual_ood: 10 pairs" in text
        assert out.read_text() == (workdir / "data.jsonl").read_text()

    def test_seed_before_subcommand(self, workdir, capsys):
        out = workdir / "g2.jsonl"
        assert main(["--seed", "3", "--quiet", "gen", "--prompts", "40", "--valid-prompts", "10", "--out", str(out)]) == 0
        assert capsys.readouterr().out == ""
        assert out.read_text() == (workdir / "data.jsonl").read_text()

    def test_bad_candidates(self, workdir, capsys):
        assert main(["gen", "--candidates", "1", "--out", str(workdir / "x.jsonl")]) == 1
        assert capsys.readouterr().err.startswith("E_VALIDATE: need at least two candidates")


class TestTrain:
    def test_outputs(self, workdir):
        rows = parse_report((workdir / "report.csv").read_text())
        assert (workdir / "report.csv").read_text().splitlines()[0] == ",".join(REPORT_COLUMNS)
        assert {r.epoch for r in rows} == set(range(21))
        ck = json.loads((workdir / "model.json").read_text())
        assert ck["seed"] == 1 and ck["config"]["method"] == "amapo"
        assert "bin_lo" in (workdir / "hist.csv").read_text().splitlines()[0]

    def test_deterministic(self, workdir):
        args = ["train", "--data", str(workdir / "data.jsonl"), "--epochs", "20", "--batch-size", "8", "--seed", "1", "--quiet"]
        assert main(args + ["--out", str(workdir / "m2.json"), "--report", str(workdir / "r2.csv")]) == 0
        assert (workdir / "r2.csv").read_bytes() == (workdir / "report.csv").read_bytes()
        assert (workdir / "m2.json").read_bytes() == (workdir / "model.json").read_bytes()

    def test_min_accuracy(self, workdir, capsys):
        args = ["train", "--data", str(workdir / "data.jsonl"), "--out", str(workdir / "m3.json"), "--quiet"]
        assert main(args + ["--min-accuracy", "1.01"]) == 2
        assert "below threshold" in capsys.readouterr().err

    def test_missing_data(self, workdir, capsys):
        assert main(["train", "--data", str(workdir / "nope.jsonl"), "--out", str(workdir / "m.json")]) == 1
        assert capsys.readouterr().err.startswith("E_VALIDATE")

    def test_parse_error(self, workdir, capsys):
        bad = workdir / "bad.jsonl"
        bad.write_text("{broken\n")
        assert main(["train", "--data", str(bad), "--out", str(workdir / "m.json")]) == 1
        assert capsys.readouterr().err.startswith("E_PARSE: line 1")

    def test_divergence(self, workdir, capsys):
        args = ["train", "--data", str(workdir / "data.jsonl"), "--out", str(workdir / "m4.json"), "--method", "ipo"]
        assert main(args + ["--lr", "1e300", "--epochs", "2", "--batch-size", "8"]) == 1
        assert capsys.readouterr().err.startswith("E_DIVERGE")


class TestEval:
    def test_checkpoint(self, workdir, capsys):
        assert main(["eval", "--data", str(workdir / "data.jsonl"), "--model", str(workdir / "model.json")]) == 0
        out = capsys.readouterr().out
        for tag in ("id", "prompt_ood", "response_ood", "mutual_ood"):
            assert f"{tag}: n=" in out

    def test_dump_matches_checkpoint(self, workdir, capsys):
        main(["eval", "--dump", str(workdir / "dump.jsonl"), "--method", "simpo", "--report", str(workdir / "e.csv")])
        rows = parse_report((workdir / "e.csv").read_text())
        assert [r.split for r in rows] == ["all"]

    def test_fixture_dump(self, workdir, capsys):
        assert main(["eval", "--dump", str(workdir / "fixture.jsonl"), "--method", "amapo", "--min-accuracy", "1.0"]) == 0
        assert "all: n=3 ranking_accuracy=1.0" in capsys.readouterr().out

    def test_model_required(self, workdir, capsys):
        assert main(["eval", "--data", str(workdir / "data.jsonl")]) == 1
        assert "--data requires --model" in capsys.readouterr().err

    def test_reference_required(self, workdir, capsys):
        assert main(["eval", "--dump", str(workdir / "fixture.jsonl"), "--method", "dpo"]) == 1
        assert "reference log-probs required" in capsys.readouterr().err


class TestGradcheck:
    def test_pass(self, capsys):
        assert main(["gradcheck", "--trials", "10"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 10

    def test_single(self, capsys):
        assert main(["gradcheck", "--method", "kto", "--trials", "5", "--quiet"]) == 0
        assert capsys.readouterr().out == ""

    def test_failure_exit(self, capsys):
        assert main(["gradcheck", "--method", "dpo", "--trials", "2", "--tol", "1e-20"]) == 2
        err = capsys.readouterr().err
        assert err.startswith("E_GRADCHECK: FAIL dpo")
        assert "offending instance" in err

    def test_bad_tol(self, capsys):
        assert main(["gradcheck", "--tol", "-1"]) == 1
        assert capsys.readouterr().err.startswith("E_VALIDATE: tol")


class TestMarginsAndCases:
    def test_margins_fixture(self, workdir, capsys):
        assert main(["margins", "--dump", str(workdir / "fixture.jsonl"), "--beta", "1.0"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 4
        assert lines[3].startswith("s2,1.0,")
        assert abs(float(lines[3].split(",")[6]) - 11.582435190007355) < 1e-12

    def test_margins_file(self, workdir):
        out = workdir / "m.csv"
        assert main(["margins", "--data", str(workdir / "data.jsonl"), "--model", str(workdir / "model.json"), "--out", str(out), "--quiet"]) == 0
        assert len(out.read_text().splitlines()) == 1 + 40 + 10 + 40 + 10

    def test_cases(self, workdir, capsys):
        assert main(["cases", "--dump", str(workdir / "fixture.jsonl"), "--method", "simpo", "--beta", "1", "--gamma", "1.5"]) == 0
        assert capsys.readouterr().out == "id,r,gamma,case_id\ns0,3.0,1.5,1\ns1,2.0,1.5,1\ns2,1.0,1.5,2\n"

    def test_cases_marginless(self, workdir, capsys):
        assert main(["cases", "--dump", str(workdir / "fixture.jsonl"), "--method", "kto"]) == 1
        assert "has no margin" in capsys.readouterr().err


class TestVersion:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--version"])
        assert info.value.code == 0
        assert "kernels" in capsys.readouterr().out
