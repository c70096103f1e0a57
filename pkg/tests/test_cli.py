import json

import pytest

from viraltweets.cli import EXIT_CONVERGENCE, EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from viraltweets.pipeline import bundled_sample_path

SAMPLE = str(bundled_sample_path())


def test_usage_errors(capsys):
    assert run([]) == EXIT_USAGE
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run(["describe", "--input", SAMPLE, "--bogus"]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_same_input_and_output_rejected(tmp_path):
    path = tmp_path / "x.jsonl"
    path.write_text("")
    assert run(["ingest", "--input", str(path), "--output", str(path)]) == EXIT_USAGE


def test_missing_file_is_data_error(tmp_path):
    assert run(["describe", "--input", str(tmp_path / "nope.jsonl")]) == EXIT_DATA


def test_simulate_twice_is_byte_identical(tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name / "sim.csv"
        out.parent.mkdir()
        assert run(["simulate", "--kind", "poisson", "--n", "100", "--seed", "7", "--output", str(out)]) == EXIT_OK
        outputs.append(
            (out.read_bytes(), (out.parent / "sim.csv.schema.json").read_bytes(), (out.parent / "sim.params.json").read_bytes())
        )
    assert outputs[0] == outputs[1]
    params = json.loads(outputs[0][2])
    assert params["seed"] == 7 and params["beta"] == [1.0, 0.5, -0.3]


def test_describe_bundled_sample(capsys):
    assert run(["describe", "--input", SAMPLE, "--columns", "retweet_count,favorite_count"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["Statistic", "N", "Mean", "St.", "Dev.", "Min", "Pctl(25)", "Pctl(75)", "Max"]
    assert lines[1].split()[:2] == ["retweet_count", "1,000"]


def test_ingest_writes_records_and_report(tmp_path):
    out, report = tmp_path / "clean.jsonl", tmp_path / "report.json"
    assert run(["ingest", "--input", SAMPLE, "--output", str(out), "--report", str(report)]) == EXIT_OK
    rows = out.read_text().splitlines()
    assert rows and all("device_class" in json.loads(r) for r in rows)
    stages = [r["stage"] for r in json.loads(report.read_text())]
    assert stages[0] == "parse" and stages[-1] == "retweet_percentile"


def test_score_then_fit_then_report(tmp_path, capsys):
    frame = tmp_path / "frame.csv"
    assert run(["score", "--input", SAMPLE, "--output", str(frame)]) == EXIT_OK
    assert (tmp_path / "frame.csv.schema.json").exists()
    saved = tmp_path / "fit.json"
    rc = run(
        ["fit", "--input", str(frame), "--formula", "retweet_count ~ favorite_count + source + jockers",
         "--family", "negbin", "--output", str(saved)]
    )
    assert rc == EXIT_OK
    fitted = capsys.readouterr().out
    assert run(["report", "--input", str(saved)]) == EXIT_OK
    assert capsys.readouterr().out == fitted
    assert "source:Mobile" in fitted


def test_formula_error_shows_caret(tmp_path, capsys):
    rc = run(["fit", "--input", SAMPLE, "--formula", "retweet_count ~"])
    assert rc == EXIT_DATA
    assert "^" in capsys.readouterr().err


def test_cf_fit_on_synthetic_endogenous_frame(tmp_path, capsys):
    sim = tmp_path / "endo.csv"
    assert run(["simulate", "--kind", "endogenous", "--n", "3000", "--seed", "3", "--output", str(sim)]) == EXIT_OK
    rc = run(
        ["cf-fit", "--input", str(sim), "--family", "negbin", "--endogenous", "w", "--instrument", "z",
         "--formula", "y ~ x1", "--cf-mode", "conventional", "--output", str(tmp_path / "cf.json")]
    )
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "Stage 1" in out and "Stage 2" in out and "Wald test" in out
    assert run(["report", "--input", str(tmp_path / "cf.json")]) == EXIT_OK
    assert capsys.readouterr().out == out


def test_lrtest_and_efa(tmp_path, capsys):
    sim = tmp_path / "sim.csv"
    run(["simulate", "--kind", "poisson", "--n", "500", "--seed", "1", "--output", str(sim)])
    assert run(["lrtest", "--input", str(sim), "--formula", "y ~ x1", "--full-formula", "y ~ x1 + x2"]) == EXIT_OK
    assert "LR test" in capsys.readouterr().out
    fac = tmp_path / "fac.csv"
    run(["simulate", "--kind", "factor", "--n", "2000", "--seed", "1", "--output", str(fac)])
    assert run(["efa", "--input", str(fac), "--factors", "2", "--columns", "v1,v2,v3,v4,v5,v6"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["rmsea"] < 0.05


def test_convergence_failure_exit_code(tmp_path, monkeypatch):
    import viraltweets.regress as regress

    sim = tmp_path / "sim.csv"
    run(["simulate", "--kind", "poisson", "--n", "200", "--seed", "1", "--output", str(sim)])
    monkeypatch.setattr(regress, "MAX_ITER", 1)
    assert run(["fit", "--input", str(sim), "--formula", "y ~ x1 + x2"]) == EXIT_CONVERGENCE


def test_lexicon_dir_from_environment(tmp_path, monkeypatch, capsys):
    (tmp_path / "tiny.tsv").write_text("good\t1\n")
    monkeypatch.setenv("VIRALTWEETS_LEXICONS", str(tmp_path))
    assert run(["describe", "--input", SAMPLE, "--columns", "tiny"]) == EXIT_OK
    assert "tiny" in capsys.readouterr().out


@pytest.mark.slow
def test_report_preset_is_replayable(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert run(["report", "--preset", "paper", "--input", SAMPLE, "--output", str(a)]) == EXIT_OK
    assert run(["report", "--preset", "paper", "--input", SAMPLE, "--output", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert "Control-function regression" in a.read_text()
