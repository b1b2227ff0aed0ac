import csv
import json
from pathlib import Path

import numpy as np
import pytest

from strataflows import cli

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

SMALL_SIT = {
    "model": "reference",
    "N": 3000,
    "initial_prevalence": 0.1,
    "t_span": [0, 200],
    "window": [150, 200],
    "xi": {"M:a": 0.6, "F:a": 0.6, "M:b": 0.45, "F:b": 0.45},
    "seed": 7,
}
QUICK_FIT = {"model": "gamma", "chains": 2, "warmup": 100, "iterations": 200}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree(out):
    """All output files keyed by relative path; the manifest without its timing field."""
    files = {}
    for p in sorted(Path(out).rglob("*")):
        if p.is_file():
            text = p.read_text()
            if p.name == "manifest.json":
                m = json.loads(text)
                m.pop("wall_clock_seconds")
                text = json.dumps(m, sort_keys=True)
            files[str(p.relative_to(out))] = text
    return files


def pipeline(tmp_path, tag, seed=None):
    base = tmp_path / tag
    base.mkdir()
    extra = [] if seed is None else ["--seed", str(seed)]
    sim_cfg = write_json(tmp_path / "sim.json", SMALL_SIT)
    fit_cfg = write_json(tmp_path / "fit.json", QUICK_FIT)
    s, e, f, m = (str(base / d) for d in "sefm")
    assert cli.main(["simulate", "gillespie", "--config", sim_cfg, "--out", s, *extra]) == 0
    assert cli.main(["estimate-sampling", "--config", str(SCENARIOS / "estimate_beta.json"),
                     "--stages", f"{s}/stages.csv", "--out", e, *extra]) == 0
    assert cli.main(["fit", "--config", fit_cfg, "--counts", f"{s}/counts.csv", "--strata", f"{s}/strata.csv",
                     "--xi-source", f"{e}/xi_source.csv", "--xi-recipient", f"{e}/xi_recipient.csv",
                     "--out", f, *extra]) == 0
    assert cli.main(["summarize", "--config", str(SCENARIOS / "summarize_all.json"), "--draws", f"{f}/draws.csv",
                     "--strata", f"{s}/strata.csv", "--out", m, *extra]) == 0
    return base


# ---------------------------------------------------------------------------
# end to end


def test_pipeline_runs_and_writes_manifests(tmp_path):
    base = pipeline(tmp_path, "run")
    for d, expect in {
        "s": {"strata.csv", "counts.csv", "truth_z.csv", "truth_pi.csv", "stages.csv", "prevalence.csv"},
        "e": {"xi_source.csv", "xi_recipient.csv"},
        "f": {"draws.csv", "diagnostics.csv", "summary.json"},
        "m": {f"summary_{k}.csv" for k in ("flows", "sources", "recipients", "ratio", "cv")},
    }.items():
        out = base / d
        man = json.loads((out / "manifest.json").read_text())
        assert set(man) == {"command", "config_hash", "seed", "inputs", "artifact_version",
                            "wall_clock_seconds", "outputs"}
        assert expect <= set(man["outputs"])
        assert "warnings.json" in man["outputs"]
        for rel in man["outputs"]:
            assert (out / rel).is_file()
        assert len(list(out.rglob("manifest.json"))) == 1
    # input digests match the files that were read
    import hashlib

    man = json.loads((base / "f" / "manifest.json").read_text())
    for path, digest in man["inputs"].items():
        assert hashlib.sha256(Path(path).read_bytes()).hexdigest() == digest
    summ = json.loads((base / "f" / "summary.json").read_text())
    assert summ["model"] == "gamma" and len(summ["cells"]) == 8
    assert sum(c["mean"] for c in summ["cells"]) == pytest.approx(1.0, abs=1e-9)


def test_rerun_is_byte_identical(tmp_path):
    a = tree(pipeline(tmp_path, "a"))
    b = tree(pipeline(tmp_path, "b"))
    # manifests record input paths, which live under different run folders
    strip = lambda files: {k: v for k, v in files.items() if not k.endswith("manifest.json")}
    assert strip(a) == strip(b)
    c = tree(pipeline(tmp_path, "c", seed=99))
    assert c["s/counts.csv"] != a["s/counts.csv"]


@pytest.mark.parametrize("name", ["multinomial_2x2.json", "gp_flows.json"])
def test_simulate_same_seed_identical_truth(tmp_path, name):
    kind = "multinomial" if "multinomial" in name else "gp"
    cfg = str(SCENARIOS / name)
    assert cli.main(["simulate", kind, "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["simulate", kind, "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    for f in ("truth_pi.csv", "counts.csv", "strata.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_ode_writes_prevalence_trace(tmp_path):
    from strataflows.sim import simulate_sit_ode, reference_sit_model

    assert cli.main(["simulate", "ode", "--config", str(SCENARIOS / "sit_ode_reference.json"),
                     "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "prevalence.csv")
    assert float(rows[0]["time"]) == 0.0 and float(rows[-1]["time"]) == 1000.0
    want = simulate_sit_ode(reference_sit_model(), (0, 1000)).prevalence()[-1]
    assert float(rows[-1]["prevalence"]) == pytest.approx(want, rel=1e-5)


def test_replicates_get_subfolders(tmp_path):
    cfg = json.loads((SCENARIOS / "multinomial_2x2.json").read_text())
    cfg["replicates"] = 3
    assert cli.main(["simulate", "multinomial", "--config", write_json(tmp_path / "c.json", cfg),
                     "--out", str(tmp_path / "o")]) == 0
    reps = sorted(p.name for p in (tmp_path / "o").iterdir() if p.is_dir())
    assert reps == ["replicate_000", "replicate_001", "replicate_002"]
    counts = [(tmp_path / "o" / r / "counts.csv").read_text() for r in reps]
    assert len(set(counts)) == 3


# ---------------------------------------------------------------------------
# errors and exit codes


def test_missing_field_reports_path(tmp_path, capsys):
    cfg = json.loads((SCENARIOS / "multinomial_2x2.json").read_text())
    del cfg["pi0"][2]["value"]
    code = cli.main(["simulate", "multinomial", "--config", write_json(tmp_path / "c.json", cfg),
                     "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "pi0.2" in err or "pi0/2" in err or "pi0[2]" in err, err
    assert "value" in err


def test_bad_value_reports_path(tmp_path, capsys):
    cfg = dict(SMALL_SIT, xi={"M:a": 1.5})
    code = cli.main(["simulate", "gillespie", "--config", write_json(tmp_path / "c.json", cfg),
                     "--out", str(tmp_path / "o")])
    assert code == 2
    assert "xi" in capsys.readouterr().err


def test_input_errors_exit_2(tmp_path, capsys):
    assert cli.main(["simulate", "multinomial", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["simulate", "multinomial", "--config", str(tmp_path / "bad.json"),
                     "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["estimate-sampling", "--stages", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 2
    # fit without any counts source
    (tmp_path / "strata.csv").write_text("id,gender,age,location\na,U,,\nb,U,,\n")
    assert cli.main(["fit", "--model", "gamma", "--strata", str(tmp_path / "strata.csv"),
                     "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "does not exist" in err and "--counts" in err


def test_runtime_failure_exit_3(tmp_path, capsys):
    cfg = dict(SMALL_SIT, max_events=5)
    code = cli.main(["simulate", "gillespie", "--config", write_json(tmp_path / "c.json", cfg),
                     "--out", str(tmp_path / "o")])
    assert code == 3
    assert "runtime failure" in capsys.readouterr().err


def test_convergence_warning_still_exit_0(tmp_path, capsys):
    base = pipeline(tmp_path, "run")
    cfg = dict(QUICK_FIT, rhat_threshold=1e-6)
    out = tmp_path / "f2"
    code = cli.main(["fit", "--config", write_json(tmp_path / "fit2.json", cfg),
                     "--counts", str(base / "s" / "counts.csv"), "--strata", str(base / "s" / "strata.csv"),
                     "--out", str(out)])
    assert code == 0
    warns = json.loads((out / "warnings.json").read_text())
    assert [w["kind"] for w in warns] == ["convergence"]
    assert len(warns[0]["parameters"]) == 8
    assert "WARNINGS" in capsys.readouterr().err
    assert (out / "draws.csv").is_file()


# ---------------------------------------------------------------------------
# threads


def test_threads_flag_and_environment(tmp_path, monkeypatch):
    args = cli.build_parser().parse_args(["summarize", "--draws", "d", "--strata", "s", "--out", "o"])
    monkeypatch.delenv(cli.THREADS_ENV, raising=False)
    assert cli._threads(args) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli._threads(args) == 3
    args.threads = 2
    assert cli._threads(args) == 2
    args.threads = None
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    with pytest.raises(cli.ConfigError):
        cli._threads(args)


def test_fit_output_independent_of_threads(tmp_path):
    base = pipeline(tmp_path, "run")
    outs = []
    for t in (1, 2):
        out = tmp_path / f"t{t}"
        assert cli.main(["fit", "--config", str(tmp_path / "fit.json"), "--counts", str(base / "s" / "counts.csv"),
                         "--strata", str(base / "s" / "strata.csv"), "--threads", str(t), "--out", str(out)]) == 0
        outs.append((out / "draws.csv").read_bytes())
    assert outs[0] == outs[1]


# ---------------------------------------------------------------------------
# summarize


def test_identity_mapping_matches_raw(tmp_path):
    base = pipeline(tmp_path, "run")
    ids = [r["id"] for r in read_csv(base / "s" / "strata.csv")]
    mp = tmp_path / "map.csv"
    mp.write_text("fine,coarse\n" + "".join(f"{i},{i}\n" for i in ids))
    out = tmp_path / "mapped"
    assert cli.main(["summarize", "--draws", str(base / "f" / "draws.csv"), "--strata", str(base / "s" / "strata.csv"),
                     "--mapping", str(mp), "--functional", "flows", "--out", str(out)]) == 0
    assert (out / "summary_flows.csv").read_text() == (base / "m" / "summary_flows.csv").read_text()


def test_coarse_mapping_sums_flows(tmp_path):
    base = pipeline(tmp_path, "run")
    mp = tmp_path / "map.csv"
    mp.write_text("fine,coarse\nM:a,M\nM:b,M\nF:a,F\nF:b,F\n")
    out = tmp_path / "mapped"
    assert cli.main(["summarize", "--draws", str(base / "f" / "draws.csv"), "--strata", str(base / "s" / "strata.csv"),
                     "--mapping", str(mp), "--functional", "flows", "--out", str(out)]) == 0
    rows = read_csv(out / "summary_flows.csv")
    assert {(r["source"], r["recipient"]) for r in rows} == {("M", "F"), ("F", "M")}
    assert sum(float(r["mean"]) for r in rows) == pytest.approx(1.0, abs=1e-6)


def test_age_gap_breakdown_partitions(tmp_path):
    sim = tmp_path / "sim"
    assert cli.main(["simulate", "gp", "--config", str(SCENARIOS / "gp_flows.json"), "--out", str(sim)]) == 0
    fit_cfg = write_json(tmp_path / "fit.json", dict(QUICK_FIT, xi={"type": "fixed", "source": 1.0}))
    fit = tmp_path / "fit"
    assert cli.main(["fit", "--config", fit_cfg, "--counts", str(sim / "counts.csv"), "--strata", str(sim / "strata.csv"),
                     "--out", str(fit)]) == 0
    out = tmp_path / "sum"
    assert cli.main(["summarize", "--draws", str(fit / "draws.csv"), "--strata", str(sim / "strata.csv"),
                     "--functional", "age_gap", "--out", str(out)]) == 0
    rows = read_csv(out / "summary_age_gap.csv")
    by_recipient = {}
    for r in rows:
        by_recipient.setdefault(r[list(r)[0]], []).append(float(r["mean"]))
    assert len(by_recipient) == 20
    for means in by_recipient.values():
        assert len(means) == 3
        # table entries carry eight significant digits
        assert sum(means) == pytest.approx(1.0, abs=1e-7)


def test_unknown_draw_block_is_input_error(tmp_path):
    base = pipeline(tmp_path, "run")
    (tmp_path / "d.csv").write_text("chain,iteration,parameter,value\n0,0,x[0],1.0\n")
    assert cli.main(["summarize", "--draws", str(tmp_path / "d.csv"), "--strata", str(base / "s" / "strata.csv"),
                     "--out", str(tmp_path / "o")]) == 2
