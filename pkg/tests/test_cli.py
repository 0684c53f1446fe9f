"""End-to-end checks of the command line driver.

Every test drives ``mpes.cli.main`` in-process with a small two-group model
whose evidence is strong enough that short chains converge.
"""

import json

import pytest

from mpes.cli import main

CONFIG = """\
regions:
  - {id: A, pop_male: 10000, pop_female: 12000}
groups:
  - {id: hr, genders: [m, f], rank: 1}
  - {id: gp, genders: [m, f], rank: 2}
reference_group: gp
hierarchy: {enabled: false}
constraints:
  global_prevalence_floor: false
"""

EVIDENCE = """\
id,region,gender,kind,x,n,target_type,target_params,bias,direct,deviance_eligible
hr_size_m,A,m,binomial,100,1000,rho,group=hr,exact,true,true
hr_size_f,A,f,binomial,80,1000,rho,group=hr,exact,true,true
hr_prev_m,A,m,binomial,24,150,pi,group=hr,exact,true,true
hr_prev_f,A,f,binomial,30,200,pi,group=hr,exact,true,true
gp_prev_m,A,m,binomial,3,500,pi,group=gp,exact,true,true
gp_prev_f,A,f,binomial,2,400,pi,group=gp,exact,true,true
hr_diag_m,A,m,binomial,40,60,delta,group=hr,exact,true,true
hr_diag_f,A,f,binomial,30,50,delta,group=hr,exact,true,true
gp_diag_m,A,m,binomial,10,20,delta,group=gp,exact,true,true
gp_diag_f,A,f,binomial,8,16,delta,group=gp,exact,true,true
"""


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_inputs")
    cfg = d / "config.yaml"
    cfg.write_text(CONFIG)
    ev = d / "evidence.csv"
    ev.write_text(EVIDENCE)
    return cfg, ev


def _run_args(inputs, out, *extra):
    cfg, ev = inputs
    return ["run", "--config", str(cfg), "--evidence", str(ev),
            "--chains", "2", "--burn", "2000", "--keep", "1200",
            "--thin", "2", "--seed", "7", "--out", str(out), *extra]


@pytest.fixture(scope="module")
def completed_run(inputs, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    rc = main(_run_args(inputs, out, "--save-draws"))
    return rc, out


def test_validate_ok(inputs, capsys):
    cfg, ev = inputs
    assert main(["validate", "--config", str(cfg), "--evidence", str(ev)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "OK: 4 strata, 10 free coordinates"
    assert out[1] == "OK: 10 evidence items (10 direct, 0 indirect)"
    assert out[2].startswith("OK: 2 constraints")


def test_validate_requires_config(inputs, capsys):
    _, ev = inputs
    assert main(["validate", "--evidence", str(ev)]) == 2
    assert "--config is required" in capsys.readouterr().err


def test_validate_requires_evidence(inputs, capsys):
    cfg, _ = inputs
    assert main(["validate", "--config", str(cfg)]) == 2
    assert "--evidence" in capsys.readouterr().err


def test_validate_rejects_malformed_evidence(inputs, tmp_path, capsys):
    cfg, _ = inputs
    bad = tmp_path / "bad.csv"
    bad.write_text("region,count\nA,5\n")
    assert main(["validate", "--config", str(cfg), "--evidence", str(bad)]) == 2
    assert "unrecognized header" in capsys.readouterr().err


def test_run_produces_reports(completed_run):
    rc, out = completed_run
    assert rc == 0
    for name in ("summary.csv", "convergence.csv", "deviance.csv",
                 "draws.csv", "manifest.json"):
        assert (out / name).exists(), name

    conv = (out / "convergence.csv").read_text().splitlines()
    assert conv[0] == "coordinate,psrf"
    assert len(conv) == 1 + 10  # one row per free coordinate
    for line in conv[1:]:
        # coordinate names themselves contain commas, split from the right
        assert float(line.rsplit(",", 1)[1]) < 1.05

    dev = (out / "deviance.csv").read_text().splitlines()
    assert dev[0] == ("item_id,region,gender,target,mean_deviance,"
                      "flagged,excluded_reason")
    assert len(dev) == 1 + 10

    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0] == "quantity,region,group,gender,median,lo95,hi95"
    # 4 strata x 3 quantities, then 3 gender slices x 4 totals
    assert len(summary) == 1 + 12 + 12


def test_run_manifest_contents(completed_run, inputs):
    _, out = completed_run
    man = json.loads((out / "manifest.json").read_text())
    assert man["tool"] == "mpes"
    assert man["status"] == "ok"
    assert man["sampler"] == {"chains": 2, "burn": 2000, "keep": 1200,
                              "thin": 2, "seed": 7, "psrf_threshold": 1.05}
    assert man["config"]["path"] == str(inputs[0].resolve())
    assert len(man["config"]["sha256"]) == 64
    assert man["outputs"] == ["summary.csv", "convergence.csv",
                              "deviance.csv", "draws.csv"]
    assert man["max_psrf"] < 1.05
    assert man["n_scored"] == 10


def test_rerun_from_manifest_is_byte_identical(completed_run, tmp_path):
    _, first = completed_run
    second = tmp_path / "rerun"
    rc = main(["run", "--from-manifest", str(first / "manifest.json"),
               "--out", str(second)])
    assert rc == 0
    for name in ("summary.csv", "convergence.csv", "deviance.csv",
                 "draws.csv", "manifest.json"):
        assert (second / name).read_bytes() == (first / name).read_bytes(), name


def test_run_reports_nonconvergence(inputs, tmp_path, capsys):
    cfg, ev = inputs
    out = tmp_path / "short"
    rc = main(["run", "--config", str(cfg), "--evidence", str(ev),
               "--chains", "2", "--burn", "0", "--keep", "40",
               "--thin", "1", "--seed", "1", "--out", str(out)])
    assert rc == 3
    captured = capsys.readouterr()
    assert "have not converged" in captured.err
    # reports are written even when convergence fails
    for name in ("summary.csv", "convergence.csv", "deviance.csv",
                 "manifest.json"):
        assert (out / name).exists(), name
    assert json.loads((out / "manifest.json").read_text())["status"] == \
        "not-converged"


def test_seed_env_variable(inputs, tmp_path, monkeypatch, capsys):
    cfg, ev = inputs
    base = ["--config", str(cfg), "--evidence", str(ev),
            "--chains", "2", "--burn", "200", "--keep", "100", "--thin", "1"]
    a, b = tmp_path / "a", tmp_path / "b"

    monkeypatch.setenv("MPES_SEED", "123")
    assert main(["run", *base, "--out", str(a)]) in (0, 3)
    monkeypatch.delenv("MPES_SEED")
    assert main(["run", *base, "--seed", "123", "--out", str(b)]) in (0, 3)
    capsys.readouterr()

    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    assert json.loads((a / "manifest.json").read_text())["sampler"]["seed"] == 123


def test_deviance_subcommand(inputs, tmp_path, capsys):
    cfg, ev = inputs
    out = tmp_path / "dev"
    rc = main(["deviance", "--config", str(cfg), "--evidence", str(ev),
               "--chains", "2", "--burn", "400", "--keep", "200",
               "--thin", "1", "--seed", "3", "--out", str(out)])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "scored 10 items (0 excluded)" in stdout
    assert "no items above the conflict threshold 4" in stdout
    assert (out / "deviance.csv").exists()
    # only the conflict table, nothing else
    assert sorted(p.name for p in out.iterdir()) == ["deviance.csv"]


def test_deviance_flags_conflict(inputs, tmp_path, capsys):
    cfg, ev = inputs
    clash = tmp_path / "clash.csv"
    clash.write_text(
        "id,region,gender,kind,x,n,target_type,target_params,bias,direct,"
        "deviance_eligible\n"
        "hr_prev_m_hi,A,m,binomial,120,150,pi,group=hr,exact,true,true\n")
    out = tmp_path / "dev"
    rc = main(["deviance", "--config", str(cfg), "--evidence", str(ev),
               "--evidence", str(clash),
               "--chains", "2", "--burn", "400", "--keep", "200",
               "--thin", "1", "--seed", "3", "--out", str(out)])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "CONFLICT hr_prev_m_hi" in stdout
    flagged_rows = [line for line in
                    (out / "deviance.csv").read_text().splitlines()
                    if line.split(",")[5] == "true"]
    assert any(line.startswith("hr_prev_m_hi,") for line in flagged_rows)


def test_single_region_pooling_warning(inputs, tmp_path, capsys):
    cfg_text = CONFIG.replace("hierarchy: {enabled: false}",
                              "hierarchy: {enabled: true}")
    cfg = tmp_path / "pooled.yaml"
    cfg.write_text(cfg_text)
    out = tmp_path / "pooled"
    rc = main(["run", "--config", str(cfg), "--evidence", str(inputs[1]),
               "--chains", "1", "--burn", "50", "--keep", "20",
               "--thin", "1", "--seed", "4", "--out", str(out)])
    assert rc == 0  # a single chain has no split diagnostic to fail
    assert "pooling layer with a single region" in capsys.readouterr().err


def test_bad_filter_choice_exits_via_argparse(inputs):
    cfg, ev = inputs
    with pytest.raises(SystemExit):
        main(["run", "--config", str(cfg), "--evidence", str(ev),
              "--evidence-filter", "sideways"])


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("mpes ")
