import json
import os

import pytest

from conftest import corpus_path

from sgxspec import cli, scan


def run_cli(*argv):
    return cli.main(list(argv))


def run_cli_capture(capsys, *argv):
    code = cli.main(list(argv))
    return code, capsys.readouterr().out


# ---------------------------------------------------------------------------
# exit codes

def test_scan_clean_corpus_exits_zero(capsys):
    code, out = run_cli_capture(
        capsys, "scan", corpus_path("sanitized.dis"), "--expect-clean")
    assert code == cli.EXIT_OK
    assert "category | end" in out


def test_scan_findings_with_expect_clean_exits_one():
    assert run_cli("scan", corpus_path("intel_sdk_min.dis"),
                   "--expect-clean") == cli.EXIT_FINDINGS


def test_missing_file_exits_two():
    assert run_cli("scan", "/nonexistent.dis") == cli.EXIT_USAGE


def test_bad_arguments_exit_two():
    assert run_cli("scan") == cli.EXIT_USAGE
    assert run_cli("no-such-command") == cli.EXIT_USAGE


def test_parse_error_exits_two(tmp_path):
    bad = tmp_path / "bad.dis"
    bad.write_text("not a listing\n")
    assert run_cli("scan", str(bad)) == cli.EXIT_USAGE


def test_simulate_retry_exhaustion_exits_three(tmp_path):
    # a translation race the transient load always loses
    code = run_cli("simulate", corpus_path("victim.prog"),
                   corpus_path("victim.scn"),
                   "--set", "latency.memory-walk=50",
                   "--set", "latency.cached-walk=60",
                   "-o", str(tmp_path / "out.txt"))
    assert code == cli.EXIT_LIMIT


# ---------------------------------------------------------------------------
# scan output

def test_scan_structured_matches_text(capsys):
    path = corpus_path("intel_sdk_min.dis")
    code, text_out = run_cli_capture(capsys, "scan", path)
    assert code == 0
    code, json_out = run_cli_capture(capsys, "scan", path,
                                     "--format", "structured")
    assert code == 0
    doc = scan.parse_report(json_out)
    table_locations = {line.split(" | ")[1]
                       for line in text_out.splitlines()[1:] if line}
    assert {g["location"] for g in doc["type1"]} == table_locations


def test_scan2_reports_all_gadgets(capsys):
    code, out = run_cli_capture(
        capsys, "scan2", corpus_path("dlmalloc_excerpts.dis"),
        "--format", "structured")
    assert code == 0
    doc = scan.parse_report(out)
    assert len(doc["type2"]) == 6
    assert all(g["length"] == 4 for g in doc["type2"])


def test_scan2_expect_clean(capsys):
    code, _ = run_cli_capture(
        capsys, "scan2", corpus_path("sanitized.dis"), "--expect-clean")
    assert code == cli.EXIT_OK


# ---------------------------------------------------------------------------
# report files and figures

def test_output_file_renders_figure_alongside(tmp_path):
    report = tmp_path / "report.txt"
    code = run_cli("scan", corpus_path("intel_sdk_min.dis"),
                   "-o", str(report))
    assert code == 0
    assert report.exists() and report.read_text().startswith("category")
    figure = tmp_path / "report.png"
    assert figure.exists() and figure.stat().st_size > 0


def test_simulate_writes_trace_and_figure(tmp_path):
    out = tmp_path / "attack.txt"
    trace = tmp_path / "attack.trace"
    code = run_cli("simulate", corpus_path("fig1.prog"),
                   corpus_path("fig1.scn"),
                   "--trace", str(trace), "-o", str(out))
    assert code == 0
    assert "success-rate | 1.0000" in out.read_text()
    assert (tmp_path / "attack.png").stat().st_size > 0
    lines = trace.read_text().splitlines()
    assert any("EENTER" in l for l in lines)
    assert any("RESOLVE" in l for l in lines)


# ---------------------------------------------------------------------------
# simulation commands

def test_simulate_structured_output(capsys):
    code, out = run_cli_capture(
        capsys, "simulate", corpus_path("fig1.prog"), corpus_path("fig1.scn"),
        "--format", "structured")
    assert code == 0
    doc = json.loads(out)
    assert doc["recovered"] == doc["expected"] == [0xA7, 0xC3]
    assert doc["success-rate"] == 1.0


def test_simulate_secret_override(capsys):
    code, out = run_cli_capture(
        capsys, "simulate", corpus_path("fig1.prog"), corpus_path("fig1.scn"),
        "--secret", "0x106500:5a99", "--format", "structured")
    assert code == 0
    assert json.loads(out)["recovered"] == [0x5A, 0x99]


def test_demo_ssa_is_deterministic(capsys):
    _, first = run_cli_capture(capsys, "demo-ssa", "--seed", "7",
                               "--format", "structured")
    code, second = run_cli_capture(capsys, "demo-ssa", "--seed", "7",
                                   "--format", "structured")
    assert code == 0
    assert first == second
    doc = json.loads(first)
    assert doc["success-rate"] == 1.0
    assert doc["reg.rip"] == "0x0000000000004017"


def test_demo_key_recovers_the_seeded_key(capsys):
    code, out = run_cli_capture(capsys, "demo-key", "--seed", "3",
                                "--format", "structured")
    assert code == 0
    doc = json.loads(out)
    assert doc["match"] == "true"
    assert doc["recovered-key"] == doc["key"]


def test_eval_mitigations_table(capsys):
    code, out = run_cli_capture(
        capsys, "eval-mitigations", corpus_path("victim.prog"),
        corpus_path("victim.scn"), "--format", "structured")
    assert code == 0
    doc = json.loads(out)
    rates = {row["cell"]: row["success-rate"] for row in doc["matrix"]}
    assert rates["baseline"] == 1.0
    assert rates["ibrs"] == 0.0


def test_mitigation_flag_defeats_the_attack(capsys):
    code, out = run_cli_capture(
        capsys, "simulate", corpus_path("victim.prog"),
        corpus_path("victim.scn"), "--mitigations", "ibrs",
        "--format", "structured")
    assert code == cli.EXIT_LIMIT
    assert json.loads(out)["recovered"] == [None]


# ---------------------------------------------------------------------------
# configuration plumbing

def test_config_file_and_set_precedence(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "lab.cfg"
    cfg.write_text("latency.memory-walk = 50\nlatency.cached-walk = 60\n")
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    # config file alone puts the run in the losing regime
    code = run_cli("simulate", corpus_path("victim.prog"),
                   corpus_path("victim.scn"))
    assert code == cli.EXIT_LIMIT
    # an explicit --set overrides the file and restores the default walk
    code = run_cli("simulate", corpus_path("victim.prog"),
                   corpus_path("victim.scn"),
                   "--set", "latency.memory-walk=150",
                   "--set", "latency.cached-walk=30")
    assert code == cli.EXIT_OK
    capsys.readouterr()


def test_bad_set_value_exits_two():
    assert run_cli("scan", corpus_path("intel_sdk_min.dis"),
                   "--set", "nonsense") == cli.EXIT_USAGE
