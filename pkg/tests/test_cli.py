"""CLI behavior: happy paths, exit codes, help coverage, determinism."""

import json
import subprocess
import sys

import numpy as np
import pytest

from oodbench import write_embedding_set, write_manifest
from oodbench.cli import build_parser, run
from synth import planted_sources


@pytest.fixture
def bench_files(tmp_path):
    rng = np.random.default_rng(20240921)
    id_source, ood_source = planted_sources(rng, n_id=30, n_ood=30)
    paths = {
        "id_glmc": tmp_path / "id.glmc",
        "id_csv": tmp_path / "id.csv",
        "ood_glmc": tmp_path / "ood.glmc",
        "ood_csv": tmp_path / "ood.csv",
    }
    write_embedding_set(id_source.embeddings, paths["id_glmc"])
    write_manifest(id_source.manifest, paths["id_csv"])
    write_embedding_set(ood_source.embeddings, paths["ood_glmc"])
    write_manifest(ood_source.manifest, paths["ood_csv"])
    paths["id_pair"] = f"{paths['id_glmc']}:{paths['id_csv']}"
    paths["ood_pair"] = f"synthetic={paths['ood_glmc']}:{paths['ood_csv']}"
    return paths


def eval_args(paths, *extra):
    return [
        "eval", "--id", paths["id_pair"], "--ood", paths["ood_pair"],
        "--score", "glmcm", "--tau", "1.0", "--lambda", "0.5", *extra,
    ]


def test_eval_happy_path(bench_files, capsys):
    assert run(eval_args(bench_files, "--format", "csv")) == 0
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    assert lines[0] == "config_name,function,tau,lambda,ood_set,fpr95,auroc,n_id,n_ood"
    assert any("synthetic" in line for line in lines[1:])


def test_eval_json_format(bench_files, capsys):
    assert run(eval_args(bench_files, "--format", "json")) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["rows"][0]["ood_set"] == "synthetic"


def test_eval_out_file(bench_files, tmp_path, capsys):
    out_path = tmp_path / "report.csv"
    assert run(eval_args(bench_files, "--out", str(out_path))) == 0
    assert capsys.readouterr().out == ""
    assert out_path.read_text().startswith("config_name,")


def test_eval_unknown_score_is_usage_error(bench_files, capsys):
    code = run(["eval", "--id", bench_files["id_pair"], "--ood", bench_files["ood_pair"],
                "--score", "bogus"])
    assert code == 2
    assert "invalid choice" in capsys.readouterr().err


def test_eval_missing_ood_is_failure(bench_files, capsys):
    assert run(["eval", "--id", bench_files["id_pair"]]) == 1
    assert "error" in capsys.readouterr().err


def test_eval_missing_manifest_is_failure(bench_files, capsys):
    code = run(["eval", "--id", str(bench_files["id_glmc"]), "--ood", bench_files["ood_pair"]])
    assert code == 1
    assert "manifest" in capsys.readouterr().err


def test_eval_missing_file_reports_io_error(bench_files, tmp_path, capsys):
    missing = tmp_path / "nope.glmc"
    code = run(["eval", "--id", f"{missing}:{bench_files['id_csv']}", "--ood", bench_files["ood_pair"]])
    assert code == 1


def test_sweep_lambda_axis(bench_files, capsys):
    code = run([
        "sweep", "--param", "lambda", "--values", "0,0.25,0.5,0.75,1.0",
        "--id", bench_files["id_pair"], "--ood", bench_files["ood_pair"],
        "--score", "glmcm",
    ])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "parameter,value,mean_fpr95,mean_auroc"
    values = [line.split(",")[1] for line in lines[1:]]
    assert values == ["0", "0.25", "0.5", "0.75", "1"]


def test_sweep_duplicate_values_rejected(bench_files, capsys):
    code = run([
        "sweep", "--param", "tau", "--values", "1.0,1.0",
        "--id", bench_files["id_pair"], "--ood", bench_files["ood_pair"],
    ])
    assert code == 1


def test_validate_ok(bench_files, capsys):
    assert run(["validate", bench_files["id_pair"], str(bench_files["ood_glmc"])]) == 0
    out = capsys.readouterr().out
    assert "ok" in out and "join" in out


def test_validate_corrupt_file(bench_files, tmp_path, capsys):
    corrupt = tmp_path / "corrupt.glmc"
    corrupt.write_bytes(b"XXXX" + bytes(16))
    assert run(["validate", str(corrupt)]) == 1
    assert "error" in capsys.readouterr().err


def test_histogram_command(bench_files, capsys):
    code = run([
        "histogram", "--id", str(bench_files["id_glmc"]), "--score", "mcm",
        "--bins", "4", "--range", "0,1",
    ])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count"
    assert len(lines) == 5
    assert sum(int(line.split(",")[2]) for line in lines[1:]) == 30


def test_histogram_bad_range(bench_files, capsys):
    code = run(["histogram", "--id", str(bench_files["id_glmc"]), "--range", "1,0", "--score", "mcm"])
    assert code == 1


def test_extract_command(bench_files, capsys):
    code = run([
        "extract", "--id", bench_files["id_pair"], "--score", "glmcm",
        "--threshold", "0.0", "--format", "json",
    ])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["n_extracted"] == 30
    assert sum(c["count"] for c in payload["category_counts"]) == 30


def test_extract_requires_manifest(bench_files, capsys):
    code = run(["extract", "--id", str(bench_files["id_glmc"]), "--threshold", "0.5"])
    assert code == 1


def test_scoremap_selected_image(bench_files, capsys):
    code = run([
        "scoremap", "--id", str(bench_files["id_glmc"]), "--score", "lmcm",
        "--format", "json", "id0000",
    ])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload[0]["image_id"] == "id0000"
    assert len(payload) == 1
    assert len(payload[0]["cells"]) == 9


def test_scoremap_unknown_image(bench_files, capsys):
    assert run(["scoremap", "--id", str(bench_files["id_glmc"]), "ghost"]) == 1


def test_help_lists_every_flag():
    parser = build_parser()
    expected = {
        "eval": ["--id", "--ood", "--score", "--tau", "--lambda", "--format", "--out", "--jobs"],
        "sweep": ["--id", "--ood", "--score", "--tau", "--lambda", "--format", "--out", "--jobs",
                  "--param", "--values"],
        "histogram": ["--id", "--score", "--tau", "--lambda", "--format", "--out", "--jobs",
                      "--bins", "--range"],
        "extract": ["--id", "--score", "--tau", "--lambda", "--format", "--out", "--jobs",
                    "--threshold"],
        "scoremap": ["--id", "--score", "--tau", "--lambda", "--format", "--out", "--jobs"],
    }
    subparsers = next(
        a for a in parser._actions if isinstance(a, type(parser._subparsers._group_actions[0]))
    )
    for command, flags in expected.items():
        help_text = subparsers.choices[command].format_help()
        for flag in flags:
            assert flag in help_text, f"{command} help is missing {flag}"


def test_no_arguments_is_usage_error(capsys):
    assert run([]) == 2


def test_log_env_var_surfaces_join_diagnostics(bench_files, tmp_path, monkeypatch, capsys):
    # manifest entry without features: reported at info level on stderr
    extra = tmp_path / "id_extra.csv"
    extra.write_text(bench_files["id_csv"].read_text() + "phantom,ID,synthetic_id,\n")
    args = ["eval", "--id", f"{bench_files['id_glmc']}:{extra}", "--ood", bench_files["ood_pair"]]
    monkeypatch.setenv("OODBENCH_LOG", "info")
    assert run(args) == 0
    assert "1 manifest entries without features" in capsys.readouterr().err
    monkeypatch.setenv("OODBENCH_LOG", "warning")
    assert run(args) == 0
    assert "manifest entries without features" not in capsys.readouterr().err


def test_repeated_runs_byte_identical(bench_files, tmp_path):
    args = eval_args(bench_files, "--jobs", "2", "--format", "csv")
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    code1 = run(args + ["--out", str(first)])
    code2 = run(args + ["--out", str(second)])
    assert code1 == code2 == 0
    assert first.read_bytes() == second.read_bytes()


def test_console_entry_point_subprocess(bench_files, tmp_path):
    args = [sys.executable, "-m", "oodbench", *eval_args(bench_files, "--jobs", "2")]
    first = subprocess.run(args, capture_output=True)
    second = subprocess.run(args, capture_output=True)
    assert first.returncode == 0
    assert first.stdout == second.stdout
    assert first.stdout.startswith(b"config_name,")
