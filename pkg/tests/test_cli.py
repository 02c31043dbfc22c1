import json
import os

import pytest

from app import EXIT_INPUT, EXIT_INTERNAL, EXIT_OK, main
from common.artifacts import DIR_MANIFEST, SIDECAR_SUFFIX, sha256_file
from common.file_parser import read_json


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == EXIT_OK else None)


@pytest.fixture
def corpus(tmp_path, capsys):
    path = tmp_path / "corpus.jsonl"
    code, result = run(capsys, "synth", "--out", path, "--count", 60, "--seed", 5)
    assert code == EXIT_OK and result["trajectories"] == 60
    return path


def test_ceiling_inversion(capsys):
    code, result = run(capsys, "ceiling", "--invert", "0.9", "0.363")
    assert code == EXIT_OK
    assert result["required_pi"] == pytest.approx(0.776, abs=1e-3)


def test_ceiling_input_errors_exit_2(capsys):
    assert run(capsys, "ceiling", "--invert", "0.05", "0.363")[0] == EXIT_INPUT
    assert run(capsys, "ceiling", "--pi", "0.5")[0] == EXIT_INPUT


def test_ceiling_grid_csv(tmp_path, capsys):
    path = tmp_path / "grid.csv"
    code, result = run(capsys, "ceiling", "--pi", "0", "0.5", "1", "--r", "0.1", "--csv", path)
    assert code == EXIT_OK and result["rows"] == 3
    lines = path.read_text().splitlines()
    assert lines[0] == "pi,r,ceiling,naive"
    assert len(lines) == 4
    assert os.path.exists(str(path) + SIDECAR_SUFFIX)


def test_synth_and_split_write_manifests(tmp_path, capsys, corpus):
    manifest = read_json(str(corpus) + SIDECAR_SUFFIX)
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 5
    assert manifest["outputs"]["corpus.jsonl"] == sha256_file(str(corpus))

    splits = tmp_path / "splits.json"
    code, result = run(capsys, "split", "--corpus", corpus, "--out", splits, "--seed", 1)
    assert code == EXIT_OK
    assert result["train"] + result["calibration"] + result["validation"] + result["test"] == 60
    split_manifest = read_json(str(splits) + SIDECAR_SUFFIX)
    assert split_manifest["inputs"]["corpus.jsonl"] == sha256_file(str(corpus))


def test_tampered_input_exits_1(tmp_path, capsys, corpus):
    with open(corpus, "a", encoding="utf-8") as f:
        f.write("\n")
    code, _ = run(capsys, "split", "--corpus", corpus, "--out", tmp_path / "splits.json")
    assert code == EXIT_INTERNAL


def test_missing_and_malformed_inputs_exit_2(tmp_path, capsys):
    assert run(capsys, "split", "--corpus", tmp_path / "nope.jsonl", "--out", tmp_path / "s.json")[0] == EXIT_INPUT
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"trajectory_id": "a"}\nnot json\n')
    assert run(capsys, "convert", "--corpus", bad, "--out", tmp_path / "sv.jsonl")[0] == EXIT_INPUT


def test_convert_and_sample_pack(tmp_path, capsys, corpus):
    code, result = run(capsys, "convert", "--corpus", corpus, "--out", tmp_path / "stepview.jsonl")
    assert code == EXIT_OK
    assert result["trajectories"] == 60
    assert result["coverage"]["fallback_rate"] == 0.0

    code, result = run(capsys, "sample-pack", "--corpus", corpus, "--out", tmp_path / "pack.json")
    assert code == EXIT_OK
    assert result["entries"] == 12
    assert result["bucket_counts"] == {"initial": 4, "mid": 4, "tool": 2, "anomalous": 2}


def test_mpe_from_score_file(tmp_path, capsys):
    scores = tmp_path / "scores.json"
    scores.write_text(json.dumps({"positive": [0.1, 0.9, 0.8, 0.2, 0.95], "negative": [0.1, 0.2, 0.15, 0.3]}))
    code, result = run(capsys, "mpe", "--scores", scores, "--replicates", "20", "--seed", "3")
    assert code == EXIT_OK
    assert result["source"] == "scores"
    assert 0.0 <= result["mpe"]["pi_hat"] <= 1.0
    assert result["mpe"]["replicates"] == 20

    scores.write_text(json.dumps({"positive": [0.1]}))
    assert run(capsys, "mpe", "--scores", scores)[0] == EXIT_INPUT


def _prepare(tmp_path, capsys):
    corpus, splits, stepview = tmp_path / "corpus.jsonl", tmp_path / "splits.json", tmp_path / "stepview.jsonl"
    assert run(capsys, "synth", "--out", corpus, "--count", 200, "--seed", 0)[0] == EXIT_OK
    assert run(capsys, "split", "--corpus", corpus, "--out", splits)[0] == EXIT_OK
    assert run(capsys, "convert", "--corpus", corpus, "--out", stepview)[0] == EXIT_OK
    model = tmp_path / "model"
    code, trained = run(capsys, "train", "--stepview", stepview, "--splits", splits, "--out", model,
                        "--epochs", 2, "--seed", 0)
    assert code == EXIT_OK
    assert trained["best_epoch"] in (1, 2)
    assert os.path.exists(model / DIR_MANIFEST)
    return stepview, splits, model


@pytest.mark.slow
def test_full_pipeline(tmp_path, capsys):
    stepview, splits, model = _prepare(tmp_path, capsys)
    data = ["--stepview", stepview, "--splits", splits]

    code, evaluated = run(capsys, "eval", "--model", model, *data, "--out", tmp_path / "eval.json")
    assert code == EXIT_OK
    report = evaluated["models"][0]
    assert 0.0 <= report["auprc"] <= 1.0
    assert set(report["thresholds"]) == {"f1", "far_cap=0.05", "far_cap=0.1", "far_cap=0.2"}
    assert run(capsys, "eval", "--model", model, *data, "--split", "train")[0] == EXIT_INPUT

    dfa = tmp_path / "dfa.json"
    code, extracted = run(capsys, "extract-dfa", "--model", model, *data, "--out", dfa)
    assert code == EXIT_OK
    assert extracted["audit"]["states"] >= 1
    assert 0.0 <= extracted["audit"]["trusted_share"] <= 1.0

    code, audited = run(capsys, "audit", "--dfa", dfa, "--model", model, *data)
    assert code == EXIT_OK
    assert audited["trusted_share"] == pytest.approx(extracted["audit"]["trusted_share"])

    again = tmp_path / "dfa_again.json"
    assert run(capsys, "extract-dfa", "--model", model, *data, "--out", again)[0] == EXIT_OK
    assert dfa.read_bytes() == again.read_bytes()

    code, silent = run(capsys, "extract-dfa", "--model", model, *data, "--out", tmp_path / "dfa_silent.json",
                       "--min-count", 1_000_000, "--route-key", "task_id")
    assert code == EXIT_OK
    assert silent["audit"]["trusted_share"] == 0.0
    assert silent["metrics"]["abstention"] == 1.0 and silent["metrics"]["auprc"] is None
    assert silent["routed"]["metrics"]["abstention"] == 1.0
    assert silent["routed"]["gain_over_global_auprc"] is None

    (model / "head.b.f8").write_bytes(b"\0" * 8)
    assert run(capsys, "audit", "--dfa", dfa, "--model", model, *data)[0] == EXIT_INTERNAL


def test_probe_guards_fitting_splits(tmp_path, capsys, corpus):
    splits, stepview = tmp_path / "splits.json", tmp_path / "stepview.jsonl"
    assert run(capsys, "split", "--corpus", corpus, "--out", splits)[0] == EXIT_OK
    assert run(capsys, "convert", "--corpus", corpus, "--out", stepview)[0] == EXIT_OK
    data = ["--stepview", stepview, "--splits", splits]

    code, result = run(capsys, "probe", "--kind", "t_only", *data)
    assert code == EXIT_OK
    assert result["rows"][0]["kind"] == "t_only"
    assert run(capsys, "probe", "--kind", "t_only", *data, "--split", "validation")[0] == EXIT_INPUT
    assert run(capsys, "mpe", *data, "--split", "train")[0] == EXIT_INPUT
