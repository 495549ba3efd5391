import csv
import json

import pytest

from monoalign.cli import main

TINY = {"model": {"enc_units": 8, "dec_units": 8, "emb_dim": 4, "att_dim": 4},
        "stages": [{"epochs": 1, "weights": {"ctc": 0.3, "qua": 1.0}},
                   {"epochs": 1, "weights": {"ctc": 0.3, "sync": 1.0}}],
        "batch_size": 8}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture()
def workdir(tmp_path, capsys):
    code, summary = run(capsys, "gen-data", "--n-utts", 12, "--u-max", 5, "--seed", 1,
                        "--out-dir", tmp_path, "--name", "train")
    assert code == 0 and summary["n_utts"] == 12
    (tmp_path / "config.json").write_text(json.dumps(TINY))
    return tmp_path


def test_gen_data_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "gen-data", "--n-utts", 5, "--seed", 3, "--out-dir", tmp_path, "--name", name)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_train_decode_align_latency(workdir, capsys):
    data = workdir / "train.jsonl"
    code, summary = run(capsys, "train", "--config", workdir / "config.json", "--train", data,
                        "--dev", data, "--seed", 0, "--out-dir", workdir / "run")
    assert code == 0
    lines = (workdir / "run" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[-1]) == summary["final"]
    assert "dev_token_error" in summary["final"]

    ckpt = workdir / "run" / "model.npz"
    code, summary = run(capsys, "decode", "--checkpoint", ckpt, "--data", data,
                        "--out-dir", workdir / "dec")
    assert code == 0 and 0 <= summary["token_error"]
    with open(workdir / "dec" / "boundaries.csv") as fh:
        assert next(csv.reader(fh)) == ["utt_id", "token_index", "token_id", "frame"]

    code, summary = run(capsys, "decode", "--checkpoint", ckpt, "--data", data, "--forced",
                        "--out-dir", workdir / "dec")
    assert code == 0
    code, summary = run(capsys, "latency", "--pred", workdir / "dec" / "forced_boundaries.csv",
                        "--ref", workdir / "train_boundaries.csv", "--out-dir", workdir / "lat")
    assert code == 0 and summary["n_tokens"] > 0
    with open(workdir / "lat" / "latency.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["utt_id", "token_index", "token_id", "ref_frame", "pred_frame", "delta_ms"]

    code, summary = run(capsys, "align", "--checkpoint", ckpt, "--data", data, "--limit", 2,
                        "--out-dir", workdir / "align")
    dump = json.loads((workdir / "align" / "alignments.json").read_text())
    assert code == 0 and len(dump) == 2
    assert len(dump[0]["alpha"]) == len(dump[0]["labels"]) + 1
    assert dump[0]["ctc_boundaries"][-1] == len(dump[0]["ctc_posteriors"])


def test_train_twice_gives_identical_logs(workdir, capsys):
    finals = []
    for k in range(2):
        code, summary = run(capsys, "train", "--config", workdir / "config.json",
                            "--train", workdir / "train.jsonl", "--out-dir", workdir / f"r{k}")
        assert code == 0
        finals.append((workdir / f"r{k}" / "train_log.jsonl").read_text())
    assert finals[0] == finals[1]


def test_latency_of_identical_boundaries_is_zero(workdir, capsys):
    ref = workdir / "train_boundaries.csv"
    code, summary = run(capsys, "latency", "--pred", ref, "--ref", ref, "--out-dir", workdir)
    assert code == 0 and summary["PT@50"] == 0 and summary["PT@90"] == 0


def test_selftest_passes(tmp_path, capsys):
    code, summary = run(capsys, "selftest", "--out-dir", tmp_path)
    assert code == 0 and summary["passed"]
    assert len(summary["checks"]) >= 10


def test_gradcheck_passes(tmp_path, capsys):
    code, summary = run(capsys, "gradcheck", "--n-points", 2, "--out-dir", tmp_path)
    assert code == 0 and summary["passed"]
    names = {c["name"] for c in summary["checks"]}
    assert {"ctc_loss", "pipeline_ctc_st"} <= names
    assert all(c["max_error"] <= c["tol"] for c in summary["checks"])


def test_exit_codes(workdir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["decode", "--no-such-flag"])
    assert exc.value.code == 2
    capsys.readouterr()
    bad = workdir / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--train", str(workdir / "train.jsonl")]) == 3
    bad.write_text(json.dumps({"batch_size": -1}))
    assert main(["train", "--config", str(bad), "--train", str(workdir / "train.jsonl")]) == 3
    assert main(["train", "--train", str(workdir / "missing.jsonl")]) == 4
    assert main(["decode", "--checkpoint", str(workdir / "nope.npz"), "--data", "x"]) == 4
