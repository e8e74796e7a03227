import json

import numpy as np
import pytest

from swea.cli import main
from swea.evalharness import harmonic_score
from swea.osfusion import attribute, find_subsequence, load_requests
from swea.store import EditingStore
from swea.toylm import load_model

FAST = ["--steps", "2", "--prefixes", "2", "--prefix-length", "2", "--n", "4"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["corpus", "--out", str(root / "c"), "--n-facts", "80", "--n-requests", "4"]) == 0
    assert main(["train", "--corpus", str(root / "c" / "corpus.jsonl"), "--out", str(root / "m"), "--epochs", "1"]) == 0
    return root


def test_missing_corpus_is_usage_error(tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "m")]) == 2
    assert "usage:" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 2


def test_train_manifest_and_determinism(work, tmp_path):
    manifest = json.loads((work / "m" / "manifest.json").read_text())
    assert manifest["config"]["model"]["n_layers"] == 2 and manifest["config"]["model"]["d_model"] == 64
    assert set(manifest["outputs"]) == {"model.toylm", "vocab.txt"}
    assert main(["train", "--corpus", str(work / "c" / "corpus.jsonl"), "--out", str(tmp_path), "--epochs", "1"]) == 0
    assert (tmp_path / "model.toylm").read_bytes() == (work / "m" / "model.toylm").read_bytes()


def test_edit_eval_and_report(work, capsys):
    store = work / "s" / "store.swea"
    args = ["edit", "--model", str(work / "m"), "--requests", str(work / "c" / "requests.jsonl"), "--store-out", str(store)]
    assert main(args + FAST) == 0
    assert "req-0000" in capsys.readouterr().out
    assert len(EditingStore.load(store)) == 4
    assert main(["eval", "--model", str(work / "m"), "--requests", str(work / "c" / "requests.jsonl"),
                 "--store", str(store), "--report-out", str(work / "r")]) == 0
    report = json.loads((work / "r" / "report.json").read_text())
    final = report["final"]
    assert final["score"] == pytest.approx(harmonic_score(final["efficacy"], final["generalization"], final["specificity"]))
    assert (work / "r" / "report.csv").read_text().startswith("stage,n_edited,efficacy")
    assert main(["replay", "--manifest", str(work / "r" / "manifest.json")]) == 0
    assert main(["replay", "--manifest", str(store) + ".manifest.json"]) == 0


def test_eval_without_store(work):
    assert main(["eval", "--model", str(work / "m"), "--requests", str(work / "c" / "requests.jsonl"),
                 "--report-out", str(work / "base")]) == 0


def test_eval_refuses_vocab_mismatch(work, tmp_path, capsys):
    s = EditingStore({"vocab_sha256": "0" * 64})
    s.save(tmp_path / "x.swea")
    code = main(["eval", "--model", str(work / "m"), "--requests", str(work / "c" / "requests.jsonl"),
                 "--store", str(tmp_path / "x.swea"), "--report-out", str(tmp_path / "r")])
    assert code == 1 and "refusing" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_sequential_batch_needs_schedule(work, tmp_path):
    base = ["eval", "--model", str(work / "m"), "--requests", str(work / "c" / "requests.jsonl"), "--report-out", str(tmp_path)]
    assert main(base + ["--mode", "sequential-batch"]) == 2
    assert main(base + ["--mode", "sequential-batch", "--schedule", "3x1"]) == 2
    assert main(base + ["--mode", "sequential-batch", "--schedule", "2x2"] + FAST) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert [s["n_edited"] for s in report["stages"]] == [2, 4]


def test_empty_requests_file(work, tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("")
    code = main(["edit", "--model", str(work / "m"), "--requests", str(tmp_path / "empty.jsonl"),
                 "--store-out", str(tmp_path / "e.swea")])
    assert code == 0 and "warning" in capsys.readouterr().err
    assert len(EditingStore.load(tmp_path / "e.swea")) == 0


def test_all_requests_failing(work, tmp_path):
    rec = {"id": "x", "subject": "Nobody", "prompt": "Nobody lives in", "original_object": "a", "new_object": "b"}
    (tmp_path / "bad.jsonl").write_text(json.dumps(rec) + "\n")
    code = main(["edit", "--model", str(work / "m"), "--requests", str(tmp_path / "bad.jsonl"),
                 "--store-out", str(tmp_path / "b.swea")])
    assert code == 1 and not (tmp_path / "b.swea").exists()


def test_config_precedence(work, tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"gamma": 0.1, "opt_steps": 2, "prefix_count": 1}))
    common = ["edit", "--model", str(work / "m"), "--requests", str(work / "c" / "requests.jsonl"),
              "--config", str(tmp_path / "cfg.json"), "--n", "3"]
    assert main(common + ["--store-out", str(tmp_path / "a.swea")]) == 0
    assert main(common + ["--store-out", str(tmp_path / "b.swea"), "--gamma", "0.2"]) == 0
    a = json.loads((tmp_path / "a.swea.manifest.json").read_text())["config"]
    b = json.loads((tmp_path / "b.swea.manifest.json").read_text())["config"]
    assert (a["gamma"], b["gamma"]) == (0.1, 0.2)
    assert a["opt_steps"] == 2 and a["riemann_n"] == 3 and a["t_threshold"] == 0.35


def test_attribute_matches_library(work, tmp_path, capsys):
    req = load_requests(work / "c" / "requests.jsonl")[0]
    code = main(["attribute", "--model", str(work / "m"), "--prompt", req.prompt, "--subject", req.subject,
                 "--object", req.original_object, "--t", "1.0", "--top-k", "3", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "KEDs at t=1.0: 1" in out
    payload = json.loads((tmp_path / "attribution.json").read_text())
    model = load_model(work / "m")
    tok = model.tokenizer
    ids = [tok.bos_id, *tok.encode(req.prompt)]
    s = find_subsequence(ids, tok.encode(req.subject))
    rep = attribute(model, (s, s + len(req.subject.split())), ids, tok.encode(req.original_object), 20, 1.0)
    assert np.array(payload["scores"]).tobytes() == rep.scores.tobytes()
    assert main(["replay", "--manifest", str(tmp_path / "manifest.json")]) == 0


def test_attribute_subject_missing(work):
    code = main(["attribute", "--model", str(work / "m"), "--prompt", "the country of",
                 "--subject", "France", "--object", "France"])
    assert code == 2


def test_sweep_csv(work, tmp_path):
    code = main(["sweep", "--model", str(work / "m"), "--requests", str(work / "c" / "requests.jsonl"),
                 "--axis", "t", "--values", "0,0.35,1", "--out", str(tmp_path)] + FAST)
    assert code == 0
    lines = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    assert lines[0].startswith("t,efficacy") and len(lines) == 4
    assert main(["sweep", "--model", str(work / "m"), "--requests", str(work / "c" / "requests.jsonl"),
                 "--axis", "t", "--values", "x", "--out", str(tmp_path)]) == 2


def test_replay_detects_changed_input(work, tmp_path):
    import shutil

    shutil.copytree(work / "c", tmp_path / "c")
    assert main(["corpus", "--out", str(tmp_path / "c2"), "--n-facts", "80", "--n-requests", "4"]) == 0
    assert main(["replay", "--manifest", str(tmp_path / "c2" / "manifest.json")]) == 0
    man = tmp_path / "m"
    assert main(["train", "--corpus", str(tmp_path / "c" / "corpus.jsonl"), "--out", str(man), "--epochs", "1"]) == 0
    with open(tmp_path / "c" / "corpus.jsonl", "a") as fh:
        fh.write("\n")
    assert main(["replay", "--manifest", str(man / "manifest.json")]) == 1
