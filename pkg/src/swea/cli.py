"""Command-line entry point: ``swea {corpus,train,edit,eval,attribute,sweep,replay}``.

Every command that writes files also writes a ``manifest.json`` recording the
canonical argument list, input hashes, output hashes and the tool version.
``swea replay --manifest PATH`` re-runs the command into a scratch directory and
compares output hashes.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_text, sha256_file

log = logging.getLogger("swea")

MANIFEST_NAME = "manifest.json"
# argument destinations holding file system paths; canonicalized to absolute paths
PATH_DESTS = {"corpus", "out", "model", "requests", "store_out", "config", "store", "report_out"}
# dest of the output location per command, redirected by replay
OUTPUT_DEST = {
    "corpus": "out",
    "train": "out",
    "edit": "store_out",
    "eval": "report_out",
    "sweep": "out",
    "attribute": "out",
}
FUSION_FLAGS = {
    "alpha": "alpha",
    "beta": "beta",
    "gamma": "gamma",
    "t": "t_threshold",
    "n": "riemann_n",
    "steps": "opt_steps",
    "lr": "learning_rate",
    "weight_decay": "weight_decay",
    "clamp": "clamp_factor",
    "prefixes": "prefix_count",
    "prefix_length": "prefix_length",
    "seed": "seed",
}


class UsageError(Exception):
    """Bad invocation detected after argument parsing (exit code 2)."""


# -- helpers -----------------------------------------------------------------------


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _json_safe(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) or math.isinf(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def _dumps(obj) -> str:
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def _read_json_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = _require_file(path, "config file")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _canonical_argv(args: argparse.Namespace) -> list[str]:
    argv = [args.command]
    for dest, value in sorted(vars(args).items()):
        if dest in ("command", "func", "verbose") or value is None or value is False:
            continue
        flag = "--" + dest.replace("_", "-")
        if value is True:
            argv.append(flag)
            continue
        if dest in PATH_DESTS:
            value = str(Path(value).resolve())
        argv += [flag, str(value)]
    return argv


def _write_manifest(
    args: argparse.Namespace,
    manifest_path: Path,
    inputs: list[Path],
    outputs: list[Path],
    config: dict,
    seeds: dict,
) -> None:
    root = manifest_path.parent
    manifest = {
        "tool": "swea",
        "version": __version__,
        "command": args.command,
        "argv": _canonical_argv(args),
        "config": config,
        "seeds": seeds,
        "inputs": {str(p.resolve()): sha256_file(p) for p in inputs},
        "outputs": {str(p.resolve().relative_to(root.resolve())): sha256_file(p) for p in outputs},
    }
    atomic_write_text(manifest_path, _dumps(manifest))


def _fusion_config(args: argparse.Namespace, base: dict | None = None):
    """Flag > config file > built-in default."""
    from .osfusion import FusionConfig

    values = dict(base or {})
    values.update(_read_json_config(getattr(args, "config", None)))
    for flag, name in FUSION_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    try:
        return FusionConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid fusion config: {exc}") from exc


def _load_model(path: str):
    from .toylm import load_model

    d = _require_file(path, "model directory")
    return load_model(d)


def _load_requests(path: str):
    from .osfusion import load_requests

    p = _require_file(path, "requests file")
    try:
        return load_requests(p)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# -- commands ------------------------------------------------------------------------


def cmd_corpus(args) -> int:
    from .evalharness import generate_corpus, make_requests
    from .osfusion import save_requests

    out = Path(args.out)
    corpus = generate_corpus(args.n_facts, args.seed)
    requests = make_requests(corpus, args.n_requests, args.seed)
    corpus.save(out / "corpus.jsonl")
    save_requests(requests, out / "requests.jsonl")
    outputs = [out / "corpus.jsonl", out / "requests.jsonl"]
    _write_manifest(
        args, out / MANIFEST_NAME, [], outputs,
        {"n_facts": args.n_facts, "n_requests": args.n_requests}, {"seed": args.seed},
    )
    print(f"wrote {len(corpus.facts)} facts and {len(requests)} requests to {out}")
    return 0


def _read_sentences(path: Path) -> list[str]:
    """Sentences from a fact-corpus JSONL file or a plain text file (one per line)."""
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    sentences = []
    for ln in lines:
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError:
            rec = None
        if isinstance(rec, dict) and "sentences" in rec:
            sentences += rec["sentences"]
        else:
            sentences.append(ln.strip())
    return sentences


def cmd_train(args) -> int:
    from .toylm import TrainConfig, pretrain, save_model
    from .toylm.checkpoint import CHECKPOINT_NAME, VOCAB_NAME

    corpus_path = _require_file(args.corpus, "corpus")
    values = TrainConfig().to_dict()
    file_cfg = _read_json_config(args.config)
    unknown = set(file_cfg) - set(values)
    if unknown:
        raise UsageError(f"unknown training config keys: {sorted(unknown)}")
    values.update(file_cfg)
    for flag in ("epochs", "lr", "seed"):
        if getattr(args, flag) is not None:
            values[flag] = getattr(args, flag)
    try:
        cfg = TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    sentences = _read_sentences(corpus_path)
    if not sentences:
        raise UsageError(f"corpus {corpus_path} contains no sentences")

    def report(epoch, loss):
        if (epoch + 1) % 10 == 0 or epoch == 0:
            print(f"epoch {epoch + 1:4d}/{cfg.epochs}  loss {loss:.4f}", flush=True)

    model = pretrain(sentences, config=cfg, on_epoch=report)
    out = Path(args.out)
    save_model(model, out)
    inputs = [corpus_path] + ([Path(args.config)] if args.config else [])
    config = {"train": cfg.to_dict(), "model": model.config.to_dict()}
    _write_manifest(args, out / MANIFEST_NAME, inputs, [out / CHECKPOINT_NAME, out / VOCAB_NAME], config, {"seed": cfg.seed})
    print(f"saved model ({model.config.n_layers} layers, d_model {model.config.d_model}, vocab {model.config.vocab_size}) to {out}")
    return 0


def _edit_manifest_path(store_out: Path) -> Path:
    return store_out.with_name(store_out.name + ".manifest.json")


def cmd_edit(args) -> int:
    from .osfusion import fuse_many, store_from_results
    from .store import EditingStore

    model = _load_model(args.model)
    requests = _load_requests(args.requests)
    cfg = _fusion_config(args)
    store_out = Path(args.store_out)
    inputs = [Path(args.model) / "model.toylm", Path(args.model) / "vocab.txt", Path(args.requests)]
    if args.config:
        inputs.append(Path(args.config))

    if not requests:
        print(f"warning: {args.requests} holds no requests; writing an empty store", file=sys.stderr)
        store = EditingStore.for_model(model)
    else:
        results, failures = fuse_many(model, requests, cfg, args.workers)
        for req, res in zip(requests, results):
            if res is None:
                print(f"{req.request_id}  FAILED  {failures[req.request_id]}")
                continue
            opt = res.optimization
            print(
                f"{req.request_id}  {req.subject!r}  nll {opt.initial_nll:.4f} -> {opt.best_nll:.4f}"
                f"  best step {opt.best_step}  keds {len(res.report.keds)}"
            )
        if len(failures) == len(requests):
            print(f"error: all {len(requests)} requests failed", file=sys.stderr)
            return 1
        if failures:
            print(f"{len(failures)} of {len(requests)} requests failed", file=sys.stderr)
        store = store_from_results(model, requests, results, cfg, failures)
    store.save(store_out)
    _write_manifest(args, _edit_manifest_path(store_out), inputs, [store_out], cfg.to_dict(), {"seed": cfg.seed})
    print(f"wrote {len(store)} editing embeddings to {store_out}")
    return 0


def _store_config(store) -> dict | None:
    for emb in store.entries.values():
        cfg = emb.provenance.get("config")
        if cfg:
            return cfg
    return None


def cmd_eval(args) -> int:
    from .evalharness import (
        StageResult,
        evaluate,
        parse_schedule,
        rows_to_csv,
        rows_to_text,
        run_sequential,
        run_sequential_batch,
        stages_report,
    )
    from .store import EditingStore, StoreError

    model = _load_model(args.model)
    requests = _load_requests(args.requests)
    inputs = [Path(args.model) / "model.toylm", Path(args.model) / "vocab.txt", Path(args.requests)]
    store = None
    if args.store:
        try:
            store = EditingStore.load(_require_file(args.store, "store"))
        except StoreError as exc:
            print(f"error: cannot load store {args.store}: {exc}", file=sys.stderr)
            return 1
        inputs.append(Path(args.store))
        want = store.meta.get("vocab_sha256")
        if want != model.tokenizer.sha256:
            print(
                f"error: store vocabulary hash {want} does not match model vocabulary {model.tokenizer.sha256}; refusing to evaluate",
                file=sys.stderr,
            )
            return 1
    if args.config:
        inputs.append(Path(args.config))

    if args.mode == "batch":
        if args.schedule:
            raise UsageError("--schedule only applies to --mode sequential-batch")
        metrics = evaluate(model, store, requests)
        stages = [StageResult(0, len(requests), metrics, dict(store.failures) if store else {})]
        config = _store_config(store) if store else None
    else:
        cfg = _fusion_config(args, _store_config(store) if store else None)
        config = cfg.to_dict()
        if args.mode == "sequential":
            if args.schedule:
                raise UsageError("--schedule only applies to --mode sequential-batch")
            stages = run_sequential(model, requests, cfg, args.workers)
        else:
            if not args.schedule:
                raise UsageError("--mode sequential-batch needs --schedule STAGESxBATCH")
            try:
                schedule = parse_schedule(args.schedule, len(requests))
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
            stages = run_sequential_batch(model, requests, schedule, cfg, args.workers)

    rows = [s.row() for s in stages]
    report = stages_report(args.mode, stages)
    report["config"] = config
    report["n_requests"] = len(requests)
    out = Path(args.report_out)
    atomic_write_text(out / "report.json", _dumps(report))
    atomic_write_text(out / "report.csv", rows_to_csv(rows))
    _write_manifest(
        args, out / MANIFEST_NAME, inputs, [out / "report.json", out / "report.csv"], config or {},
        {"seed": (config or {}).get("seed")},
    )
    sys.stdout.write(rows_to_text(rows))
    for line in stages[-1].metrics.flagged if stages else []:
        print(f"flagged: {line}")
    return 0


def cmd_attribute(args) -> int:
    from .osfusion import SubjectNotFoundError, attribute, find_subsequence
    from .toylm import UnknownTokenError

    model = _load_model(args.model)
    tok = model.tokenizer
    try:
        prompt_ids = [tok.bos_id, *tok.encode(args.prompt)]
        subject_ids = tok.encode(args.subject)
        object_ids = tok.encode(args.object)
    except UnknownTokenError as exc:
        raise UsageError(str(exc)) from exc
    start = find_subsequence(prompt_ids, subject_ids)
    if start < 0:
        raise UsageError(str(SubjectNotFoundError(f"subject {args.subject!r} does not occur in prompt {args.prompt!r}")))
    span = (start, start + len(subject_ids))
    report = attribute(model, span, prompt_ids, object_ids, args.n, args.t)
    subject_tokens = args.subject.split()
    print(f"max score {report.max_score:.6g}; KEDs at t={args.t}: {len(report.keds)}")
    print(f"{'row':>4}  {'token':<16} {'dim':>4}  {'score':>12}")
    for r, d, s in report.top(args.top_k):
        print(f"{r:>4}  {subject_tokens[r]:<16} {d:>4}  {s:>12.6g}")
    print("KEDs:", " ".join(f"({r},{d})" for r, d in report.keds))
    if args.out:
        out = Path(args.out)
        payload = {
            "prompt": args.prompt,
            "subject": args.subject,
            "object": args.object,
            "n": args.n,
            "t": args.t,
            "max_score": report.max_score,
            "scores": report.scores.tolist(),
            "keds": [list(k) for k in report.keds],
        }
        atomic_write_text(out / "attribution.json", _dumps(payload))
        inputs = [Path(args.model) / "model.toylm", Path(args.model) / "vocab.txt"]
        _write_manifest(args, out / MANIFEST_NAME, inputs, [out / "attribution.json"], {"n": args.n, "t": args.t}, {})
    return 0


def cmd_sweep(args) -> int:
    from .evalharness import sweep

    model = _load_model(args.model)
    requests = _load_requests(args.requests)
    cfg = _fusion_config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated numbers: {exc}") from exc
    if not values:
        raise UsageError("--values is empty")
    try:
        table = sweep(model, requests, args.axis, values, cfg, args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    atomic_write_text(out / "sweep.csv", table.to_csv())
    atomic_write_text(out / "sweep.txt", table.to_text())
    atomic_write_text(out / "sweep.json", _dumps(json.loads(table.to_json())))
    inputs = [Path(args.model) / "model.toylm", Path(args.model) / "vocab.txt", Path(args.requests)]
    if args.config:
        inputs.append(Path(args.config))
    outputs = [out / "sweep.csv", out / "sweep.txt", out / "sweep.json"]
    _write_manifest(args, out / MANIFEST_NAME, inputs, outputs, {**cfg.to_dict(), "axis": args.axis, "values": values}, {"seed": cfg.seed})
    sys.stdout.write(table.to_text())
    return 0


def cmd_replay(args) -> int:
    path = _require_file(args.manifest, "manifest")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        argv = list(manifest["argv"])
        command = manifest["command"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"malformed manifest {path}: {exc}") from exc
    if command not in OUTPUT_DEST:
        raise UsageError(f"manifest command {command!r} cannot be replayed")

    for p, digest in manifest.get("inputs", {}).items():
        if not Path(p).exists():
            print(f"error: input {p} is missing", file=sys.stderr)
            return 1
        if sha256_file(p) != digest:
            print(f"error: input {p} changed since the manifest was written", file=sys.stderr)
            return 1

    flag = "--" + OUTPUT_DEST[command].replace("_", "-")
    with tempfile.TemporaryDirectory() as scratch:
        root = Path(args.out or scratch)
        if flag in argv:
            i = argv.index(flag) + 1
            original = Path(argv[i])
            # single-file outputs keep their name inside the scratch directory
            argv[i] = str(root / original.name) if command == "edit" else str(root)
        code = main(argv)
        if code != 0:
            print(f"error: replayed command exited with {code}", file=sys.stderr)
            return 1
        ok = True
        for rel, digest in sorted(manifest.get("outputs", {}).items()):
            got = sha256_file(root / rel) if (root / rel).exists() else None
            same = got == digest
            ok &= same
            print(f"{'identical' if same else 'DIFFERENT'}  {rel}")
    return 0 if ok else 1


# -- parser --------------------------------------------------------------------------


def _add_fusion_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("fusion hyperparameters (flag > --config file > defaults)")
    g.add_argument("--config", help="JSON file with fusion config fields")
    g.add_argument("--alpha", type=float, help="KL weight (default 0.2)")
    g.add_argument("--beta", type=float, help="NLL weight (default 1.0)")
    g.add_argument("--gamma", type=float, help="KED suppression strength (default 0.5)")
    g.add_argument("--t", type=float, help="KED threshold as a fraction of the max score (default 0.35)")
    g.add_argument("--n", type=int, help="Riemann steps for attribution (default 20)")
    g.add_argument("--steps", type=int, help="optimization steps (default 25)")
    g.add_argument("--lr", type=float, help="Adam learning rate (default 0.02)")
    g.add_argument("--weight-decay", type=float, help="L2 weight decay (default 0.3)")
    g.add_argument("--clamp", type=float, help="per-row delta norm cap relative to the embedding norm (default 1.0)")
    g.add_argument("--prefixes", type=int, help="number of sampled context prefixes (default 10)")
    g.add_argument("--prefix-length", type=int, help="tokens per sampled prefix (default 5)")
    g.add_argument("--seed", type=int, help="seed for prefix sampling (default 0)")
    p.add_argument("--workers", type=int, help="parallel fusion workers (default: SWEA_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swea", description="Subject-word embedding editing on a toy transformer.")
    parser.add_argument("--version", action="version", version=f"swea {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging and tracebacks")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("corpus", help="generate a synthetic fact corpus and edit requests")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-facts", type=int, default=200)
    p.add_argument("--n-requests", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("train", help="pretrain the toy language model")
    p.add_argument("--corpus", required=True, help="fact corpus JSONL or plain text, one sentence per line")
    p.add_argument("--out", required=True, help="output model directory")
    p.add_argument("--config", help="JSON file with training config fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="fuse editing embeddings for a requests file")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--requests", required=True, help="edit requests JSONL")
    p.add_argument("--store-out", required=True, help="output SWEA1 store file")
    _add_fusion_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="efficacy / generalization / specificity report")
    p.add_argument("--model", required=True)
    p.add_argument("--requests", required=True)
    p.add_argument("--store", help="SWEA1 store; omitted means the unedited model")
    p.add_argument("--report-out", required=True, help="output directory for report.json and report.csv")
    p.add_argument("--mode", choices=("batch", "sequential", "sequential-batch"), default="batch")
    p.add_argument("--schedule", help='sequential-batch schedule, e.g. "10x2"')
    _add_fusion_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attribute", help="per-dimension attribution of a fact to subject embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--object", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--t", type=float, default=0.35)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", help="optional output directory for attribution.json")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("sweep", help="metrics across gamma or t values")
    p.add_argument("--model", required=True)
    p.add_argument("--requests", required=True)
    p.add_argument("--axis", choices=("gamma", "t"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True, help="output directory")
    _add_fusion_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-run a command from its manifest and compare outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="directory for replayed outputs (default: temporary)")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"swea {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        if args.verbose:
            raise
        print(f"swea {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
