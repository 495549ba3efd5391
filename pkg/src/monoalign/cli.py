"""Command-line entry point: data generation, training, decoding and checks.

Every subcommand accepts ``--seed``, ``--config`` and ``--out-dir`` and prints
a JSON summary on stdout. Exit codes: 0 success, 1 failed check, 2 usage
error, 3 malformed config, 4 missing input file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

EXIT_CHECK_FAILED = 1
EXIT_BAD_CONFIG = 3
EXIT_MISSING_FILE = 4

BOUNDARY_FIELDS = ["utt_id", "token_index", "token_id", "frame"]
LATENCY_FIELDS = ["utt_id", "token_index", "token_id", "ref_frame", "pred_frame", "delta_ms"]


class ConfigError(Exception):
    pass


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(_require(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return raw


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_boundary_csv(path, rows) -> None:
    """``rows`` are ``(utt_id, tokens, boundaries)`` triples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BOUNDARY_FIELDS)
        for utt_id, tokens, bounds in rows:
            for i, (tok, frame) in enumerate(zip(tokens, bounds)):
                writer.writerow([utt_id, i, tok, frame])


def read_boundary_csv(path) -> dict[str, list[tuple[int, int]]]:
    """Map utterance id to its ``(token_id, frame)`` pairs in token order."""
    out: dict[str, list[tuple[int, int, int]]] = {}
    with open(_require(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(BOUNDARY_FIELDS) - set(reader.fieldnames):
            raise ConfigError(f"{path}: expected columns {BOUNDARY_FIELDS}")
        for row in reader:
            out.setdefault(row["utt_id"], []).append(
                (int(row["token_index"]), int(row["token_id"]), int(row["frame"])))
    return {k: [(tok, frame) for _, tok, frame in sorted(v)] for k, v in out.items()}


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    from .data import generate_dataset, write_jsonl
    cfg = _load_config(args.config)
    params = {"n_utts": args.n_utts, "u_range": (args.u_min, args.u_max),
              "dur_range": (args.dur_min, args.dur_max), "vocab_size": args.vocab_size,
              "noise_std": args.noise_std}
    for key, value in cfg.items():
        if key not in params and key not in ("embedding_seed", "dim", "downsample", "prefix"):
            raise ConfigError(f"unknown dataset option {key!r}")
        params[key] = tuple(value) if key in ("u_range", "dur_range") else value
    try:
        utts = generate_dataset(seed=args.seed, **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args)
    data_path = out / f"{args.name}.jsonl"
    write_jsonl(utts, data_path)
    ref_path = out / f"{args.name}_boundaries.csv"
    write_boundary_csv(ref_path, [(u.utt_id, u.labels, u.boundaries) for u in utts])
    return {"dataset": str(data_path), "reference_boundaries": str(ref_path),
            "n_utts": len(utts), "n_tokens": sum(len(u.labels) for u in utts)}


def cmd_train(args) -> dict:
    from .data import read_jsonl
    from .model import ModelConfig
    from .train import TrainConfig, preset, save_checkpoint, train_curriculum
    raw = _load_config(args.config)
    try:
        if args.preset:
            if "model" in raw:
                raw["model"] = ModelConfig(**raw["model"])
            config = preset(args.preset, epochs=tuple(args.epochs), **raw)
        else:
            config = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.seed is not None:
        config.seed = args.seed
    train = read_jsonl(_require(args.train))
    dev = read_jsonl(_require(args.dev)) if args.dev else None
    result = train_curriculum(train, config, dev)
    out = _out_dir(args)
    ckpt = out / "model.npz"
    save_checkpoint(result.model, ckpt, extra={"train_config": config.to_dict()})
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry) + "\n")
    (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2), encoding="utf-8")
    return {"checkpoint": str(ckpt), "log": str(log_path), "final": result.log[-1] if result.log else {}}


def cmd_decode(args) -> dict:
    from .data import read_jsonl
    from .metrics import corpus_token_error
    from .train import decode, load_checkpoint, teacher_forced_boundaries
    model, _ = load_checkpoint(_require(args.checkpoint))
    utts = read_jsonl(_require(args.data))
    out = _out_dir(args)
    if args.forced:
        bounds = teacher_forced_boundaries(model, utts)
        rows = [(u.utt_id, u.labels, b) for u, b in zip(utts, bounds)]
        summary = {}
    else:
        hyps = decode(model, utts, beam=args.beam)
        rows = [(u.utt_id, toks, b) for u, (toks, b) in zip(utts, hyps)]
        hyp_path = out / "hypotheses.json"
        hyp_path.write_text(json.dumps([{"id": u.utt_id, "tokens": t, "boundaries": b, "reference": u.labels}
                                        for u, (t, b) in zip(utts, hyps)]), encoding="utf-8")
        summary = {"hypotheses": str(hyp_path),
                   "token_error": corpus_token_error([t for t, _ in hyps], [u.labels for u in utts])}
    csv_path = out / ("forced_boundaries.csv" if args.forced else "boundaries.csv")
    write_boundary_csv(csv_path, rows)
    summary.update({"boundaries": str(csv_path), "n_utts": len(utts)})
    return summary


def cmd_align(args) -> dict:
    from .ctc import ctc_viterbi_batch, extract_boundaries
    from .data import read_jsonl
    from .train import load_checkpoint, make_batch, teacher_forced_boundaries
    model, _ = load_checkpoint(_require(args.checkpoint))
    utts = read_jsonl(_require(args.data))
    if args.utt:
        utts = [u for u in utts if u.utt_id in set(args.utt)]
        if not utts:
            raise ConfigError(f"none of {args.utt} found in {args.data}")
    else:
        utts = utts[:args.limit]
    model.eval()
    dtype = next(model.parameters()).dtype
    dumps = []
    with torch.no_grad():
        for u in utts:
            batch = make_batch([u], model.config.eos, dtype)
            h, enc_lens, ctc_lp = model.encode(batch.x, batch.lens)
            _, alpha, beta, p = model.forward_expected(h, enc_lens, batch.targets)
            lp = ctc_lp[0].double().numpy()
            (path, _), = ctc_viterbi_batch([lp], [u.labels])
            dumps.append({
                "id": u.utt_id, "labels": u.labels, "oracle_boundaries": u.boundaries,
                "alpha": alpha[0].tolist(), "beta": beta[0].tolist(), "p_choose": p[0].tolist(),
                "ctc_posteriors": np.exp(lp).tolist(), "ctc_path": [int(k) for k in path],
                "ctc_boundaries": extract_boundaries(path, u.labels),
                "mocha_boundaries": teacher_forced_boundaries(model, [u])[0],
            })
    path = _out_dir(args) / "alignments.json"
    path.write_text(json.dumps(dumps), encoding="utf-8")
    return {"alignments": str(path), "n_utts": len(dumps)}


def cmd_latency(args) -> dict:
    from .metrics import latency_percentiles, token_emission_latency
    cfg = _load_config(args.config)
    frame_ms = float(cfg.get("frame_ms", args.frame_ms))
    pred = read_boundary_csv(args.pred)
    ref = read_boundary_csv(args.ref)
    missing = sorted(set(ref) - set(pred))
    if missing:
        raise ConfigError(f"predicted boundaries missing for {len(missing)} utterances, e.g. {missing[0]}")
    records = []
    for utt_id, ref_rows in ref.items():
        pred_rows = pred[utt_id]
        try:
            records.extend(token_emission_latency([f for _, f in pred_rows], [f for _, f in ref_rows],
                                                  frame_ms, utt_id, [t for t, _ in ref_rows]))
        except ValueError as exc:
            raise ConfigError(f"{utt_id}: {exc}") from exc
    if not records:
        raise ConfigError("no reference tokens")
    path = _out_dir(args) / "latency.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LATENCY_FIELDS)
        for r in records:
            writer.writerow([r.utt_id, r.token_index, r.token_id, r.ref_frame, r.pred_frame, r.delta_ms])
    p50, p90 = latency_percentiles(records)
    return {"latency": str(path), "n_tokens": len(records), "PT@50": p50, "PT@90": p90,
            "frame_ms": frame_ms}


def _report(name: str, results, args) -> dict:
    rows = [r.to_json() if hasattr(r, "to_json") else
            {"name": r.name, "max_error": float(r.max_error), "tol": r.tol, "passed": bool(r.passed)}
            for r in results]
    path = _out_dir(args) / f"{name}.json"
    path.write_text(json.dumps(rows, indent=2), encoding="utf-8")
    return {"report": str(path), "passed": all(r["passed"] for r in rows), "checks": rows}


def cmd_gradcheck(args) -> dict:
    from .gradcheck import run_suite
    return _report("gradcheck", run_suite(n_points=args.n_points, seed=args.seed or 0), args)


def cmd_selftest(args) -> dict:
    from .selftest import run_selftest
    return _report("selftest", run_selftest(seed=args.seed or 0), args)


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out-dir", default=".", help="directory for outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="monoalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--name", default="data")
    p.add_argument("--n-utts", type=int, default=100)
    p.add_argument("--u-min", type=int, default=3)
    p.add_argument("--u-max", type=int, default=12)
    p.add_argument("--dur-min", type=int, default=2)
    p.add_argument("--dur-max", type=int, default=12)
    p.add_argument("--vocab-size", type=int, default=10)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model through the curriculum")
    p.add_argument("--train", required=True, help="training set (JSON lines)")
    p.add_argument("--dev", help="dev set evaluated after each epoch")
    p.add_argument("--preset", choices=["baseline", "ctc_st", "decot", "minlt", "ctc_st_scratch"],
                   help="named recipe; --config then supplies overrides")
    p.add_argument("--epochs", type=int, nargs=2, default=[10, 10], metavar=("STAGE1", "STAGE2"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", parents=[common], help="decode a dataset with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--forced", action="store_true", help="teacher-forced boundaries of the references")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("align", parents=[common], help="dump alignments and CTC spikes as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--utt", nargs="*", help="utterance ids (default: the first --limit)")
    p.add_argument("--limit", type=int, default=5)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("latency", parents=[common], help="token emission latency from boundary CSVs")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--frame-ms", type=float, default=20.0)
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--n-points", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", parents=[common], help="oracle-equivalence checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        summary = args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    summary = {"command": args.command, **summary}
    print(json.dumps(summary, default=float))
    return EXIT_CHECK_FAILED if summary.get("passed") is False else 0


if __name__ == "__main__":
    sys.exit(main())
