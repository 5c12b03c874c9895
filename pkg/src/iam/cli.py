"""Command-line entry point: gen-data, train, eval, stream, inspect, grad-check.

Exit codes: 0 success, 2 usage error, 3 data/parse error, 4 numeric failure,
5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import BinaryIO, TextIO

from . import cell as iam
from . import datagen as dg
from . import evaluation as ev
from . import training as tr
from .checkpoint import decode_config, encode_config, load_checkpoint
from .numerics import ContractError, NonFiniteError, ParamStore

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5

log = logging.getLogger("iam")

MODEL_KEYS = {"d", "S", "heads", "dropout", "query", "gate"}
TRAIN_KEYS = {f.name for f in fields(tr.TrainConfig)}
DEFAULT_MODEL = {"d": 64, "S": 16, "heads": 4, "dropout": 0.0, "query": "prediction",
                 "gate": "vector"}


class UsageError(Exception):
    pass


def _echo(title: str, values: dict, err: TextIO) -> None:
    print(f"# {title}", file=err)
    for key, value in values.items():
        print(f"#   {key}={value}", file=err)


def _coerce(key: str, raw, template):
    if isinstance(template, bool):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return type(template)(raw)
    except ValueError as exc:
        raise UsageError(f"{key}: {exc}") from exc


def read_config_file(path: str | Path) -> dict[str, str]:
    values = decode_config(Path(path).read_bytes())
    unknown = sorted(set(values) - MODEL_KEYS - TRAIN_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return values


def resolve(flags: dict, file_values: dict) -> tuple[dict, tr.TrainConfig]:
    """Flag > config file > built-in default."""
    defaults = dict(DEFAULT_MODEL)
    defaults.update(tr.TrainConfig().to_dict())
    resolved = {}
    for key, default in defaults.items():
        if flags.get(key) is not None:
            resolved[key] = _coerce(key, flags[key], default)
        elif key in file_values:
            resolved[key] = _coerce(key, file_values[key], default)
        else:
            resolved[key] = default
    train_cfg = tr.TrainConfig(**{k: resolved[k] for k in TRAIN_KEYS})
    return {k: resolved[k] for k in MODEL_KEYS}, train_cfg


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, out: TextIO, err: TextIO) -> int:
    cfg = dg.GrammarConfig(K=args.contexts, L=args.segment_frames, G=args.gap_frames,
                           action_frames=args.action_frames, sigma=args.noise,
                           F=args.feature_dim, T=args.frames, fps=args.fps, seed=args.seed,
                           embedding_seed=args.embedding_seed)
    memoryless, history = dg.bayes_oracle(cfg)
    manifest = {
        "contexts": cfg.K, "actions": cfg.n_actions, "segment_frames": cfg.L,
        "gap_frames": cfg.G, "action_frames": cfg.n_action_frames, "noise": cfg.sigma,
        "feature_dim": cfg.F, "frames": cfg.T, "fps": cfg.fps, "seed": cfg.seed,
        "embedding_seed": cfg.embedding_seed,
        "table": ";".join(",".join(map(str, row)) for row in cfg.transition_table),
        "oracle_memoryless_top1": memoryless, "oracle_history_top1": history,
    }
    _echo("gen-data", manifest, err)
    features, annotations, contexts = dg.gen_stream(cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dg.write_feature_file(outdir / "features.iamf", features)
    dg.write_annotations(outdir / "annotations.csv", annotations)
    with open(outdir / "contexts.csv", "w", encoding="utf-8") as fh:
        fh.write("start_frame,symbol\n")
        fh.writelines(f"{c.start_frame},{c.symbol}\n" for c in contexts)
    manifest["segments"] = len(annotations)
    (outdir / "manifest.txt").write_bytes(encode_config(manifest))
    print(f"wrote {features.T} frames, {len(annotations)} action segments to {outdir}", file=out)
    return EXIT_OK


def cmd_train(args, out: TextIO, err: TextIO) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    features = dg.read_feature_file(args.features)
    annotations = dg.read_annotations(args.annotations)
    flags = {"d": args.d, "S": args.S, "heads": args.heads, "dropout": args.dropout,
             "query": args.query, "tau_a": args.tau_a, "fps_train": args.fps_train,
             "window_T": args.window_T, "epochs": args.epochs, "batch_size": args.batch_size,
             "lr_base": args.lr, "weight_decay": args.weight_decay,
             "smoothing": args.smoothing, "seed": args.seed, "max_steps": args.max_steps,
             "val_fraction": args.val_fraction, "gate": args.gate,
             "inverse_count_weights": True if args.inverse_count_weights else None,
             "jitter": True if args.jitter else None}
    if args.window_seconds is not None:
        fps_train = float(flags["fps_train"] or file_values.get("fps_train", 1.0))
        flags["window_T"] = int(round(args.window_seconds * fps_train))
    model, train_cfg = resolve(flags, file_values)
    n_classes = args.classes or (max(a.action for a in annotations) + 1 if annotations else 0)
    cell_cfg = iam.CellConfig(C=n_classes, F=features.F, **model)

    resolved = {**cell_cfg.to_dict(), **train_cfg.to_dict(),
                "features": args.features, "annotations": args.annotations}
    _echo("train", resolved, err)
    ckpt = Path(args.ckpt_out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    (ckpt.parent / (ckpt.name + ".config.txt")).write_bytes(encode_config(resolved))

    windows = dg.make_windows(features, annotations, train_cfg, jitter=False)
    if not windows:
        raise ContractError("no training windows with an unmasked label")
    n_val = int(len(windows) * train_cfg.val_fraction)
    val = windows[len(windows) - n_val:] if n_val else None
    cut = len(windows) - n_val

    if train_cfg.jitter:
        def source(epoch, rng):
            return dg.make_windows(features, annotations, train_cfg, rng, jitter=True)[:cut]
    else:
        source = windows[:cut]
    metrics = Path(args.metrics_out) if args.metrics_out else ckpt.parent / (ckpt.name + ".metrics.csv")
    result = tr.train(cell_cfg, train_cfg, source, val, ckpt, metrics)
    last = result.history[-1]
    print(f"trained {result.steps} steps; last {last['split']} loss={last['loss']:.4f} "
          f"top1={last['top1']:.4f}; checkpoint {ckpt}", file=out)
    return EXIT_OK


def _parse_named(items, what: str) -> dict[str, list[int]]:
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise UsageError(f"{what} must look like NAME=FILE, got {item!r}")
        out[name] = ev.read_subset(path)
    return out


def cmd_eval(args, out: TextIO, err: TextIO) -> int:
    cfg, params, meta = load_checkpoint(args.ckpt)
    features = dg.read_feature_file(args.features)
    annotations = dg.read_annotations(args.annotations)
    try:
        ks = [int(k) for k in args.topk.split(",") if k]
    except ValueError as exc:
        raise UsageError(f"--topk: {exc}") from exc
    subsets = _parse_named(args.subset, "--subset")
    maps = {}
    if args.verb_map:
        maps["verb"] = ev.read_mapping(args.verb_map)
    if args.noun_map:
        maps["noun"] = ev.read_mapping(args.noun_map)
    _echo("eval", {**cfg.to_dict(), **meta, "ckpt": args.ckpt, "topk": ks,
                   "tau_a": args.tau_a if args.tau_a is not None else meta.get("tau_a"),
                   "subsets": ",".join(subsets) or "-"}, err)
    report = ev.evaluate(cfg, params, features, annotations, args.tau_a, ks, subsets, maps,
                         meta, args.window_T)
    prefix = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".eval")
    ev.write_report(report, prefix.with_name(prefix.name + ".csv"),
                    prefix.with_name(prefix.name + ".txt"))
    print(report.summary(), file=out)
    return EXIT_OK


def run_stream(cfg: iam.CellConfig, params: ParamStore, instream: BinaryIO,
               outstream: TextIO, k: int = 5) -> dict:
    """Emit ``t,top1_id,top1_p,...`` for each frame as soon as it is read.

    Returns memory statistics: the peak bytes held by the indexed memory and the
    number of frames processed.
    """
    F, T, fps, frames = dg.iter_feature_frames(instream)
    if F != cfg.F:
        raise ContractError(f"feature dim mismatch: expected F={cfg.F}, got {F}")
    k = min(k, cfg.C)
    state = iam.IamState.initial(cfg)
    peak = 0
    n = 0
    for t, frame in enumerate(frames):
        y, _, state, _ = iam.step(state, frame, params, cfg)
        peak = max(peak, state.memory.nbytes)
        probs = y.data
        ids = ev.topk_ids(probs, k)
        cols = [str(t)]
        for i in ids:
            cols += [str(int(i)), f"{float(probs[i]):.6f}"]
        outstream.write(",".join(cols) + "\n")
        outstream.flush()
        n += 1
    return {"frames": n, "peak_memory_bytes": peak,
            "bound_bytes": iam.memory_footprint_bytes(cfg, 4)}


def cmd_stream(args, out: TextIO, err: TextIO, stdin: BinaryIO) -> int:
    cfg, params, meta = load_checkpoint(args.ckpt)
    _echo("stream", {**cfg.to_dict(), **meta, "ckpt": args.ckpt}, err)
    stats = run_stream(cfg, params, stdin, out)
    print(f"# frames={stats['frames']} peak_memory_bytes={stats['peak_memory_bytes']} "
          f"bound_bytes={stats['bound_bytes']}", file=err)
    return EXIT_OK


def cmd_inspect(args, out: TextIO, err: TextIO) -> int:
    cfg, params, meta = load_checkpoint(args.ckpt)
    features = dg.read_feature_file(args.features)
    _echo("inspect", {**cfg.to_dict(), "ckpt": args.ckpt, "features": args.features,
                      "trace_out": args.trace_out}, err)
    rows = ev.dump_traces(cfg, params, features, args.trace_out)
    print(f"wrote {rows} trace rows to {args.trace_out}", file=out)
    return EXIT_OK


def cmd_grad_check(args, out: TextIO, err: TextIO) -> int:
    settings = {"seed": args.seed, "d": args.d, "C": args.C, "S": args.S, "F": args.F,
                "T": args.T, "heads": args.heads, "h": args.h, "tolerance": args.tolerance,
                "samples": args.samples}
    _echo("grad-check", settings, err)
    report = tr.check_sequence_gradients(
        seed=args.seed, d=args.d, C=args.C, S=args.S, F=args.F, T=args.T, heads=args.heads,
        h=args.h, tolerance=args.tolerance, samples=args.samples or None)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} worst_rel_err={report.worst_rel_err:.3e} param={report.worst_param} "
          f"index={tuple(int(i) for i in report.worst_index)} analytic={report.analytic:.6e} "
          f"numeric={report.numeric:.6e} checked={report.checked}", file=out)
    return EXIT_OK if report.passed else EXIT_GRADCHECK


# -------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic grammar stream")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--contexts", type=int, default=4)
    g.add_argument("--segment-frames", type=int, default=3)
    g.add_argument("--gap-frames", type=int, default=6)
    g.add_argument("--action-frames", type=int, default=None)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--frames", type=int, default=2000)
    g.add_argument("--fps", type=float, default=1.0)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--embedding-seed", type=int, default=0)

    t = sub.add_parser("train", help="train a cell on features + annotations")
    t.add_argument("--features", required=True)
    t.add_argument("--annotations", required=True)
    t.add_argument("--config")
    t.add_argument("--ckpt-out", required=True)
    t.add_argument("--metrics-out")
    t.add_argument("--jitter", action="store_true")
    t.add_argument("--inverse-count-weights", action="store_true")
    t.add_argument("--smoothing", type=float)
    t.add_argument("--query", choices=iam.QUERY_MODES)
    t.add_argument("--gate", choices=iam.GATE_MODES)
    t.add_argument("--window-seconds", type=float)
    t.add_argument("--window-T", type=int)
    t.add_argument("--tau-a", type=float)
    t.add_argument("--fps-train", type=float)
    t.add_argument("--d", type=int)
    t.add_argument("--S", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--classes", type=int, help="class count (default: max action id + 1)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="score a checkpoint on an annotated stream")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--features", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--topk", default="1,5")
    e.add_argument("--subset", action="append", metavar="NAME=FILE")
    e.add_argument("--verb-map")
    e.add_argument("--noun-map")
    e.add_argument("--tau-a", type=float)
    e.add_argument("--window-T", type=int)
    e.add_argument("--out", help="report path prefix (writes PREFIX.csv and PREFIX.txt)")

    s = sub.add_parser("stream", help="IAMF on stdin -> per-frame top-5 CSV on stdout")
    s.add_argument("--ckpt", required=True)

    i = sub.add_parser("inspect", help="dump attention and gate traces")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--features", required=True)
    i.add_argument("--trace-out", required=True)

    c = sub.add_parser("grad-check", help="finite-difference check of the sequence loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--d", type=int, default=16)
    c.add_argument("--C", type=int, default=5)
    c.add_argument("--S", type=int, default=4)
    c.add_argument("--F", type=int, default=8)
    c.add_argument("--T", type=int, default=6)
    c.add_argument("--heads", type=int, default=2)
    c.add_argument("--h", type=float, default=1e-4)
    c.add_argument("--tolerance", type=float, default=1e-5)
    c.add_argument("--samples", type=int, default=40,
                   help="elements per tensor (0 = every element)")
    return p


def main(argv=None, stdin: BinaryIO | None = None, stdout: TextIO | None = None,
         stderr: TextIO | None = None) -> int:
    out = stdout or sys.stdout
    err = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"iam: error: {exc}", file=err)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=err)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args, out, err)
        if args.command == "train":
            return cmd_train(args, out, err)
        if args.command == "eval":
            return cmd_eval(args, out, err)
        if args.command == "stream":
            return cmd_stream(args, out, err, stdin or sys.stdin.buffer)
        if args.command == "inspect":
            return cmd_inspect(args, out, err)
        return cmd_grad_check(args, out, err)
    except UsageError as exc:
        parser.print_usage(err)
        print(f"iam: error: {exc}", file=err)
        return EXIT_USAGE
    except (tr.TrainingDiverged, NonFiniteError) as exc:
        print(f"iam: numeric failure: {exc}", file=err)
        return EXIT_NUMERIC
    except (dg.ParseError, ContractError, OSError, ValueError) as exc:
        print(f"iam: data error: {exc}", file=err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
