"""Single entry-point command for the whole pipeline.

Subcommands: gen, sanitize, canon, split, train, eval, stream, spectrogram,
flops, report. Every run prints its configuration fingerprint; all randomness
flows from --seed (with the SDP_SEED environment variable as fallback).
Pipeline errors exit 1 with one machine-parseable line `error: <Name>: <msg>`
preserving module error names; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, benchkit, probe
from .canonical import CanonicalGridSpec, WindowSpec, canonicalize
from .csimodel import generate_stream, make_synthetic_task, parse_scene_config, parse_task_config
from .sanitize import SanitizeConfig, sanitize_stream
from .traceio import (DatasetManifest, ManifestEntry, SplitAssignment,
                      cross_user_split, read_manifest, read_raw_trace,
                      read_tensor, write_manifest, write_raw_trace, write_tensor)


class UsageError(ValueError):
    """Bad invocation (exit 2), as opposed to pipeline failures (exit 1)."""


def _resolve_seed(args, required: bool = True) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SDP_SEED")
    if env is not None:
        return int(env)
    if required:
        raise UsageError("no seed: pass --seed or set SDP_SEED")
    return None


def _print_fingerprint(args) -> None:
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    payload["version"] = __version__
    print(f"fingerprint: {benchkit.config_fingerprint(**payload)}")


def _sanitize_cfg(args) -> SanitizeConfig | None:
    if getattr(args, "no_sanitize", False):
        return None
    return SanitizeConfig(mode=args.sanitize_mode, reference_antenna=args.ref_antenna)


def _model_cfg(args, token_dim: int, max_t: int, out_dim: int, task: str) -> probe.ModelConfig:
    return probe.ModelConfig(depth=args.depth, embed_dim=args.embed_dim, heads=args.heads,
                             ffn_dim=args.ffn_dim, token_dim=token_dim, max_t=max_t,
                             out_dim=out_dim, task=task)


def _train_cfg(args, seed: int, task: str) -> probe.TrainConfig:
    return probe.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                             lr_max=args.lr_max, lr_min=args.lr_min,
                             weight_decay=args.weight_decay, seed=seed, task=task)


def _load_split_tensors(manifest: DatasetManifest, base: Path):
    """Tensor lists keyed by split, labels/subjects taken from the manifest."""
    out = {"train": [], "val": [], "test": []}
    for e in manifest.entries:
        if e.split not in out:
            continue
        tensor = read_tensor(base / e.path)
        tensor.label = e.label_id
        tensor.subject = e.subject
        out[e.split].append(tensor)
    return out


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    _print_fingerprint(args)
    seed = _resolve_seed(args)
    if args.task:
        spec, cfg_seed = parse_task_config(Path(args.task).read_text(encoding="utf-8"))
        streams, manifest = make_synthetic_task(spec, seed if seed is not None else cfg_seed)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for stream, entry in zip(streams, manifest.entries):
            write_raw_trace(stream, out_dir / entry.path)
        write_manifest(manifest, out_dir / "manifest.tsv")
        print(f"wrote {len(streams)} traces + manifest.tsv to {out_dir}")
        return 0
    scene = parse_scene_config(Path(args.config).read_text(encoding="utf-8"))
    use_seed = seed if seed is not None else scene.seed
    if use_seed is None:
        raise ValueError("no seed: pass --seed, set SDP_SEED, or put seed in the scene config")
    stream = generate_stream(scene.paths, scene.profile, scene.impairments,
                             scene.duration_s, use_seed)
    write_raw_trace(stream, args.out)
    print(f"wrote {len(stream.frames)} frames to {args.out}")
    return 0


def cmd_sanitize(args) -> int:
    _print_fingerprint(args)
    stream = read_raw_trace(args.infile)
    cfg = SanitizeConfig(mode=args.sanitize_mode, reference_antenna=args.ref_antenna)
    write_raw_trace(sanitize_stream(stream, cfg), args.out)
    print(f"sanitized {len(stream.frames)} frames -> {args.out}")
    return 0


def cmd_canon(args) -> int:
    _print_fingerprint(args)
    grid = CanonicalGridSpec(k=args.k)
    window = WindowSpec(t=args.window_t, hop=args.hop)
    san = _sanitize_cfg(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        manifest = read_manifest(args.manifest, task_kind=args.task_kind)
        in_dir = Path(args.in_dir) if args.in_dir else Path(args.manifest).parent
        entries = []
        n_tensors = 0
        for e in manifest.entries:
            stream = read_raw_trace(in_dir / e.path)
            tensors = canonicalize(stream, san, grid, window,
                                   label=e.label_id, subject=e.subject)
            stem = Path(e.path).stem
            for w, tensor in enumerate(tensors):
                name = f"{stem}_w{w}.sdpc"
                write_tensor(tensor, out_dir / name)
                entries.append(replace(e, path=name))
                n_tensors += 1
        tensor_manifest = DatasetManifest(entries=entries, task_kind=manifest.task_kind)
        write_manifest(tensor_manifest, out_dir / "tensors.tsv")
        print(f"wrote {n_tensors} tensors + tensors.tsv to {out_dir}")
        return 0
    stream = read_raw_trace(args.infile)
    tensors = canonicalize(stream, san, grid, window, label=args.label, subject=args.subject)
    stem = Path(args.infile).stem
    for w, tensor in enumerate(tensors):
        write_tensor(tensor, out_dir / f"{stem}_w{w}.sdpc")
    print(f"wrote {len(tensors)} tensors to {out_dir}")
    return 0


def cmd_split(args) -> int:
    _print_fingerprint(args)
    seed = _resolve_seed(args)
    manifest = read_manifest(args.manifest)
    holdout = frozenset(int(s) for s in args.holdout_subjects.split(","))
    assignment = SplitAssignment(holdout_subjects=holdout,
                                 val_fraction=args.val_fraction, seed=seed)
    split = cross_user_split(manifest, assignment)
    write_manifest(split, args.out)
    counts = {s: len(split.by_split(s)) for s in ("train", "val", "test")}
    print(f"split -> {args.out} (train={counts['train']} val={counts['val']} "
          f"test={counts['test']})")
    return 0


def cmd_train(args) -> int:
    _print_fingerprint(args)
    seed = _resolve_seed(args)
    manifest = read_manifest(args.manifest, task_kind=args.task_kind)
    base = Path(args.tensor_dir) if args.tensor_dir else Path(args.manifest).parent
    tensors = _load_split_tensors(manifest, base)
    if not tensors["train"] or not tensors["val"]:
        raise probe.EmptySplit("manifest has no train or no val rows; run `sdp split` first")
    sample = tensors["train"][0]
    a, k, t = sample.values.shape
    label_names = manifest.label_names() if manifest.task_kind == "classification" else []
    out_dim = len(label_names) if manifest.task_kind == "classification" else 1
    model_cfg = _model_cfg(args, token_dim=2 * a * k, max_t=t, out_dim=out_dim,
                           task=manifest.task_kind)
    train_cfg = _train_cfg(args, seed, manifest.task_kind)
    result = probe.train(tensors["train"], tensors["val"], model_cfg, train_cfg,
                         label_names=label_names)
    probe.save_checkpoint(args.out, model_cfg, result.params)
    if args.log:
        probe.write_train_log(args.log, result.log_rows)
    print(f"best epoch {result.best_epoch} val_metric {result.best_val!r} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    _print_fingerprint(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    manifest = read_manifest(args.manifest)
    base = Path(args.tensor_dir) if args.tensor_dir else Path(args.manifest).parent
    tensors = _load_split_tensors(manifest, base)
    label_names = manifest.label_names()
    sample = tensors["train"][0]
    a, k, t = sample.values.shape
    model_cfg = _model_cfg(args, token_dim=2 * a * k, max_t=t,
                           out_dim=len(label_names), task="classification")
    base_cfg = _train_cfg(args, seeds[0], "classification")

    def run_one(seed: int):
        cfg = replace(base_cfg, seed=seed)
        result = probe.train(tensors["train"], tensors["val"], model_cfg, cfg,
                             label_names=label_names)
        labels = np.array([int(x.label) for x in tensors["test"]])
        preds = np.argmax(probe.predict_probs(tensors["test"], result.params, model_cfg), axis=1)
        run = benchkit.SeedRunResult(
            seed=seed, top1=benchkit.top1(preds, labels),
            macro_f1=benchkit.macro_f1(preds, labels, len(label_names)), mae=None,
            confusion=benchkit.confusion_matrix(preds, labels, len(label_names)))
        run.validate()
        return run

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            by_seed = dict(zip(seeds, pool.map(run_one, seeds)))
        per_seed = [by_seed[s] for s in seeds]   # aggregate in seed order
    else:
        per_seed = [run_one(s) for s in seeds]
    aggregates = {
        "top1": benchkit.aggregate_seeds([r.top1 for r in per_seed]),
        "macro_f1": benchkit.aggregate_seeds([r.macro_f1 for r in per_seed]),
    }
    fp = benchkit.config_fingerprint(model=model_cfg, train=base_cfg, seeds=seeds)
    report = benchkit.EvalReport(seeds=seeds, per_seed=per_seed, aggregates=aggregates,
                                 fingerprint=fp, label_names=label_names)
    benchkit.emit_report(report, args.out_dir)
    agg = report.aggregates["top1"]
    print(f"top1 mean {agg.mean!r} std {agg.std!r} ci95 {agg.ci95_halfwidth!r} "
          f"over {len(seeds)} seeds -> {args.out_dir}")
    return 0


def cmd_stream(args) -> int:
    _print_fingerprint(args)
    stream = read_raw_trace(args.infile)
    model_cfg, params = probe.load_checkpoint(args.model)
    label_names = []
    if args.manifest:
        label_names = read_manifest(args.manifest).label_names()
    result = probe.TrainResult(params=params, model_cfg=model_cfg,
                               train_cfg=probe.TrainConfig(task=model_cfg.task),
                               log_rows=[], best_epoch=-1, best_val=0.0,
                               label_names=label_names)
    decision = benchkit.stream_infer(
        stream, result, _sanitize_cfg(args), CanonicalGridSpec(k=args.k),
        WindowSpec(t=args.window_t, hop=args.hop), tau=args.tau,
        event_class=args.event_class,
        event_class_id=args.event_id)
    if args.trace_out:
        lines = ["window_start_s\tp_event"]
        for t, p in zip(decision.window_starts_s, decision.p_trace):
            lines.append(f"{float(t)!r}\t{float(p)!r}")
        Path(args.trace_out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"triggered={decision.triggered} p_max={decision.p_max!r} "
          f"peak_time_s={decision.peak_time_s!r} tau={decision.tau!r}")
    return 0


def cmd_spectrogram(args) -> int:
    _print_fingerprint(args)
    stream = read_raw_trace(args.infile)
    spec = benchkit.dfs_spectrogram(stream, pair=args.pair, mode=args.mode,
                                    reference=args.ref_antenna,
                                    window=args.stft_window, hop=args.stft_hop)
    rows = ["\t".join(["time_s"] + [repr(float(f)) for f in spec.freqs_hz])]
    for i, t in enumerate(spec.times_s):
        rows.append("\t".join([repr(float(t))] + [repr(float(v)) for v in spec.power[i]]))
    Path(args.out).write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {spec.power.shape[0]}x{spec.power.shape[1]} grid to {args.out}")
    return 0


def cmd_flops(args) -> int:
    _print_fingerprint(args)
    cfg = probe.ModelConfig(depth=args.depth, embed_dim=args.embed_dim, heads=args.heads,
                            ffn_dim=args.ffn_dim, token_dim=args.token_dim,
                            max_t=args.window_t, out_dim=args.out_dim)
    items = probe.flops_estimate(cfg, args.window_t, itemized=True)
    for name, value in items.items():
        print(f"{name}: {value}")
    return 0


def cmd_report(args) -> int:
    _print_fingerprint(args)
    src = Path(args.eval_dir)
    dest = Path(args.out_dir)
    dest.mkdir(parents=True, exist_ok=True)
    copied = 0
    for name in sorted(p.name for p in src.iterdir()):
        if name.endswith(".tsv") or name in ("summary.txt", "fingerprint.txt"):
            (dest / name).write_bytes((src / name).read_bytes())
            copied += 1
    for tagged in args.spectrogram or []:
        tag, _, path = tagged.partition("=")
        if not path:
            raise ValueError(f"--spectrogram expects tag=path, got {tagged!r}")
        (dest / f"spectrogram_{tag}.tsv").write_bytes(Path(path).read_bytes())
        copied += 1
    print(f"assembled {copied} files into {dest}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (falls back to the SDP_SEED environment variable)")


def _add_sanitize_flags(p, with_skip: bool = False):
    p.add_argument("--sanitize-mode", choices=["slope_intercept", "conjugate_reference"],
                   default="slope_intercept", help="phase sanitization mode")
    p.add_argument("--ref-antenna", type=int, default=0,
                   help="reference antenna pair for conjugate_reference")
    if with_skip:
        p.add_argument("--no-sanitize", action="store_true",
                       help="skip sanitization entirely")


def _add_window_flags(p):
    p.add_argument("--k", type=int, default=30, help="canonical subcarrier count")
    p.add_argument("--window-t", type=int, default=500, help="frames per window")
    p.add_argument("--hop", type=int, default=None,
                   help="frames between window starts (default: window length)")


def _add_model_flags(p):
    p.add_argument("--depth", type=int, default=probe.model.DEFAULT_DEPTH,
                   help="encoder layer count")
    p.add_argument("--embed-dim", type=int, default=probe.model.DEFAULT_EMBED_DIM,
                   help="embedding width")
    p.add_argument("--heads", type=int, default=probe.model.DEFAULT_HEADS,
                   help="attention heads")
    p.add_argument("--ffn-dim", type=int, default=probe.model.DEFAULT_FFN_DIM,
                   help="feed-forward hidden width")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--batch-size", type=int, default=8, help="minibatch size")
    p.add_argument("--lr-max", type=float, default=2e-3, help="peak learning rate")
    p.add_argument("--lr-min", type=float, default=1e-5, help="final learning rate")
    p.add_argument("--weight-decay", type=float, default=0.01, help="AdamW weight decay")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdp", allow_abbrev=False,
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", allow_abbrev=False,
                       help="simulate a raw trace (scene) or a labeled task dataset")
    p.add_argument("--config", help="scene config file")
    p.add_argument("--task", help="task config file (writes a dataset + manifest)")
    p.add_argument("--out", help="output .sdpr path (scene mode)")
    p.add_argument("--out-dir", help="output directory (task mode)")
    _add_seed(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("sanitize", allow_abbrev=False, help="remove hardware phase distortion")
    p.add_argument("--in", dest="infile", required=True, help="input .sdpr")
    p.add_argument("--out", required=True, help="output .sdpr")
    _add_sanitize_flags(p)
    p.set_defaults(func=cmd_sanitize)

    p = sub.add_parser("canon", allow_abbrev=False,
                       help="sanitize + project + window into canonical tensors")
    p.add_argument("--in", dest="infile", help="input .sdpr (single-trace mode)")
    p.add_argument("--manifest", help="dataset manifest (dataset mode)")
    p.add_argument("--in-dir", help="directory holding the manifest's traces")
    p.add_argument("--out", "--out-dir", dest="out_dir", required=True,
                   help="output directory for .sdpc files")
    p.add_argument("--task-kind", choices=["classification", "regression"],
                   default="classification", help="task kind of the manifest")
    p.add_argument("--label", type=int, default=None, help="label for single-trace mode")
    p.add_argument("--subject", type=int, default=None, help="subject for single-trace mode")
    _add_window_flags(p)
    _add_sanitize_flags(p, with_skip=True)
    p.set_defaults(func=cmd_canon)

    p = sub.add_parser("split", allow_abbrev=False, help="assign a cross-user split")
    p.add_argument("--manifest", required=True, help="input manifest")
    p.add_argument("--out", required=True, help="output manifest with split column set")
    p.add_argument("--holdout-subjects", required=True,
                   help="comma list of subject ids held out for test")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="fraction of non-holdout samples used for validation")
    _add_seed(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", allow_abbrev=False, help="train the probe on a split manifest")
    p.add_argument("--manifest", required=True, help="tensor manifest with splits")
    p.add_argument("--tensor-dir", help="directory holding .sdpc files (default: manifest dir)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", help="output training-log path (tsv)")
    p.add_argument("--task-kind", choices=["classification", "regression"],
                   default="classification", help="task kind of the manifest")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", allow_abbrev=False,
                       help="train/evaluate once per seed and emit a report bundle")
    p.add_argument("--manifest", required=True, help="tensor manifest with splits")
    p.add_argument("--tensor-dir", help="directory holding .sdpc files (default: manifest dir)")
    p.add_argument("--seeds", default=",".join(str(s) for s in benchkit.BENCHMARK_SEEDS),
                   help="comma list of seeds")
    p.add_argument("--out-dir", required=True, help="report bundle directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel seed evaluations")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_seed(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", allow_abbrev=False,
                       help="continuous-stream event inference with a trained model")
    p.add_argument("--in", dest="infile", required=True, help="input .sdpr")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--manifest", help="manifest used to resolve class names")
    p.add_argument("--event-class", default="Fall", help="event class name")
    p.add_argument("--event-id", type=int, default=None,
                   help="event class id (overrides --event-class)")
    p.add_argument("--tau", type=float, default=benchkit.DEFAULT_TAU,
                   help="trigger threshold on the peak event probability")
    p.add_argument("--trace-out", help="optional tsv path for the probability trace")
    _add_window_flags(p)
    _add_sanitize_flags(p, with_skip=True)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("spectrogram", allow_abbrev=False,
                       help="Doppler spectrogram of one antenna pair")
    p.add_argument("--in", dest="infile", required=True, help="input .sdpr")
    p.add_argument("--out", required=True, help="output tsv grid")
    p.add_argument("--pair", type=int, default=0, help="flattened antenna-pair index")
    p.add_argument("--mode", choices=["conjugate_reference", "raw"],
                   default="conjugate_reference", help="preprocessing mode")
    p.add_argument("--ref-antenna", type=int, default=0, help="reference pair")
    p.add_argument("--stft-window", type=int, default=benchkit.STFT_WINDOW,
                   help="STFT window length (frames)")
    p.add_argument("--stft-hop", type=int, default=benchkit.STFT_HOP,
                   help="STFT hop (frames)")
    p.set_defaults(func=cmd_spectrogram)

    p = sub.add_parser("flops", allow_abbrev=False,
                       help="analytic forward-pass cost of a probe configuration")
    _add_model_flags(p)
    p.add_argument("--token-dim", type=int, required=True, help="input token width")
    p.add_argument("--window-t", type=int, default=500, help="sequence length")
    p.add_argument("--out-dim", type=int, default=2, help="head output width")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("report", allow_abbrev=False,
                       help="assemble a report bundle from eval output")
    p.add_argument("--eval-dir", required=True, help="directory written by `sdp eval`")
    p.add_argument("--out-dir", required=True, help="bundle destination")
    p.add_argument("--spectrogram", action="append",
                   help="extra spectrogram as tag=path (repeatable)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single reporting point by design
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
