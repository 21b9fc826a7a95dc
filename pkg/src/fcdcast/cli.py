"""``fcdcast`` command-line entry point.

Every command that writes an artifact also writes ``<out>.manifest.json``
next to it: the argv, seed, SHA-256 digests of config inputs and outputs,
package version and wall-clock time. ``fcdcast repro --manifest`` re-runs
the recorded command and compares the output digests.

Exit codes: 0 success, 1 validation error (bad flags, bad inputs), 2
internal error.
"""
import argparse
import hashlib
import json
import os
import sys
import time

from fcdcast import __version__

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; usage errors are
    # validation errors here.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_json(path):
    from fcdcast.data import ValidationError

    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return cfg


def write_manifest(out, argv, seed=None, inputs=(), outputs=(), started=None, extra=None):
    manifest = {
        "command": list(argv),
        "seed": seed,
        "inputs": {p: sha256_file(p) for p in inputs},
        "outputs": {p: sha256_file(p) for p in outputs},
        "cwd": os.getcwd(),
        "version": __version__,
        "wall_clock_s": None if started is None else round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path = f"{out}.manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# --- commands ------------------------------------------------------------------

def cmd_generate(args, argv):
    from fcdcast.data import SyntheticConfig, generate_synthetic, write_panel

    cfg = SyntheticConfig(n_edges=args.edges, n_days=args.days,
                          congestion_amplitude=args.amplitude, noise_std=args.noise,
                          rng_seed=args.seed, free_flow_kph=args.ffs)
    t0 = time.time()
    write_panel(generate_synthetic(cfg), args.out)
    write_manifest(args.out, argv, args.seed, outputs=[args.out], started=t0)
    print(f"wrote {args.out}: {args.edges} edges x {args.days} days  sha256 {sha256_file(args.out)}")


def cmd_ingest(args, argv):
    from fcdcast.data import load_panel, read_ffs_csv, read_speeds_csv, write_panel

    t0 = time.time()
    panel = load_panel(read_speeds_csv(args.speeds), read_ffs_csv(args.ffs), n_slots=args.slots)
    write_panel(panel, args.out)
    write_manifest(args.out, argv, inputs=[args.speeds, args.ffs], outputs=[args.out], started=t0)
    print(f"wrote {args.out}: {panel.n_edges} edges x {panel.n_slots} slots, "
          f"{int(panel.valid.sum())} observed")


def cmd_featurize(args, argv):
    from fcdcast.data import mask_night_hours, read_panel
    from fcdcast.featurize import build_batch, enumerate_samples, spec_for_mode, write_samples

    t0 = time.time()
    panel = read_panel(args.panel)
    if not args.keep_night:
        panel = mask_night_hours(panel)
    spec = spec_for_mode(args.mode)
    anchors = enumerate_samples(panel, spec, args.stride)
    X, Y = build_batch(panel, spec, anchors, check=False)
    write_samples(args.out, spec, anchors, X, Y)
    write_manifest(args.out, argv, inputs=[args.panel], outputs=[args.out], started=t0)
    print(f"wrote {args.out}: {len(anchors)} samples, input {spec.input_size}, output {spec.output_size}")


_TRAIN_KEYS = {"t_mb", "max_epochs", "eta0", "alpha0", "lambda_l1", "lambda_l2", "patience",
               "val_every", "val_fraction", "bias_correction", "bn_recalibrate"}
_MODEL_KEYS = {"hidden_size", "t_steps", "activation", "slope", "bn_momentum", "clamp_grad", "vgg"}
_DATA_KEYS = {"train_fraction", "stride", "test_stride", "night_start", "night_end", "mask_night"}


def _split_train_config(cfg):
    from fcdcast.data import ValidationError

    unknown = set(cfg) - _TRAIN_KEYS - _MODEL_KEYS - _DATA_KEYS - {"model", "mode"}
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    pick = lambda keys: {k: v for k, v in cfg.items() if k in keys}  # noqa: E731
    return pick(_TRAIN_KEYS), pick(_MODEL_KEYS), pick(_DATA_KEYS)


def cmd_train(args, argv):
    from dataclasses import asdict

    from fcdcast.checkpoint import save_checkpoint
    from fcdcast.data import ValidationError, read_panel
    from fcdcast.models import ModelSpec, build_model
    from fcdcast.pipeline import DataConfig, prepare_splits, rng_for
    from fcdcast.training import TrainConfig, train

    t0 = time.time()
    cfg = _load_json(args.config) if args.config else {}
    tc_d, ms_d, dc_d = _split_train_config(cfg)
    tc = TrainConfig.from_dict({**tc_d, "rng_seed": args.seed})
    dc = DataConfig.from_dict(dc_d)
    # a list of hidden sizes is a validation grid
    sizes = ms_d.pop("hidden_size", 32)
    sizes = sizes if isinstance(sizes, list) else [sizes]
    panel = read_panel(args.panel)
    best = None
    for size in sizes:
        ms = ModelSpec(model=args.model, mode=args.mode, hidden_size=int(size), **ms_d)
        splits = prepare_splits(panel, ms, dc, tc.val_fraction)
        if len(splits.train) < tc.t_mb:
            raise ValidationError(f"only {len(splits.train)} training samples")
        model = build_model(ms, rng_for(args.seed, "init"))
        model, log = train(model, splits.train, splits.val if len(splits.val) else None, tc,
                           rng=rng_for(args.seed, "shuffle"))
        print(f"hidden_size={size}: best val rmse {log.best_val_rmse:.6g} at iter {log.best_iter} "
              f"({log.stop_reason})")
        if best is None or log.best_val_rmse < best[2].best_val_rmse:
            best = (ms, model, log)
    ms, model, log = best
    meta = {"model_spec": asdict(ms), "train_config": tc.to_dict(), "data_config": dc.to_dict(),
            "seed": args.seed, "best_iter": log.best_iter, "best_val_rmse": log.best_val_rmse}
    save_checkpoint(args.out, model, meta, log.optimizer_state)
    outputs = [args.out]
    if args.log:
        log.write_csv(args.log)
        outputs.append(args.log)
    inputs = [args.panel] + ([args.config] if args.config else [])
    write_manifest(args.out, argv, args.seed, inputs, outputs, t0)
    print(f"wrote {args.out} (hidden_size={ms.hidden_size})")


def cmd_evaluate(args, argv):
    from fcdcast.checkpoint import load_checkpoint
    from fcdcast.data import ValidationError, read_panel
    from fcdcast.evaluate import write_report_csv, write_report_svg
    from fcdcast.models import ModelSpec
    from fcdcast.pipeline import DataConfig, evaluate_dataset, prepare_splits

    t0 = time.time()
    model, manifest, _ = load_checkpoint(args.ckpt)
    meta = manifest["meta"]
    ms = ModelSpec.from_dict(meta["model_spec"])
    if ms.mode != args.mode:
        raise ValidationError(f"checkpoint was trained on {ms.mode!r} input, not {args.mode!r}")
    dc = DataConfig.from_dict(meta.get("data_config", {}))
    val_fraction = meta.get("train_config", {}).get("val_fraction", 0.1)
    splits = prepare_splits(read_panel(args.panel), ms, dc, val_fraction)
    report = evaluate_dataset(model, splits.test, regimes=args.regimes)
    write_report_csv(report, args.out)
    outputs = [args.out]
    if args.svg:
        write_report_svg({ms.model: report}, args.svg)
        outputs.append(args.svg)
    write_manifest(args.out, argv, meta.get("seed"), [args.panel, args.ckpt], outputs, t0)
    print(f"test samples {len(splits.test)}: rmse {report.rmse_all:.4f} kph, "
          f"RTPB {report.rmse_bench_all:.4f} kph, Q2 {report.q2_all:.4f}")


def cmd_count_params(args, argv):
    from fcdcast.models import ModelSpec, build_model, count_parameters, reported_comparison

    cfg = _load_json(args.config)
    ms = ModelSpec.from_dict(cfg)
    model = build_model(ms, __import__("numpy").random.default_rng(0))
    counts = count_parameters(model)
    width = max(len(k) for k in counts)
    for name, n in counts.items():
        print(f"{name:<{width}}  {n}")
    total = sum(counts.values())
    print(f"{'total':<{width}}  {total}")
    cmp = reported_comparison(ms, model)
    if cmp is not None and args.compare:
        status = "match" if cmp["ours"] == cmp["reported"] else f"differs by {cmp['ours'] - cmp['reported']:+d}"
        print(f"reported figure for {ms.model}: {cmp['reported']} ({status})")


def cmd_gradient_check(args, argv):
    import numpy as np

    from fcdcast.models import toy_problem
    from fcdcast.nn import gradient_check
    from fcdcast.pipeline import rng_for

    model, x, y = toy_problem(args.model, rng_for(args.seed, "init"))
    report = gradient_check(model, x, y, l1=args.l1, l2=args.l2, step=args.step)
    for name, err in report.per_param.items():
        print(f"{name:<24} {err:.3e}")
    if np.isfinite(report.input_rel_error):
        print(f"{'input':<24} {report.input_rel_error:.3e}")
    ok = report.passed(args.tol)
    tol = f"{args.tol:g}".replace("e-0", "e-").replace("e+0", "e+")
    print(f"max rel err < {tol}: {'PASS' if ok else 'FAIL'} ({report.max_rel_error:.3e})")
    return 0 if ok else 1


def cmd_repro(args, argv):
    from fcdcast.data import ValidationError

    manifest = _load_json(args.manifest)
    if "command" not in manifest or "outputs" not in manifest:
        raise ValidationError(f"{args.manifest}: not an fcdcast run manifest")
    command = list(manifest["command"])
    cwd = manifest.get("cwd") or os.getcwd()
    here = os.getcwd()
    os.chdir(cwd)
    try:
        for path, digest in manifest.get("inputs", {}).items():
            if not os.path.exists(path) or sha256_file(path) != digest:
                raise ValidationError(f"input {path} changed since the recorded run")
        status = main(command)
        if status != 0:
            return status
        bad = [p for p, d in manifest["outputs"].items() if sha256_file(p) != d]
    finally:
        os.chdir(here)
    for p in manifest["outputs"]:
        print(f"{'MISMATCH' if p in bad else 'ok':<8} {p}")
    return 1 if bad else 0


# --- argument parsing ------------------------------------------------------------

def build_parser():
    p = _Parser(prog="fcdcast", description="Road-traffic speed forecasting from floating-car data.")
    p.add_argument("--version", action="version", version=f"fcdcast {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthetic ring-road speed panel")
    g.add_argument("--edges", type=int, default=32)
    g.add_argument("--days", type=int, default=60)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--amplitude", type=float, default=0.6, help="congestion amplitude")
    g.add_argument("--noise", type=float, default=0.03, help="white-noise std (normalized units)")
    g.add_argument("--ffs", type=float, default=65.0, help="free-flow speed, kph")
    g.add_argument("--out", default="panel.bin")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("ingest", help="build a panel from CSV observations")
    i.add_argument("--speeds", required=True, help="CSV with edge_id,slot,speed_kph")
    i.add_argument("--ffs", required=True, help="CSV with edge_id,ffs_kph")
    i.add_argument("--slots", type=int, default=None, help="panel length (default: last slot + 1)")
    i.add_argument("--out", default="panel.bin")
    i.set_defaults(func=cmd_ingest)

    f = sub.add_parser("featurize", help="write a sample cache")
    f.add_argument("--panel", required=True)
    f.add_argument("--mode", choices=("full", "reduced"), required=True)
    f.add_argument("--stride", type=int, default=1)
    f.add_argument("--keep-night", action="store_true", help="do not mask 23:00-05:00 slots")
    f.add_argument("--out", default="samples.bin")
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--panel", required=True)
    t.add_argument("--mode", choices=("full", "reduced"), required=True)
    t.add_argument("--model", choices=("fnn1", "fnn3", "vgg", "lstm"), required=True)
    t.add_argument("--config", default=None, help="JSON with training/model/data settings")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="ckpt.fcw")
    t.add_argument("--log", default=None, help="training log CSV")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    e.add_argument("--panel", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--mode", choices=("full", "reduced"), required=True)
    e.add_argument("--out", default="report.csv")
    e.add_argument("--svg", default=None)
    e.add_argument("--regimes", action="store_true", help="add constant/standard/changing rows")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("count-params", help="per-layer weight counts for a model config")
    c.add_argument("--config", required=True)
    c.add_argument("--no-compare", dest="compare", action="store_false",
                   help="skip the comparison with the reported figure")
    c.set_defaults(func=cmd_count_params)

    k = sub.add_parser("gradient-check", help="finite-difference check of a toy model")
    k.add_argument("--model", choices=("fnn1", "fnn3", "vgg", "lstm"), required=True)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--step", type=float, default=1e-5)
    k.add_argument("--tol", type=float, default=1e-5)
    k.add_argument("--l1", type=float, default=1e-4)
    k.add_argument("--l2", type=float, default=1e-4)
    k.set_defaults(func=cmd_gradient_check)

    r = sub.add_parser("repro", help="re-run a recorded command and compare digests")
    r.add_argument("--manifest", required=True)
    r.set_defaults(func=cmd_repro)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.threads is not None:
        if args.threads < 1:
            print("fcdcast: error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    from fcdcast.checkpoint import CheckpointError
    from fcdcast.data import StructuralError, ValidationError
    from fcdcast.featurize import SampleUnavailable

    try:
        status = args.func(args, argv)
    except (ValidationError, StructuralError, CheckpointError, SampleUnavailable,
            FileNotFoundError, UsageError) as exc:
        print(f"fcdcast: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"fcdcast: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
