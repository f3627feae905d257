"""Command line: generate / train / eval / gradcheck / export-attention.

Configuration comes from an optional ``key=value`` file plus flag
overrides; flags win.  Exit codes: 0 success, 1 configuration error,
2 numeric failure (non-finite loss or a failed gradient check).
"""

import argparse
import os
import sys

from skelgcn.gradcheck import (
    CHECK_TARGETS,
    check_module,
    format_report_table,
    reports_to_csv,
)
from skelgcn.graph import load_graph_file, save_graph_file, toy_skeleton
from skelgcn.network import ModelConfig, load_checkpoint
from skelgcn.synth import (
    default_spec,
    generate,
    inject_noise,
    load_dataset,
    save_dataset,
)
from skelgcn.train import (
    NumericError,
    RunConfig,
    evaluate_samples,
    export_attention,
    train_on,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


class CliError(Exception):
    """Configuration problem; maps to exit code 1."""


def _read_kv_file(path) -> dict:
    if not os.path.exists(path):
        raise CliError(f"config file {path!r} does not exist")
    out = {}
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CliError(f"malformed config line {raw!r}")
            out[key.strip()] = value.strip()
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelgcn",
        description="Skeleton-sequence action recognition at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="synthesize a labelled dataset")
    gen.add_argument("--out", required=True, help="dataset directory to create")
    gen.add_argument("--classes", type=int, default=5)
    gen.add_argument("--samples-per-class", type=int, default=200)
    gen.add_argument("--frames", type=int, default=32)
    gen.add_argument("--jitter", type=float, default=0.03)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--noise-fraction", type=float, default=0.0,
                     help="zero out this fraction of joint sites before saving")
    gen.add_argument("--noise-mode", choices=("joint", "axis"), default="joint")
    gen.add_argument("--graph", help="graph spec file (default: built-in toy skeleton)")

    tr = sub.add_parser("train", help="train a model on a dataset directory")
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--out", required=True, help="output directory for checkpoint/metrics")
    tr.add_argument("--config", help="key=value file with RunConfig/ModelConfig fields")
    tr.add_argument("--graph", help="graph spec file (default: built-in toy skeleton)")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--channels", help="comma-separated channel schedule")
    tr.add_argument("--embed-dim", type=int)
    tr.add_argument("--c-mid-divisor", type=int)
    tr.add_argument("--attention-act", choices=("tanh", "sigmoid", "hardswish", "relu"))
    tr.add_argument("--temporal-kernels", type=int)
    tr.add_argument("--rdl", dest="rdl", action="store_true", default=None,
                    help="enable the embedding loss (default)")
    tr.add_argument("--no-rdl", dest="rdl", action="store_false",
                    help="train with softmax only")
    tr.add_argument("--literal-inter-sign", action="store_true", default=None,
                    help="as-published inter-class gradient sign")
    tr.add_argument("--ce-reduction", choices=("mean", "sum"))
    tr.add_argument("--noise-fraction", type=float)
    tr.add_argument("--noise-mode", choices=("joint", "axis"))

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=("train", "test", "all"), default="test")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--target", choices=CHECK_TARGETS + ("all",), default="all")
    gc.add_argument("--trials", type=int, default=4)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--step", type=float, default=1e-5, help="finite-difference step h")
    gc.add_argument("--csv", help="also write the full report table as CSV")

    ex = sub.add_parser("export-attention", help="write attention maps for one sample")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--sample-id", required=True)
    ex.add_argument("--layer", type=int, required=True)
    ex.add_argument("--out", required=True, help="output path prefix")
    return parser


def _load_graph(path):
    if path is None:
        return toy_skeleton()
    if not os.path.exists(path):
        raise CliError(f"graph file {path!r} does not exist")
    return load_graph_file(path)


def _cmd_generate(args) -> int:
    spec = default_spec(
        num_classes=args.classes,
        samples_per_class=args.samples_per_class,
        num_frames=args.frames,
        jitter=args.jitter,
        seed=args.seed,
    )
    graph = _load_graph(args.graph)
    dataset = generate(spec, graph)
    if args.noise_fraction > 0.0:
        dataset = inject_noise(dataset, args.noise_fraction, seed=args.seed,
                               mode=args.noise_mode)
    save_dataset(dataset, args.out)
    save_graph_file(os.path.join(args.out, "graph.txt"), graph)
    train_n = len(dataset.subset("train"))
    test_n = len(dataset.subset("test"))
    print(f"wrote {len(dataset.samples)} samples ({train_n} train / {test_n} test) "
          f"to {args.out}")
    return EXIT_OK


_MODEL_KEYS = {
    "channels": ("channel_schedule", lambda v: tuple(int(x) for x in v.split(","))),
    "channel_schedule": ("channel_schedule", lambda v: tuple(int(x) for x in v.split(","))),
    "strides": ("strides", lambda v: tuple(int(x) for x in v.split(","))),
    "embed_dim": ("embed_dim", int),
    "c_mid_divisor": ("c_mid_divisor", int),
    "attention_act": ("attention_act", str),
    "temporal_kernels": ("temporal_kernels", int),
    "num_subsets": ("num_subsets", int),
}
_RUN_KEYS = {
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "lr": ("lr", float),
    "momentum": ("momentum", float),
    "nesterov": ("nesterov", lambda v: v.lower() in ("1", "true", "yes")),
    "lr_decay": ("lr_decay", float),
    "seed": ("seed", int),
    "rdl": ("embed_loss", lambda v: v.lower() in ("1", "true", "yes")),
    "embed_loss": ("embed_loss", lambda v: v.lower() in ("1", "true", "yes")),
    "lambda1": ("lambda1", float),
    "lambda2": ("lambda2", float),
    "literal_inter_sign": ("literal_inter_sign", lambda v: v.lower() in ("1", "true", "yes")),
    "center_lr": ("center_lr", float),
    "center_eps": ("center_eps", float),
    "ce_reduction": ("ce_reduction", str),
    "noise_fraction": ("noise_fraction", float),
    "noise_mode": ("noise_mode", str),
}


def _cmd_train(args) -> int:
    if not os.path.isdir(args.data):
        raise CliError(f"dataset directory {args.data!r} does not exist")
    dataset = load_dataset(args.data)
    graph = _load_graph(args.graph)

    model_kwargs = {
        "num_classes": dataset.spec.num_classes,
        "num_joints": dataset.spec.num_joints,
        "num_frames": dataset.spec.num_frames,
        "channel_schedule": (8, 16, 16),
        "embed_dim": 32,
    }
    run_kwargs = {"epochs": 16, "lr": 0.005}

    if args.config:
        for key, value in _read_kv_file(args.config).items():
            if key in _MODEL_KEYS:
                name, conv = _MODEL_KEYS[key]
                model_kwargs[name] = conv(value)
            elif key in _RUN_KEYS:
                name, conv = _RUN_KEYS[key]
                run_kwargs[name] = conv(value)
            else:
                raise CliError(f"unknown config key {key!r}")

    override_map = {
        "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "seed": "seed",
        "rdl": "embed_loss", "literal_inter_sign": "literal_inter_sign",
        "ce_reduction": "ce_reduction", "noise_fraction": "noise_fraction",
        "noise_mode": "noise_mode",
    }
    for flag, field in override_map.items():
        value = getattr(args, flag)
        if value is not None:
            run_kwargs[field] = value
    for flag, field in (("channels", "channel_schedule"), ("embed_dim", "embed_dim"),
                        ("c_mid_divisor", "c_mid_divisor"),
                        ("attention_act", "attention_act"),
                        ("temporal_kernels", "temporal_kernels")):
        value = getattr(args, flag)
        if value is not None:
            model_kwargs[field] = (
                tuple(int(x) for x in value.split(",")) if flag == "channels" else value
            )

    try:
        model_cfg = ModelConfig(**model_kwargs)
        cfg = RunConfig(model=model_cfg, out_dir=args.out, data_dir=args.data,
                        **run_kwargs)
    except (TypeError, ValueError) as err:
        raise CliError(str(err)) from err

    result = train_on(dataset, cfg, graph)
    print(f"best test accuracy {result.best_accuracy:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"metrics:    {result.metrics_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if not os.path.isdir(args.checkpoint):
        raise CliError(f"checkpoint directory {args.checkpoint!r} does not exist")
    if not os.path.isdir(args.data):
        raise CliError(f"dataset directory {args.data!r} does not exist")
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    samples = dataset.samples if args.split == "all" else dataset.subset(args.split)
    if not samples:
        raise CliError(f"no samples in split {args.split!r}")
    try:
        metrics = evaluate_samples(params, model_cfg, samples)
    except ValueError as err:
        raise CliError(str(err)) from err
    print(f"samples:            {metrics.count}")
    print(f"top-1 accuracy:     {metrics.accuracy:.4f}")
    per_class = ", ".join(f"{v:.3f}" for v in metrics.per_class)
    print(f"per-class accuracy: {per_class}")
    print(f"mean intra-class cosine: {metrics.intra_cos:.4f}")
    print(f"mean inter-center cosine: {metrics.inter_center_cos:.4f}")
    print("confusion matrix (rows = true):")
    for row in metrics.confusion:
        print("  " + " ".join(f"{int(v):4d}" for v in row))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    targets = CHECK_TARGETS if args.target == "all" else (args.target,)
    reports = []
    for target in targets:
        reports += check_module(target, trials=args.trials, seed=args.seed, h=args.step)
    print(format_report_table(reports, max_rows=20))
    if args.csv:
        reports_to_csv(reports, args.csv)
        print(f"full report: {args.csv}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERIC


def _cmd_export_attention(args) -> int:
    if not os.path.isdir(args.checkpoint):
        raise CliError(f"checkpoint directory {args.checkpoint!r} does not exist")
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    matches = [s for s in dataset.samples if s.sample_id == args.sample_id]
    if not matches:
        raise CliError(f"sample id {args.sample_id!r} not found in {args.data!r}")
    try:
        result = export_attention(params, model_cfg, matches[0], args.layer, args.out)
    except ValueError as err:
        raise CliError(str(err)) from err
    for name, (csv_path, bin_path) in result["paths"].items():
        print(f"{name}: {csv_path}  {bin_path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "generate": _cmd_generate,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
        "export-attention": _cmd_export_attention,
    }
    try:
        return handlers[args.command](args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
