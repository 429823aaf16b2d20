"""Command-line entry point: ``pixdiff <command> [flags]``.

Exit status is 0 on success, 2 on usage or configuration errors and 1 on
runtime failures. Every file is written atomically.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from pixdiff import cost, io, oracle, uvit
from pixdiff.errors import ConfigurationError
from pixdiff.schedules import LogSnrSchedule

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(text: str, out: str | None) -> None:
    if out:
        io.atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _check_out_dir(path: str) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"output path {path!r} exists and is not a directory")
    return p


def _check_file(path: str | None, what: str) -> None:
    if path is not None and not os.path.isfile(path):
        raise UsageError(f"{what} {path!r} not found")


# -- schedule / losscurve ----------------------------------------------------

def cmd_schedule(args) -> int:
    sched = LogSnrSchedule(args.kind, logsnr_min=args.logsnr_min, logsnr_max=args.logsnr_max, image_res=args.res,
                           noise_res_low=args.low, noise_res_high=args.high, shift_res=args.shift_res)
    rows = sched.table(args.points)
    _emit(io.format_csv(("t", "lambda", "alpha", "sigma", "dlambda_dt"), rows.tolist()), args.out)
    return EXIT_OK


def _lambda_grid(args) -> np.ndarray:
    if args.points < 1:
        raise UsageError("--points must be positive")
    if not args.lambda_min <= args.lambda_max:
        raise UsageError("--lambda-min must not exceed --lambda-max")
    return np.linspace(args.lambda_min, args.lambda_max, args.points)


def cmd_losscurve(args) -> int:
    from pixdiff.weightings import weighting_table

    cols = weighting_table(_lambda_grid(args), bias=args.bias, edm_shift=args.edm_shift, normalize=args.normalize)
    header = list(cols)
    _emit(io.format_csv(header, np.column_stack([cols[k] for k in header]).tolist()), args.out)
    return EXIT_OK


# -- oracle ------------------------------------------------------------------

def _parse_mixture(text: str) -> oracle.PrecisionMixture:
    try:
        bits, props = text.split(":")
        return oracle.PrecisionMixture.of([int(b) for b in bits.split(",")], [float(p) for p in props.split(",")])
    except ValueError as exc:
        raise UsageError(f"--mixture expects 'bits:proportions', e.g. 8,7,6,5:1,4,4,6 ({exc})") from None


def cmd_oracle(args) -> int:
    lam = _lambda_grid(args)
    configs = []
    for n in args.bits or []:
        configs.append((f"bits{n}", lambda n=n: oracle.eps_mse_curve(oracle.GridData(n), lam)))
    if args.mixture:
        mix = _parse_mixture(args.mixture)
        configs.append(("mixture", lambda: oracle.mixture_curve(mix, lam)))
    if not configs:
        raise UsageError("give --bits and/or --mixture")
    if len(configs) > 1 and not args.out_dir:
        raise UsageError("several curves need --out-dir")
    out_dir = _check_out_dir(args.out_dir) if args.out_dir else None
    for name, make in configs:
        curve = make()
        values = curve.values
        if args.weighted:
            values = oracle.weighted_curve(None, lam, bias=args.bias, base=curve).values
        text = io.format_csv(("lambda", "value"), zip(curve.lambdas.tolist(), values.tolist()))
        if out_dir is not None:
            io.atomic_write_text(out_dir / f"oracle_{name}.csv", text)
        else:
            _emit(text, args.out)
    return EXIT_OK


# -- model configs -----------------------------------------------------------

def _model_config(args) -> tuple[uvit.UViTConfig, int]:
    if getattr(args, "config", None):
        from pixdiff.config import config_load

        cfg = config_load(args.config)
        return cfg.model, args.res or cfg.resolution
    res = args.res or 512
    make = uvit.small if args.preset == "small" else uvit.flop_heavy
    return make(res), res


def cmd_flops(args) -> int:
    model, res = _model_config(args)
    rep = cost.model_cost(model, res)
    if args.format == "table":
        _emit(rep.table() + "\n", args.out)
    else:
        import json

        _emit(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_memory(args) -> int:
    import json

    model, res = _model_config(args)
    mem = uvit.activation_memory(model, res, args.batch)
    obj = {
        "input_res": res,
        "batch": args.batch,
        "bytes_per_value": 2,
        "blockwise_skip_bytes": mem.blockwise_skip,
        "residual_skip_bytes": mem.residual_skip,
        "blockwise_skip_mb": mem.blockwise_skip / 1024 ** 2,
        "residual_skip_mb": mem.residual_skip / 1024 ** 2,
        "per_level": [list(r) for r in mem.per_level],
    }
    _emit(json.dumps(obj, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


# -- train / sample ----------------------------------------------------------

def _suggest(res: int) -> None:
    from pixdiff.config import suggest_shifted

    s = suggest_shifted(res)
    print(f"suggested for {res}x{res}: loss_type = sigmoid:{s['bias']:g}, "
          f"guidance_interval = ({s['guidance_interval_lo']:g}, 5)", file=sys.stderr)


def cmd_train(args) -> int:
    from dataclasses import replace

    from pixdiff.config import config_load
    from pixdiff.trainer import Trainer, eval_toy

    cfg = config_load(args.config)
    out = _check_out_dir(args.out_dir)
    _suggest(cfg.resolution)
    train = cfg.train
    if args.steps is not None:
        train = replace(train, max_steps=args.steps, warmup_steps=min(train.warmup_steps, args.steps))
    trainer = Trainer(cfg.model, train)
    if args.resume:
        trainer.load(args.resume)
    trainer.run(train.max_steps - trainer.state.step, log_every=args.log_every)
    out.mkdir(parents=True, exist_ok=True)
    trainer.write_log(out / "train_log.csv")
    trainer.save(out / "checkpoint.bin")
    if args.eval_samples and train.dataset.kind in ("two_gaussians_1d", "grid_bits_1d"):
        metrics = eval_toy(trainer.network(), train, replace(cfg.sampler, guidance_scale=0.0),
                           num_samples=args.eval_samples)
        io.write_json(out / "eval.json", metrics)
    return EXIT_OK


def cmd_sample(args) -> int:
    from dataclasses import replace

    from pixdiff.config import config_load
    from pixdiff.diffusion import sample, sidecar
    from pixdiff.engine import checkpoint
    from pixdiff.trainer import TrainState

    cfg = config_load(args.config)
    out = _check_out_dir(args.out_dir)
    _suggest(cfg.resolution)
    sampler = cfg.sampler
    if args.steps is not None:
        sampler = replace(sampler, num_steps=args.steps)
    if args.guidance is not None:
        sampler = replace(sampler, guidance_scale=args.guidance)
    model = uvit.build(cfg.model, requires_grad=False)
    if args.checkpoint:
        state = TrainState.from_arrays(checkpoint.load(args.checkpoint))
        model = model.with_params(state.params if args.raw_params else state.ema)
    ds = cfg.train.dataset
    shape = ds.shape if ds.kind != "file_folder" else (cfg.resolution, cfg.resolution, cfg.model.in_channels)
    labels = None
    if cfg.model.num_classes:
        labels = np.full(args.num, args.label, dtype=np.int64)
    xs = sample(model, cfg.train.schedule, sampler, labels, shape=shape, num_samples=args.num)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if shape[0] == 1 and shape[1] == 1:
        io.write_csv(out / "samples.csv", [f"c{i}" for i in range(shape[2])], xs.reshape(args.num, -1).tolist())
        files.append("samples.csv")
    else:
        for i, x in enumerate(xs):
            name = f"sample_{i:05d}.ppm"
            io.write_ppm(out / name, x)
            files.append(name)
    meta = sidecar(sampler, cfg.train.schedule, files=files, label=None if labels is None else args.label,
                   checkpoint=os.path.basename(args.checkpoint) if args.checkpoint else None, shape=list(shape))
    io.write_json(out / "samples.json", meta)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pixdiff", description="Pixel-space diffusion toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("schedule", help="tabulate a log-SNR schedule as CSV")
    s.add_argument("--kind", default="cosine_interpolated", choices=("cosine", "cosine_shifted", "cosine_interpolated"))
    s.add_argument("--res", type=int, default=512, help="image resolution")
    s.add_argument("--low", type=int, default=32, help="noise_res_low (interpolated)")
    s.add_argument("--high", type=int, default=512, help="noise_res_high (interpolated)")
    s.add_argument("--shift-res", type=int, default=64, help="reference resolution (shifted)")
    s.add_argument("--logsnr-min", type=float, default=-10.0)
    s.add_argument("--logsnr-max", type=float, default=10.0)
    s.add_argument("--points", type=int, default=101, help="number of t values in [0, 1]")
    s.add_argument("--out", help="output CSV (default: stdout)")
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("losscurve", help="tabulate sigmoid/EDM weightings over lambda as CSV")
    s.add_argument("--bias", type=float, default=-3.0, help="sigmoid bias b")
    s.add_argument("--edm-shift", type=float, default=0.0, help="lambda shift of the EDM weightings")
    s.add_argument("--lambda-min", type=float, default=-10.0)
    s.add_argument("--lambda-max", type=float, default=10.0)
    s.add_argument("--points", type=int, default=201)
    s.add_argument("--normalize", action="store_true", help="scale every column to a maximum of 1")
    s.add_argument("--out", help="output CSV (default: stdout)")
    s.set_defaults(func=cmd_losscurve)

    s = sub.add_parser("oracle", help="exact eps-mse curves for uniform grid data")
    s.add_argument("--bits", type=int, nargs="+", help="grid precision(s) in bits")
    s.add_argument("--mixture", help="mixture of precisions, e.g. 8,7,6,5:1,4,4,6")
    s.add_argument("--lambda-min", type=float, default=-10.0)
    s.add_argument("--lambda-max", type=float, default=25.0)
    s.add_argument("--points", type=int, default=71)
    s.add_argument("--weighted", action="store_true", help="multiply by sigmoid(bias - lambda)")
    s.add_argument("--bias", type=float, default=oracle.UNIVARIATE_BIAS, help="bias for --weighted")
    s.add_argument("--out", help="output CSV for a single curve (default: stdout)")
    s.add_argument("--out-dir", help="directory receiving one oracle_<config>.csv per curve")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("train", help="train a model from a config file")
    s.add_argument("--config", required=True, help="configuration file")
    s.add_argument("--out-dir", required=True, help="directory for train_log.csv, checkpoint.bin, eval.json")
    s.add_argument("--steps", type=int, help="override max_train_steps")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--eval-samples", type=int, default=0, help="1-D datasets: samples for the W1 evaluation")
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples (PPM images or CSV) with a JSON sidecar")
    s.add_argument("--config", required=True, help="configuration file")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--checkpoint", help="checkpoint written by 'train' (default: untrained weights)")
    s.add_argument("--raw-params", action="store_true", help="use raw instead of EMA parameters")
    s.add_argument("--num", type=int, default=4, help="number of samples")
    s.add_argument("--label", type=int, default=0, help="class label for conditional models")
    s.add_argument("--steps", type=int, help="override num_steps")
    s.add_argument("--guidance", type=float, help="override the guidance scale")
    s.set_defaults(func=cmd_sample)

    for name, helptext, func in (("flops", "FLOP and parameter report", cmd_flops),
                                 ("memory", "skip-connection memory report (JSON)", cmd_memory)):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="configuration file (overrides --preset)")
        s.add_argument("--preset", default="small", choices=("small", "flop_heavy"))
        s.add_argument("--res", type=int, help="input resolution (default: config or 512)")
        if name == "flops":
            s.add_argument("--format", default="json", choices=("json", "table"))
        else:
            s.add_argument("--batch", type=int, default=1)
        s.add_argument("--out", help="output file (default: stdout)")
        s.set_defaults(func=func)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        for attr in ("config", "resume", "checkpoint"):
            _check_file(getattr(args, attr, None), attr.replace("_", " "))
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"pixdiff {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"pixdiff {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
