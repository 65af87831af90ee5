"""Command-line interface: ``rrfbtc {synth,fit,predict,eval,bench}``.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O failure.
"""

import argparse
import csv
import json
import logging
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__, bench, datagen, grid, io, metrics, predict, vi
from .kernels import FAMILIES, CholeskyError, KernelSpec

log = logging.getLogger("rrfbtc")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --- argument helpers ------------------------------------------------------


def int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def mode_lengthscale(text):
    try:
        k, h = text.split(":")
        return int(k), float(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected <mode>:<lengthscale>, got {text!r}")


def rank_init(text):
    if text == "auto":
        return text
    try:
        r = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("rank-init must be a positive integer or 'auto'")
    if r < 1:
        raise argparse.ArgumentTypeError("rank-init must be a positive integer or 'auto'")
    return r


def add_model_flags(p, lengthscale=1.0):
    g = p.add_argument_group("model")
    g.add_argument("--kernel", choices=FAMILIES, default="matern52")
    g.add_argument("--lengthscale", type=float, default=lengthscale)
    g.add_argument("--lengthscale-k", type=mode_lengthscale, action="append", default=[],
                   metavar="K:H", help="per-mode lengthscale override, 1-based mode")
    g.add_argument("--jitter", type=float, default=None)
    g.add_argument("--rank-init", type=rank_init, default="auto")
    g.add_argument("--prune-ratio", type=float, default=1e-4)
    g.add_argument("--max-iters", type=int, default=200)
    g.add_argument("--conv-tol", type=float, default=1e-5)
    g.add_argument("--init", choices=("svd", "random"), default="svd")
    g.add_argument("--hyperprior", type=float_list, default=[1e-3] * 4, metavar="A,B,A0,B0")
    g.add_argument("--tau-init-ratio", type=float, default=100.0)
    g.add_argument("--warmup-sweeps", type=int, default=5)


def model_config(args, ndim):
    if len(args.hyperprior) != 4:
        raise UsageError("--hyperprior needs four values a,b,a0,b0")
    scales = [args.lengthscale] * ndim
    for k, h in args.lengthscale_k:
        if not 1 <= k <= ndim:
            raise UsageError(f"--lengthscale-k mode {k} out of range 1..{ndim}")
        scales[k - 1] = h
    try:
        kernels = tuple(KernelSpec(args.kernel, h, args.jitter) for h in scales)
        return vi.ModelConfig(
            kernels=kernels,
            rank_init=args.rank_init,
            hyper=vi.HyperPriors(*args.hyperprior),
            prune_ratio=args.prune_ratio,
            max_iters=args.max_iters,
            conv_tol=args.conv_tol,
            init=args.init,
            seed=args.seed,
            tau_init_ratio=args.tau_init_ratio,
            warmup_sweeps=args.warmup_sweeps,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def check_model_flags(args):
    """Validate model flags before any input is read, so bad flags are usage errors."""
    model_config(args, max([k for k, _ in args.lengthscale_k], default=1))


# --- manifest --------------------------------------------------------------


def write_manifest(out_dir, command, args, inputs=(), outputs=(), extra=None):
    config = {k: v for k, v in vars(args).items() if k != "func" and not k.startswith("_")}
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "config": json.loads(json.dumps(config, default=str)),
        "seed": getattr(args, "seed", None),
        "started": args._started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "versions": {
            "rrfbtc": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "inputs": {str(p): io.sha256(p) for p in inputs},
        "outputs": {Path(p).name: io.sha256(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    path = Path(out_dir) / f"{command}_manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def write_rows(path, rows, fields=None):
    fields = fields or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# --- commands --------------------------------------------------------------


def cmd_synth(args):
    out = Path(args.out_dir)
    sr, snr, seed = args.sr, args.snr, args.seed
    if args.kind == "random-cp":
        if args.rank is None or args.dims is None:
            raise UsageError("random-cp needs --dims and --rank")
        truth, noisy, mask = bench.discrete_problem(args.dims, args.rank, sr, snr, seed)
        coords = [np.arange(1, d + 1, dtype=float) for d in truth.shape]
    else:
        coords, truth, noisy, mask = bench.continuous_problem(args.size, sr, snr, seed)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "truth.tns", out / "mask.tns", out / "observations.csv"]
    io.write_tensor(files[0], truth)
    io.write_tensor(files[1], mask)
    io.write_points(files[2], *bench.cells_to_points(coords, noisy, np.nonzero(mask)))
    if args.kind == "continuous":
        files.append(out / "heldout.csv")
        io.write_points(files[3], *bench.cells_to_points(coords, truth, np.nonzero(mask == 0)))
    write_manifest(out, "synth", args, outputs=files)
    print(f"wrote {len(files) + 1} files to {out}")


def cmd_fit(args):
    check_model_flags(args)
    obs = io.read_points(args.input)
    if args.merge_tol is not None:
        obs = grid.merge_coordinates(obs, args.merge_tol)
    data = grid.allocate(obs)
    cfg = model_config(args, obs.ndim)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = vi.fit(data, cfg)
    ckpt = out / (args.output or "model.json")
    io.save_checkpoint(ckpt, state)
    trace = out / "elbo_trace.csv"
    write_rows(trace, [{"iteration": i + 1, "elbo": e, "rank": r}
                       for i, (e, r) in enumerate(zip(state.elbo_trace, state.rank_trace))])
    ranks = out / "rank_trace.csv"
    write_rows(ranks, [{"iteration": i + 1, "rank": r} for i, r in enumerate(state.rank_trace)])
    write_manifest(out, "fit", args, inputs=[args.input], outputs=[ckpt, trace, ranks],
                   extra={"final_rank": state.rank, "iterations": state.iteration, "converged": state.converged})
    print(f"grid {'x'.join(map(str, data.shape))}, {data.n_obs} observed cells")
    print(f"final rank {state.rank} after {state.iteration} sweeps (converged={state.converged}); "
          f"noise variance {1.0 / state.tau_mean:.6g}")


def cmd_predict(args):
    state = io.load_checkpoint(args.model)
    query = io.read_query(args.query)
    if query.shape[1] != state.ndim:
        raise UsageError(f"query has {query.shape[1]} index columns, model has {state.ndim} modes")
    pred = predict.predict_factors(state, query, predict.resolve_noise(state, args.predict_noise))
    yhat = predict.values_from_factors(pred)
    extra = None
    if args.with_std:
        extra = {}
        for k in range(state.ndim):
            for r in range(state.rank):
                extra[f"std_mode{k + 1}_r{r + 1}"] = np.sqrt(pred.col_var[k] * pred.row_var[r])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / (args.output or "predictions.csv")
    io.write_points(path, query, yhat, value_name="yhat", extra=extra)
    write_manifest(out, "predict", args, inputs=[args.model, args.query], outputs=[path])
    print(f"wrote {len(yhat)} predictions to {path}")


def _load_values(path, column):
    p = Path(path)
    if p.suffix.lower() in (".pgm", ".ppm"):
        return io.read_image(p), True
    if p.suffix.lower() == ".csv":
        header, _ = io.read_table(p)
        name = column or next((c for c in ("y", "yhat") if c in header), None)
        if name is None:
            raise io.DataFormatError(f"{p}: no 'y' or 'yhat' column")
        return io.read_column(p, name), False
    return io.read_tensor(p), False


def cmd_eval(args):
    truth, t_img = _load_values(args.truth, args.truth_column)
    est, e_img = _load_values(args.estimate, args.estimate_column)
    if truth.shape != est.shape:
        raise UsageError(f"shape mismatch: truth {truth.shape} vs estimate {est.shape}")
    mask = None
    if args.mask:
        mask = io.read_mask(args.mask).astype(bool)
        if mask.shape != truth.shape:
            raise UsageError("mask shape does not match the tensors")
        # score only the cells that were not observed
        truth, est = truth[~mask], est[~mask]
    report = {"rmse": metrics.rmse(truth, est)}
    if np.any(truth != 0):
        report["rrse"] = metrics.rrse(truth, est)
    if t_img or e_img or args.peak is not None:
        peak = args.peak if args.peak is not None else 255.0
        report["psnr"] = metrics.psnr(truth, est, peak)
        if truth.ndim in (2, 3) and mask is None:
            report["ssim"] = metrics.ssim(truth, est, peak)
    for name, value in report.items():
        print(f"{name:>5}  {value:.6g}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / (args.output or "metrics.csv")
    write_rows(path, [{"metric": k, "value": v} for k, v in report.items()])
    inputs = [args.truth, args.estimate] + ([args.mask] if args.mask else [])
    write_manifest(out, "eval", args, inputs=inputs, outputs=[path])


BENCH_DEFAULTS = {
    "synth-discrete": {"srs": [0.2, 0.3], "snrs": [10, 5, 0, -5], "lengthscale": 0.5},
    "synth-continuous": {"srs": [0.1, 0.2], "snrs": [10], "lengthscale": 0.5},
    "rank-sweep": {"srs": [0.3], "snrs": [10], "lengthscale": 0.5},
    "kernel-sweep": {"srs": [0.3], "snrs": [20], "lengthscale": 0.5},
}


def cmd_bench(args):
    defaults = BENCH_DEFAULTS[args.experiment]
    if args.lengthscale is None:
        args.lengthscale = defaults["lengthscale"]
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    opts = {
        "trials": args.trials,
        "seed": args.seed,
        "srs": args.srs or defaults["srs"],
        "snrs": args.snrs or defaults["snrs"],
        "dims": args.dims or [30, 30, 30],
        "rank": args.rank or 10,
        "size": args.size,
        "rank_inits": args.rank_inits,
        "lengthscales": args.lengthscales,
    }
    check_model_flags(args)
    inputs = []
    if args.data:
        if args.experiment != "kernel-sweep" or not args.heldout:
            raise UsageError("--data is only used by kernel-sweep and needs --heldout")
        held = io.read_points(args.heldout)
        opts["data"] = (io.read_points(args.data), held.index, held.values)
        inputs = [args.data, args.heldout]
    if opts.get("data") is not None:
        ndim = opts["data"][0].ndim
    elif args.experiment in ("synth-discrete", "rank-sweep"):
        ndim = len(opts["dims"])
    else:
        ndim = len(opts["size"])
    cfg = model_config(args, ndim)
    jobs = bench.build_jobs(args.experiment, opts, cfg)
    results = bench.run_jobs([j[3] for j in jobs], threads=args.threads)

    rows = []
    for (cell, trial, seed, _), res in zip(jobs, results):
        rows.append({"cell": cell, **cell, "trial": trial, "seed": seed, **res})
    true_rank = opts["rank"] if args.experiment in ("synth-discrete", "rank-sweep") else (
        1 if opts.get("data") is None else None)
    table = bench.aggregate(rows, true_rank=true_rank)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = args.experiment.replace("-", "_")
    cell_keys = list(rows[0]["cell"])
    table_path = out / f"{stem}_table.csv"
    write_rows(table_path, table)
    trial_fields = cell_keys + ["trial", "seed", "ok", "rrse", "rmse", "rank", "iterations", "seconds", "error"]
    trials_path = out / f"{stem}_trials.csv"
    write_rows(trials_path, rows, trial_fields)
    trace_rows = [
        {**r["cell"], "trial": r["trial"], "iteration": i + 1, "rank": rk, "elbo": e}
        for r in rows if r["ok"]
        for i, (rk, e) in enumerate(zip(r["rank_trace"], r["elbo_trace"]))
    ]
    traces_path = out / f"{stem}_traces.csv"
    write_rows(traces_path, trace_rows or [{"iteration": ""}],
               cell_keys + ["trial", "iteration", "rank", "elbo"])
    write_manifest(out, "bench", args, inputs=inputs, outputs=[table_path, trials_path, traces_path])

    for entry in table:
        label = ", ".join(f"{k}={entry[k]}" for k in cell_keys)
        hits = f"  rank=={true_rank} in {entry['rank_hits']}/{entry['trials']}" if "rank_hits" in entry else ""
        print(f"{label}: RRSE {entry['rrse_mean']:.3f}±{entry['rrse_std']:.3f}  "
              f"rank {entry['rank_mean']:.1f}±{entry['rank_std']:.1f}{hits}")
    failed = [r for r in rows if not r["ok"]]
    for r in failed:
        print(f"trial {r['trial']} ({r['cell']}) failed: {r['error']}", file=sys.stderr)
    if failed:
        return EXIT_NUMERIC
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rrfbtc", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--kind", choices=("random-cp", "continuous"), required=True)
    p.add_argument("--dims", type=int_list)
    p.add_argument("--rank", type=int)
    p.add_argument("--size", type=int_list, default=[50, 50, 50])
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--sr", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", parents=[common], help="fit a model to a point-cloud CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--output", help="checkpoint file name inside --out-dir")
    p.add_argument("--merge-tol", type=float)
    add_model_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="predict values at query indices")
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--output")
    p.add_argument("--predict-noise", choices=("jitter", "learned"), default="jitter")
    p.add_argument("--with-std", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="compare an estimate against ground truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth-column")
    p.add_argument("--estimate-column")
    p.add_argument("--mask", help="score only cells where this mask is 0")
    p.add_argument("--peak", type=float)
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="run a Monte-Carlo experiment grid")
    p.add_argument("experiment", choices=tuple(BENCH_DEFAULTS))
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--srs", type=float_list)
    p.add_argument("--snrs", type=float_list)
    p.add_argument("--dims", type=int_list)
    p.add_argument("--rank", type=int)
    p.add_argument("--size", type=int_list, default=[50, 50, 50])
    p.add_argument("--rank-inits", type=int_list, default=[15, 30, 60])
    p.add_argument("--lengthscales", type=float_list, default=[0.5, 1, 5, 10])
    p.add_argument("--data", help="observations CSV for kernel-sweep on user data")
    p.add_argument("--heldout", help="held-out CSV (i1..iK,y) scored in kernel-sweep")
    add_model_flags(p, lengthscale=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args._started = datetime.now(timezone.utc).isoformat()
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rrfbtc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (vi.NumericalError, CholeskyError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"rrfbtc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, io.DataFormatError) as exc:
        print(f"rrfbtc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"rrfbtc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
