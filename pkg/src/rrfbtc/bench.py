"""Monte-Carlo experiment runners behind ``rrfbtc bench`` and the acceptance suite.

Trial ``t`` of a cell uses seed ``seed + t``. Inside a trial the factor draw,
noise and sampling mask use the independent streams ``[seed, 0]``, ``[seed, 1]``
and ``[seed, 2]``.
"""

import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import datagen, grid, metrics, predict, vi

FACTORS, NOISE, MASK = 0, 1, 2


def stream(seed, which):
    return [int(seed), which]


def discrete_problem(dims, rank, sr, snr, seed):
    truth, factors = datagen.gen_random_cp(dims, rank, stream(seed, FACTORS))
    noisy = datagen.add_noise_snr(truth, snr, stream(seed, NOISE))
    mask = datagen.sample_mask(truth.shape, sr, stream(seed, MASK))
    return truth, noisy, mask


def continuous_problem(size, sr, snr, seed):
    coords, truth, fn = datagen.gen_continuous(size, stream(seed, FACTORS))
    noisy = datagen.add_noise_snr(truth, snr, stream(seed, NOISE))
    mask = datagen.sample_mask(truth.shape, sr, stream(seed, MASK))
    return coords, truth, noisy, mask


def cells_to_points(coords, values, cells):
    index = np.column_stack([c[i] for c, i in zip(coords, cells)])
    return index, values[cells]


def run_discrete_trial(dims, rank, sr, snr, seed, cfg):
    truth, noisy, mask = discrete_problem(dims, rank, sr, snr, seed)
    start = time.perf_counter()
    state = vi.fit(grid.from_dense(noisy, mask), cfg)
    est = state.reconstruct()
    return {
        "rrse": metrics.rrse(truth, est),
        "rmse": metrics.rmse(truth, est),
        "rank": state.rank,
        "iterations": state.iteration,
        "seconds": time.perf_counter() - start,
        "rank_trace": list(state.rank_trace),
        "elbo_trace": list(state.elbo_trace),
    }


def run_continuous_trial(size, sr, snr, seed, cfg, noise=predict.DEFAULT_NOISE):
    """Fit on the sampled cells and score predictions at every held-out cell."""
    coords, truth, noisy, mask = continuous_problem(size, sr, snr, seed)
    index, values = cells_to_points(coords, noisy, np.nonzero(mask))
    start = time.perf_counter()
    state = vi.fit(grid.allocate(grid.ObservationSet(index, values)), cfg)
    q_index, q_truth = cells_to_points(coords, truth, np.nonzero(mask == 0))
    estimate = predict.predict_values(state, q_index, noise)
    return {
        "rrse": metrics.rrse(q_truth, estimate),
        "rmse": metrics.rmse(q_truth, estimate),
        "rank": state.rank,
        "iterations": state.iteration,
        "seconds": time.perf_counter() - start,
        "rank_trace": list(state.rank_trace),
        "elbo_trace": list(state.elbo_trace),
    }


def run_user_trial(obs, heldout_index, heldout_values, cfg, noise=predict.DEFAULT_NOISE):
    start = time.perf_counter()
    state = vi.fit(grid.allocate(obs), cfg)
    estimate = predict.predict_values(state, heldout_index, noise)
    return {
        "rrse": metrics.rrse(heldout_values, estimate),
        "rmse": metrics.rmse(heldout_values, estimate),
        "rank": state.rank,
        "iterations": state.iteration,
        "seconds": time.perf_counter() - start,
        "rank_trace": list(state.rank_trace),
        "elbo_trace": list(state.elbo_trace),
    }


def _guarded(job):
    fn, kwargs = job
    try:
        return {"ok": True, **fn(**kwargs)}
    except Exception as exc:  # a failed trial is recorded, the sweep goes on
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc()}


def run_jobs(jobs, threads=1):
    """Run ``(fn, kwargs)`` jobs, optionally in worker processes; results keep job order."""
    if threads <= 1 or len(jobs) <= 1:
        return [_guarded(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_guarded, jobs))


def build_jobs(experiment, opts, cfg):
    """Expand an experiment grid into ``(cell, trial, seed, job)`` tuples."""
    out = []
    trials = range(opts["trials"])
    seed = opts["seed"]
    if experiment in ("synth-discrete", "synth-continuous"):
        for sr in opts["srs"]:
            for snr in opts["snrs"]:
                for t in trials:
                    cell = {"sr": sr, "snr": snr}
                    if experiment == "synth-discrete":
                        kw = dict(dims=opts["dims"], rank=opts["rank"], sr=sr, snr=snr, seed=seed + t, cfg=cfg)
                        out.append((cell, t, seed + t, (run_discrete_trial, kw)))
                    else:
                        kw = dict(size=opts["size"], sr=sr, snr=snr, seed=seed + t, cfg=cfg)
                        out.append((cell, t, seed + t, (run_continuous_trial, kw)))
    elif experiment == "rank-sweep":
        sr, snr = opts["srs"][0], opts["snrs"][0]
        for r0 in opts["rank_inits"]:
            c = replace(cfg, rank_init=r0)
            for t in trials:
                kw = dict(dims=opts["dims"], rank=opts["rank"], sr=sr, snr=snr, seed=seed + t, cfg=c)
                out.append(({"rank_init": r0, "sr": sr, "snr": snr}, t, seed + t, (run_discrete_trial, kw)))
    elif experiment == "kernel-sweep":
        sr, snr = opts["srs"][0], opts["snrs"][0]
        for h in opts["lengthscales"]:
            c = replace(cfg, kernels=tuple(replace(k, lengthscale=h) for k in cfg.kernels))
            for t in trials:
                cell = {"lengthscale": h, "sr": sr, "snr": snr}
                if opts.get("data") is not None:
                    obs, q_index, q_values = opts["data"]
                    kw = dict(obs=obs, heldout_index=q_index, heldout_values=q_values, cfg=c)
                    out.append((cell, t, seed + t, (run_user_trial, kw)))
                else:
                    kw = dict(size=opts["size"], sr=sr, snr=snr, seed=seed + t, cfg=c)
                    out.append((cell, t, seed + t, (run_continuous_trial, kw)))
    else:
        raise ValueError(f"unknown experiment {experiment!r}")
    return out


def aggregate(rows, true_rank=None):
    """Group per-trial rows by cell and summarise RRSE, RMSE and rank."""
    cells = {}
    for row in rows:
        cells.setdefault(tuple(sorted(row["cell"].items())), []).append(row)
    table = []
    for key, group in cells.items():
        ok = [r for r in group if r["ok"]]
        entry = dict(key)
        entry["trials"] = len(group)
        entry["failed"] = len(group) - len(ok)
        for name in ("rrse", "rmse", "rank", "seconds"):
            vals = np.array([r[name] for r in ok], dtype=float)
            entry[f"{name}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            entry[f"{name}_std"] = float(vals.std()) if len(vals) else float("nan")
        if true_rank is not None:
            entry["rank_hits"] = sum(1 for r in ok if r["rank"] == true_rank)
        table.append(entry)
    return table
