"""File formats: plain tensors, point-cloud CSV, checkpoints and PGM/PPM images."""

import csv
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .grid import ObservationSet
from .kernels import KernelSpec, factorize, GramMatrix, kernel_matrix
from .vi import FitState, HyperPriors, ModelConfig

CHECKPOINT_FORMAT = "rrfbtc-checkpoint"
CHECKPOINT_VERSION = 1


class DataFormatError(ValueError):
    """An input file could not be parsed."""


def _fmt(x):
    return repr(float(x))


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- plain tensors ---------------------------------------------------------


def write_tensor(path, t):
    """First line ``K d_1 .. d_K``; then the values in C order, one per line."""
    t = np.asarray(t)
    with open(path, "w") as fh:
        fh.write(" ".join(str(v) for v in (t.ndim,) + t.shape) + "\n")
        if np.issubdtype(t.dtype, np.integer):
            fh.write("\n".join(str(int(v)) for v in t.ravel()))
        else:
            fh.write("\n".join(_fmt(v) for v in t.ravel()))
        fh.write("\n")


def read_tensor(path):
    text = Path(path).read_text().split("\n", 1)
    try:
        head = [int(v) for v in text[0].split()]
        K, dims = head[0], tuple(head[1:])
        if K < 1 or len(dims) != K or min(dims) < 1:
            raise ValueError("bad header")
        values = np.array((text[1] if len(text) > 1 else "").split(), dtype=float)
    except ValueError as exc:
        raise DataFormatError(f"{path}: not a plain tensor file ({exc})") from exc
    if values.size != int(np.prod(dims)):
        raise DataFormatError(f"{path}: expected {int(np.prod(dims))} values, found {values.size}")
    return values.reshape(dims)


def read_mask(path):
    m = read_tensor(path)
    if not np.all((m == 0) | (m == 1)):
        raise DataFormatError(f"{path}: mask values must be 0 or 1")
    return m.astype(np.int8)


# --- point-cloud CSV -------------------------------------------------------


def write_points(path, index, values=None, value_name="y", extra=None):
    """CSV with header ``i1..iK[,value_name][,extra columns]``."""
    index = np.atleast_2d(np.asarray(index, dtype=float))
    header = [f"i{k + 1}" for k in range(index.shape[1])]
    cols = [index]
    if values is not None:
        header.append(value_name)
        cols.append(np.asarray(values, dtype=float).reshape(-1, 1))
    if extra:
        for name, col in extra.items():
            header.append(name)
            cols.append(np.asarray(col, dtype=float).reshape(len(index), -1))
    table = np.hstack(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([_fmt(v) for v in row])


def read_table(path):
    """Return ``(header, float array)`` for a numeric CSV with a header row."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric field ({exc})") from exc
    if data.size and data.shape[1] != len(header):
        raise DataFormatError(f"{path}: rows do not match the header width")
    return header, data.reshape(-1, len(header))


def _index_columns(header, path):
    idx = [j for j, h in enumerate(header) if h.startswith("i") and h[1:].isdigit()]
    if not idx or [header[j] for j in idx] != [f"i{k + 1}" for k in range(len(idx))]:
        raise DataFormatError(f"{path}: header must start with i1..iK")
    return idx


def read_points(path):
    header, data = read_table(path)
    idx = _index_columns(header, path)
    if "y" not in header:
        raise DataFormatError(f"{path}: missing value column 'y'")
    if len(data) == 0:
        raise DataFormatError(f"{path}: no observations")
    return ObservationSet(data[:, idx], data[:, header.index("y")])


def read_query(path):
    header, data = read_table(path)
    idx = _index_columns(header, path)
    if len(data) == 0:
        raise DataFormatError(f"{path}: no query points")
    return data[:, idx]


def read_column(path, name):
    header, data = read_table(path)
    if name not in header:
        raise DataFormatError(f"{path}: no column {name!r}")
    return data[:, header.index(name)]


# --- checkpoints -----------------------------------------------------------


def config_to_dict(cfg):
    d = asdict(cfg)
    d["kernels"] = [asdict(k) for k in cfg.kernels]
    return d


def config_from_dict(d):
    d = dict(d)
    d["kernels"] = tuple(KernelSpec(**k) for k in d["kernels"])
    d["hyper"] = HyperPriors(**d["hyper"])
    return ModelConfig(**d)


def save_checkpoint(path, state):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(state.config),
        "rank": state.rank,
        "iteration": state.iteration,
        "converged": state.converged,
        "coord_sets": [s.tolist() for s in state.coord_sets],
        "jitters": [g.jitter for g in state.grams],
        "means": [m.tolist() for m in state.means],
        "covariances": [c.tolist() for c in state.covs],
        "gamma": {"shape": state.a_gamma.tolist(), "rate": state.b_gamma.tolist()},
        "tau": {"shape": state.a_tau, "rate": state.b_tau},
        "elbo_trace": list(state.elbo_trace),
        "rank_trace": list(state.rank_trace),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_checkpoint(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"{path}: not an rrfbtc checkpoint")
    cfg = config_from_dict(doc["config"])
    coord_sets = [np.array(s, dtype=float) for s in doc["coord_sets"]]
    grams = []
    for k, (coords, jitter) in enumerate(zip(coord_sets, doc["jitters"])):
        sigma = kernel_matrix(cfg.kernel_for(k), coords, coords)
        sigma = 0.5 * (sigma + sigma.T)
        chol, delta = factorize(sigma, jitter)
        grams.append(GramMatrix(coords=coords, sigma=sigma, chol=chol, jitter=delta))
    rank = doc["rank"]
    means = [np.array(m, dtype=float).reshape(len(c), rank) for m, c in zip(doc["means"], coord_sets)]
    covs = [np.array(c, dtype=float).reshape(rank, len(s), len(s)) for c, s in zip(doc["covariances"], coord_sets)]
    return FitState(
        coord_sets=coord_sets,
        grams=grams,
        means=means,
        covs=covs,
        a_gamma=np.array(doc["gamma"]["shape"], dtype=float),
        b_gamma=np.array(doc["gamma"]["rate"], dtype=float),
        a_tau=float(doc["tau"]["shape"]),
        b_tau=float(doc["tau"]["rate"]),
        config=cfg,
        iteration=doc["iteration"],
        elbo_trace=list(doc["elbo_trace"]),
        rank_trace=list(doc["rank_trace"]),
        converged=doc["converged"],
    )


# --- images ----------------------------------------------------------------


def _tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos + 1


def read_image(path):
    """Binary PGM (P5) or PPM (P6) with maxval 255; returns float array (H, W[, 3])."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: only binary PGM/PPM images are supported")
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DataFormatError(f"{path}: maxval must be 255")
    channels = 1 if magic == b"P5" else 3
    pixels = np.frombuffer(buf, dtype=np.uint8, count=w * h * channels, offset=pos)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return pixels.reshape(shape).astype(float)


def write_image(path, img):
    img = np.clip(np.rint(np.asarray(img, dtype=float)), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError("image must be (H, W) or (H, W, 3)")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
