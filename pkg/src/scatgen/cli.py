"""Command-line pipeline: dataset, embedding fit, training, and the evaluation commands.

Effective configuration is resolved as command line > ``--config`` JSON file >
built-in defaults, and echoed as ``config.json`` into every output directory.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import plotting
from .data import load_manifest, read_png, split_manifest, write_png
from .embedding import (
    bilipschitz_report,
    embed_images,
    fit_whitening,
    gaussianization_report,
    load_whitening,
    save_whitening,
)
from .errors import IncompatibleArtifactsError, InvalidParameterError, ScatgenError
from .scattering import scatter_array
from .tensor_nn import activation_sparsity, forward
from .training import (
    METRICS_HEADER,
    TrainConfig,
    cached_embeddings,
    load_checkpoint,
    psnr,
    save_checkpoint,
    train,
)
from .wavelet_bank import build_filter_bank, littlewood_paley_lower, littlewood_paley_sum

log = logging.getLogger("scatgen")

DEFAULTS = {
    **TrainConfig().to_dict(),
    "n_train": 1024,
    "n_test": 256,
    "root": None,
    "dataset": None,
    "whitening": None,
    "checkpoint": None,
    "resume": None,
    "out": None,
    "out_dir": None,
    "split": "test",
    "images": None,
    "img_a": None,
    "img_b": None,
    "steps": 8,
    "n": 64,
    "n_pairs": 2000,
    "max_images": 512,
    "fast": False,
    "dump_filters": False,
    "threads": None,
}


# --- helpers -------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return str(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(v) for v in r])


def _echo_config(out_dir: Path, config: dict | None) -> None:
    if config is not None:
        (out_dir / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True, default=str) + "\n")


def _prepare_out(out_dir) -> Path:
    if out_dir is None:
        raise InvalidParameterError("an output directory is required (--out-dir)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    if path is None:
        raise InvalidParameterError(f"missing required path: {what}")
    p = Path(path)
    if not p.exists():
        raise InvalidParameterError(f"{what} not found: {p}")
    return p


def _load_pair(ckpt_path, whitening_path):
    ckpt = load_checkpoint(_require(ckpt_path, "checkpoint"))
    w = load_whitening(_require(whitening_path, "whitening"))
    if ckpt.params.d_in != w.d:
        raise IncompatibleArtifactsError(f"latent dimension d: checkpoint {ckpt.params.d_in} vs whitening {w.d}")
    if ckpt.params.side != w.grid_size:
        raise IncompatibleArtifactsError(f"image side: checkpoint {ckpt.params.side} vs whitening {w.grid_size}")
    return ckpt, w


def _bank_for(w):
    return build_filter_bank(w.J, w.Q, w.grid_size)


def decode(params, z: np.ndarray) -> np.ndarray:
    """Generator outputs one latent at a time so results never depend on batching."""
    z = np.atleast_2d(np.asarray(z, dtype=params.dtype))
    return np.stack([forward(params, z[i : i + 1])[0] for i in range(len(z))]) if len(z) else np.zeros((0, params.side, params.side, 3))


def _embed_one_by_one(images, bank, w) -> np.ndarray:
    return embed_images(images, bank, w, batch=1)


def box_muller(n: int, d: int, seed: int) -> np.ndarray:
    """``n x d`` standard normals from a seeded PCG64 stream via Box-Muller."""
    rng = np.random.Generator(np.random.PCG64(seed))
    m = n * d
    half = (m + 1) // 2
    u = rng.random((half, 2))
    u1, u2 = 1.0 - u[:, 0], u[:, 1]  # u1 in (0, 1]
    r = np.sqrt(-2.0 * np.log(u1))
    # interleave the pair outputs so the first k samples do not depend on n
    z = np.stack([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)], axis=1).reshape(-1)[:m]
    return z.reshape(n, d)


def _load_images(source) -> tuple[np.ndarray, list[str]]:
    """Images from PNG paths, or from ``<dataset>:<split>``."""
    items = [source] if isinstance(source, (str, Path)) else list(source)
    files = []
    for item in items:
        if ":" in str(item) and not Path(item).exists():
            root, split = str(item).rsplit(":", 1)
            files += load_manifest(root).files(split)
        else:
            files.append(_require(item, "image"))
    return (np.stack([read_png(f) for f in files]) if files else np.zeros((0, 0, 0, 3))), [Path(f).stem for f in files]


# --- commands ------------------------------------------------------------


def cmd_make_dataset(root, n_train, n_test, side, seed, config=None):
    if root is None:
        raise InvalidParameterError("--root is required")
    m = split_manifest(root, n_train, n_test, side, seed)
    _echo_config(Path(root), config)
    log.info("wrote %d train + %d test images under %s", m.n_train, m.n_test, root)
    return m


def cmd_fit_embedding(dataset, out, J, Q, d, fast=False, config=None):
    m = load_manifest(_require(dataset, "dataset"))
    if out is None:
        raise InvalidParameterError("--out is required")
    bank = build_filter_bank(J, Q, m.side)
    x = m.load("train")
    s = scatter_array(x, bank, fast=fast)
    w = fit_whitening(s, d, layout=(J, Q, m.side))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_whitening(w, out)
    _echo_config(out.parent, config)
    log.info("whitening: dim %d -> d %d, top eigenvalue %.4g", w.dim, w.d, w.eigvals[0])
    return w


def cmd_train(dataset, whitening, out_dir, cfg: TrainConfig, resume=None, config=None):
    m = load_manifest(_require(dataset, "dataset"))
    w = load_whitening(_require(whitening, "whitening"))
    if w.grid_size != m.side or w.d != cfg.d or (w.J, w.Q) != (cfg.J, cfg.Q) or cfg.side != m.side:
        raise IncompatibleArtifactsError(
            f"config (d={cfg.d}, J={cfg.J}, Q={cfg.Q}, side={cfg.side}) vs whitening "
            f"(d={w.d}, J={w.J}, Q={w.Q}, side={w.grid_size})"
        )
    out = _prepare_out(out_dir)
    start = load_checkpoint(_require(resume, "resume checkpoint")) if resume else None
    bank = _bank_for(w)
    x = m.load("train")
    z = cached_embeddings(x, bank, w, m.root / "cache", "train")
    ckpt_path = out / "checkpoint.scgn"

    def on_epoch(ck, row):
        save_checkpoint(ck, ckpt_path)

    ckpt, rows = train(x, bank, w, cfg, resume=start, embeddings=z, on_epoch=on_epoch)
    save_checkpoint(ckpt, ckpt_path)
    metrics = out / "metrics.csv"
    prior = []
    if start is not None and metrics.exists():
        with open(metrics) as fh:
            prior = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= start.epoch]
    all_rows = [{k: (int(r[k]) if k == "epoch" else float(r[k])) for k in METRICS_HEADER} for r in prior] + rows
    _write_csv(metrics, METRICS_HEADER, [[r[k] for k in METRICS_HEADER] for r in all_rows])
    if all_rows:
        plotting.loss_curve(all_rows, out / "loss.png")
    _echo_config(out, config)
    return ckpt, rows


def cmd_reconstruct(checkpoint, whitening, images, out_dir, config=None):
    ckpt, w = _load_pair(checkpoint, whitening)
    x, names = _load_images(images)
    if len(x) and x.shape[1:3] != (w.grid_size, w.grid_size):
        raise IncompatibleArtifactsError(f"image side {x.shape[1]} vs whitening grid {w.grid_size}")
    out = _prepare_out(out_dir)
    recon = decode(ckpt.params, _embed_one_by_one(x, _bank_for(w), w)) if len(x) else x
    values = []
    for name, a, b in zip(names, x, recon):
        write_png(a, out / f"{name}_x.png")
        write_png(b, out / f"{name}_rec.png")
        values.append(psnr(b, a))
    finite = [v for v in values if math.isfinite(v)]
    mean = float(np.mean(values)) if values else float("nan")
    _write_csv(out / "psnr.csv", ("image", "psnr"), [[n, v] for n, v in zip(names, values)] + [["mean", mean]])
    if len(x):
        plotting.side_by_side(x, recon, out / "reconstructions.png")
        if finite:
            plotting.psnr_histogram(finite, out / "psnr_hist.png", "reconstruction PSNR")
    _echo_config(out, config)
    return values, recon


def cmd_sample(checkpoint, n, seed, out_dir, config=None):
    if n <= 0:
        raise InvalidParameterError("refusing to write an empty sample grid (n must be >= 1)")
    ckpt = load_checkpoint(_require(checkpoint, "checkpoint"))
    out = _prepare_out(out_dir)
    z = box_muller(n, ckpt.params.d_in, seed)
    imgs = np.clip(decode(ckpt.params, z), 0.0, 1.0)
    for i, img in enumerate(imgs):
        write_png(img, out / f"sample_{i:04d}.png")
    write_png(plotting.tile(imgs), out / "grid.png")
    _echo_config(out, config)
    return imgs


def cmd_interpolate(checkpoint, whitening, img_a, img_b, steps, out_dir, config=None):
    if steps < 2:
        raise InvalidParameterError("steps must be >= 2")
    ckpt, w = _load_pair(checkpoint, whitening)
    pair, _ = _load_images([img_a, img_b])
    if pair.shape[1:3] != (w.grid_size, w.grid_size):
        raise IncompatibleArtifactsError(f"image side {pair.shape[1]} vs whitening grid {w.grid_size}")
    out = _prepare_out(out_dir)
    za, zb = _embed_one_by_one(pair, _bank_for(w), w)
    weights = [k / (steps - 1) for k in range(steps)]
    z = np.stack([(1.0 - t) * za + t * zb for t in weights])
    frames = decode(ckpt.params, z)
    for k, f in enumerate(frames):
        write_png(f, out / f"frame_{k:03d}.png")
    write_png(plotting.tile(frames, cols=steps), out / "morph.png")
    _echo_config(out, config)
    return frames


def cmd_eval(checkpoint, whitening, dataset, split, out_dir, config=None):
    ckpt, w = _load_pair(checkpoint, whitening)
    m = load_manifest(_require(dataset, "dataset"))
    x = m.load(split)
    if len(x) == 0:
        raise InvalidParameterError(f"split {split!r} is empty")
    out = _prepare_out(out_dir)
    z = _embed_one_by_one(x, _bank_for(w), w)
    recon = decode(ckpt.params, z)
    values = np.array([psnr(a, b) for a, b in zip(recon, x)])
    sparsity = 100.0 * activation_sparsity(ckpt.params, z.astype(ckpt.params.dtype), batch=1)
    row = {
        "split": split,
        "n": len(x),
        "mean_psnr": float(np.mean(values)),
        "median_psnr": float(np.median(values)),
        "sparsity_pct": sparsity,
    }
    _write_csv(out / "eval.csv", list(row), [list(row.values())])
    plotting.psnr_histogram(values, out / f"psnr_{split}.png", f"{split} reconstruction PSNR")
    _echo_config(out, config)
    return row


def cmd_diagnose(whitening, dataset, out_dir, n_pairs=2000, seed=0, max_images=512, dump_filters=False, config=None):
    w = load_whitening(_require(whitening, "whitening"))
    m = load_manifest(_require(dataset, "dataset"))
    out = _prepare_out(out_dir)
    bank = _bank_for(w)
    x = m.load("train")[:max_images]
    summary = []

    lp_sum = littlewood_paley_sum(bank)
    summary.append(("littlewood_paley_sup", bank.lp_bound, bank.lp_bound <= 1 + 1e-9))
    summary.append(("littlewood_paley_inf", littlewood_paley_lower(bank), True))
    plotting.littlewood_paley_map(lp_sum, out / "littlewood_paley.png")

    rng = np.random.default_rng(seed)
    ia = rng.integers(0, len(x), 100)
    ib = (ia + 1 + rng.integers(0, len(x) - 1, 100)) % len(x)
    sa = scatter_array(x[ia], bank).reshape(100, -1)
    sb = scatter_array(x[ib], bank).reshape(100, -1)
    num = np.linalg.norm(sa - sb, axis=1)
    den = np.linalg.norm((x[ia] - x[ib]).reshape(100, -1), axis=1)
    contraction_ok = bool(np.all(num <= den + 1e-9))
    _write_csv(out / "contraction.csv", ("i", "j", "image_dist", "scattering_dist"), zip(ia, ib, den, num))
    summary.append(("contraction_max_ratio", float(np.max(num / den)), contraction_ok))

    rep = bilipschitz_report(x, bank, w, n_pairs, seed)
    (out / "lipschitz.csv").write_text(rep.to_csv())
    plotting.ratio_histogram(rep.ratios, out / "lipschitz_hist.png", rep.quantile_alpha)
    summary.append(("upper_lipschitz", float(rep.n_pairs), rep.upper_ok))
    summary.append(("alpha_99.5", rep.quantile_alpha[99.5], rep.degenerate_pairs == 0))

    s = scatter_array(x, bank)
    g = gaussianization_report(s.reshape(len(s), -1), w)
    (out / "gaussianization.csv").write_text(g.to_csv())
    summary.append(("median_abs_skew", g.median_abs_skew, not g.degenerate))
    summary.append(("median_abs_excess_kurtosis", g.median_abs_kurtosis, not g.degenerate))

    if dump_filters:
        fdir = out / "filters"
        fdir.mkdir(exist_ok=True)
        for (ell, q), f in bank.wavelets.items():
            mag = np.fft.fftshift(np.abs(f))
            write_png(np.repeat((mag / max(mag.max(), 1e-12))[..., None], 3, axis=2), fdir / f"psi_{ell}_{q}.png")
        write_png(np.repeat(np.fft.fftshift(np.abs(bank.lowpass))[..., None], 3, axis=2), fdir / "phi.png")

    _write_csv(out / "summary.csv", ("check", "value", "status"), [[c, v, "pass" if ok else "fail"] for c, v, ok in summary])
    _echo_config(out, config)
    return {c: (v, ok) for c, v, ok in summary}


# --- argument parsing ----------------------------------------------------

_TRAIN_KEYS = list(TrainConfig().to_dict())


def _add(p, *flags, **kw):
    p.add_argument(*flags, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add(common, "--config", dest="config_file", help="JSON config file")
    _add(common, "--seed", type=int)
    _add(common, "--deterministic", action="store_true", help="single-threaded BLAS, fixed reduction order")
    _add(common, "--threads", type=int, help="BLAS thread limit")
    _add(common, "-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="scatgen", description="Generative scattering networks", parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", parents=[common], help="write a Polygon5 dataset")
    _add(p, "--root")
    _add(p, "--n-train", dest="n_train", type=int)
    _add(p, "--n-test", dest="n_test", type=int)
    _add(p, "--side", type=int)

    p = sub.add_parser("fit-embedding", parents=[common], help="fit the whitening of scattering coefficients")
    _add(p, "--dataset")
    _add(p, "--out")
    _add(p, "--J", dest="J", type=int)
    _add(p, "--Q", dest="Q", type=int)
    _add(p, "--d", dest="d", type=int)
    _add(p, "--fast", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train the generator")
    _add(p, "--dataset")
    _add(p, "--whitening")
    _add(p, "--out-dir", dest="out_dir")
    _add(p, "--resume")
    for key in _TRAIN_KEYS:
        if key in ("seed", "deterministic"):
            continue
        typ = type(TrainConfig().to_dict()[key])
        _add(p, f"--{key.replace('_', '-')}", dest=key, type=typ)

    for name, needs_ws in (("reconstruct", True), ("interpolate", True), ("eval", True)):
        p = sub.add_parser(name, parents=[common])
        _add(p, "--checkpoint")
        _add(p, "--whitening")
        _add(p, "--out-dir", dest="out_dir")
        if name == "reconstruct":
            _add(p, "--images", nargs="+", help="PNG files or DATASET:SPLIT")
        elif name == "interpolate":
            _add(p, "--img-a", dest="img_a")
            _add(p, "--img-b", dest="img_b")
            _add(p, "--steps", type=int)
        else:
            _add(p, "--dataset")
            _add(p, "--split", choices=["train", "test"])

    p = sub.add_parser("sample", parents=[common], help="decode Gaussian white noise")
    _add(p, "--checkpoint")
    _add(p, "--n", dest="n", type=int)
    _add(p, "--out-dir", dest="out_dir")

    p = sub.add_parser("diagnose", parents=[common], help="embedding diagnostics")
    _add(p, "--whitening")
    _add(p, "--dataset")
    _add(p, "--out-dir", dest="out_dir")
    _add(p, "--n-pairs", dest="n_pairs", type=int)
    _add(p, "--max-images", dest="max_images", type=int)
    _add(p, "--dump-filters", dest="dump_filters", action="store_true")
    return ap


def resolve_config(args: dict) -> dict:
    """Merge defaults, the optional config file and command-line values."""
    cfg = dict(DEFAULTS)
    path = args.pop("config_file", None)
    if path is not None:
        data = json.loads(Path(_require(path, "config file")).read_text())
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(data)
    cfg.update(args)
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({k: cfg[k] for k in _TRAIN_KEYS})


def run(cfg: dict, command: str):
    echo = {k: v for k, v in cfg.items()}
    echo["command"] = command
    if command == "make-dataset":
        root = cfg["root"] or cfg["dataset"]
        return cmd_make_dataset(root, cfg["n_train"], cfg["n_test"], cfg["side"], cfg["seed"], echo)
    if command == "fit-embedding":
        return cmd_fit_embedding(cfg["dataset"], cfg["out"] or cfg["whitening"], cfg["J"], cfg["Q"], cfg["d"], cfg["fast"], echo)
    if command == "train":
        return cmd_train(cfg["dataset"], cfg["whitening"], cfg["out_dir"], _train_config(cfg), cfg["resume"], echo)
    if command == "reconstruct":
        return cmd_reconstruct(cfg["checkpoint"], cfg["whitening"], cfg["images"], cfg["out_dir"], echo)
    if command == "sample":
        return cmd_sample(cfg["checkpoint"], cfg["n"], cfg["seed"], cfg["out_dir"], echo)
    if command == "interpolate":
        return cmd_interpolate(cfg["checkpoint"], cfg["whitening"], cfg["img_a"], cfg["img_b"], cfg["steps"], cfg["out_dir"], echo)
    if command == "eval":
        return cmd_eval(cfg["checkpoint"], cfg["whitening"], cfg["dataset"], cfg["split"], cfg["out_dir"], echo)
    if command == "diagnose":
        return cmd_diagnose(
            cfg["whitening"], cfg["dataset"], cfg["out_dir"], cfg["n_pairs"], cfg["seed"], cfg["max_images"], cfg["dump_filters"], echo
        )
    raise InvalidParameterError(f"unknown command {command}")


def main(argv=None) -> int:
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    verbose = ns.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(ns)
        threads = 1 if cfg["deterministic"] and cfg["threads"] is None else cfg["threads"]
        limiter = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
        with limiter:
            result = run(cfg, command)
    except ScatgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if command == "eval":
        print(",".join(result), ",".join(_fmt(v) for v in result.values()), sep="\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
