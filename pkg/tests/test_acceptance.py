"""Acceptance suite: one verdict line per criterion, printed at the end of the run.

The desk-scale end-to-end test trains the full model (about 20 minutes on one
CPU core). Set ``SCATGEN_SKIP_DESK=1`` to skip it during development.
"""

import csv
import itertools
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import conv2d_naive, scatter_direct, upsample_direct
from scatgen.cli import main
from scatgen.data import generate_polygon5
from scatgen.embedding import fit_whitening, whiten
from scatgen.scattering import scatter_array, scattering_dims
from scatgen.tensor_nn import (
    backward,
    bilinear_upsample2x,
    bilinear_upsample2x_backward,
    conv2d_symmetric,
    conv2d_symmetric_backward,
    forward_trace,
    init_generator,
    _im2col,
)
from scatgen.training import TrainConfig, load_checkpoint, save_checkpoint, train
from scatgen.wavelet_bank import build_filter_bank, littlewood_paley_bound


def verdict(name, ok, detail):
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    assert ok, f"{name}: {detail}"


# --- formulas ----------------------------------------------------------------


def test_formula_checks():
    t0 = time.perf_counter()
    a4 = scattering_dims(4, 8, 128)[2]
    a5 = scattering_dims(5, 8, 128)[2]
    k4 = scattering_dims(4, 8, 128)[0]
    ok = abs(a4 - 1.63) <= 0.005 and abs(a5 - 0.67) <= 0.005 and 3 * k4 == 1251
    dt = time.perf_counter() - t0
    verdict("formula checks", ok and dt < 1, f"alpha4={a4:.4f} alpha5={a5:.4f} 3K4={3 * k4} in {dt:.3f}s")


# --- scattering oracle ---------------------------------------------------------


def test_scattering_oracle_equivalence():
    bank = build_filter_bank(1, 1, 4)
    bits = np.array(list(itertools.product([0.0, 1.0], repeat=16))).reshape(-1, 4, 4)
    worst = 0.0
    for i in range(0, len(bits), 4096):
        chunk = bits[i : i + 4096]
        worst = max(worst, float(np.max(np.abs(scatter_array(chunk, bank) - scatter_direct(chunk, bank)))))
    verdict("scattering oracle equivalence", len(bits) == 65536 and worst <= 1e-10, f"{len(bits)} images, max err {worst:.2e}")


# --- contraction -------------------------------------------------------------------


def test_contraction_suite():
    bank = build_filter_bank(3, 4, 32)
    rng = np.random.default_rng(2024)
    x = rng.random((100, 32, 32, 3))
    y = rng.random((100, 32, 32, 3))
    sx, sy = scatter_array(x, bank), scatter_array(y, bank)
    num = np.linalg.norm((sx - sy).reshape(100, -1), axis=1)
    den = np.linalg.norm((x - y).reshape(100, -1), axis=1)
    lp = littlewood_paley_bound(bank)
    ok = np.all(num <= den + 1e-9) and lp <= 1 + 1e-12
    verdict("contraction suite", ok, f"max ratio {np.max(num / den):.4f}, LP bound {lp:.6f}")


# --- gradients -------------------------------------------------------------------


def _rel(fd, an):
    return abs(fd - an) / max(abs(an), 1e-12)


def _layer_checks(rng, h=1e-6):
    """Central differences for each layer in isolation; returns the worst relative error."""
    worst = 0.0
    # convolution: input, kernel, bias
    x = rng.standard_normal((2, 6, 6, 3))
    k = rng.standard_normal((7, 7, 3, 4))
    b = rng.standard_normal(4)
    up = rng.standard_normal((2, 6, 6, 4))
    gx, gk, gb = conv2d_symmetric_backward(_im2col(x), x.shape, k, up)
    for arr, grad in ((x, gx), (k, gk), (b, gb)):
        d = rng.standard_normal(arr.shape)
        saved = arr.copy()
        arr += h * d
        fp = np.sum(up * conv2d_symmetric(x, k, b))
        arr[...] = saved - h * d
        fm = np.sum(up * conv2d_symmetric(x, k, b))
        arr[...] = saved
        worst = max(worst, _rel((fp - fm) / (2 * h), np.sum(grad * d)))
    # the fast convolution itself against the loop oracle
    assert np.max(np.abs(conv2d_symmetric(x, k, b) - conv2d_naive(x, k, b))) <= 1e-10
    # upsampling
    x = rng.standard_normal((2, 4, 4, 3))
    up = rng.standard_normal((2, 8, 8, 3))
    d = rng.standard_normal(x.shape)
    fd = (np.sum(up * upsample_direct(x + h * d)) - np.sum(up * upsample_direct(x - h * d))) / (2 * h)
    worst = max(worst, _rel(fd, np.sum(bilinear_upsample2x_backward(up) * d)))
    assert np.allclose(bilinear_upsample2x(x), upsample_direct(x), atol=1e-12)
    return worst


def _smooth_l1(out, target, delta=1e-2):
    r = out - target
    s = np.sqrt(r * r + delta * delta)
    return float(np.sum(s - delta)), r / s


def test_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    layer_err = _layer_checks(rng)

    p = init_generator(64, 128, 3, 0, dtype=np.float64)
    for k, v in p.arrays.items():
        if k.startswith("b"):  # keep every unit away from the ReLU kink
            v[:] = rng.uniform(0.05, 0.2, v.shape)
    z = rng.standard_normal((2, 64))
    target = rng.random((2, 32, 32, 3))
    out, tr = forward_trace(p, z)
    _, up = _smooth_l1(out, target)
    grads, gz = backward(p, z, up, tr)
    base = [m.copy() for m in tr.masks]
    h = 1e-7
    errs, flips = [], 0
    for _ in range(20):
        d = {k: rng.standard_normal(v.shape) for k, v in p.arrays.items()}
        vals, stable = [], True
        for s in (1.0, -1.0):
            q = p.copy()
            for k in q.arrays:
                q.arrays[k] = q.arrays[k] + s * h * d[k]
            o, t = forward_trace(q, z)
            stable &= all(np.array_equal(a, b) for a, b in zip(base, t.masks))
            vals.append(_smooth_l1(o, target)[0])
        if not stable:
            flips += 1
            continue
        errs.append(_rel((vals[0] - vals[1]) / (2 * h), sum(np.sum(grads.arrays[k] * d[k]) for k in d)))
    # the latent gradient along one direction
    dz = rng.standard_normal(z.shape)
    fz = (_smooth_l1(forward_trace(p, z + h * dz)[0], target)[0] - _smooth_l1(forward_trace(p, z - h * dz)[0], target)[0]) / (2 * h)
    errs.append(_rel(fz, np.sum(gz * dz)))
    dt = time.perf_counter() - t0
    worst = max(errs + [layer_err])
    ok = worst <= 1e-4 and len(errs) >= 19 and dt < 300
    verdict("gradient suite", ok, f"layers {layer_err:.1e}, desk generator {max(errs):.1e} over {len(errs)} directions ({flips} skipped at kinks), {dt:.0f}s")


# --- whitening -------------------------------------------------------------------


def test_whitening():
    bank = build_filter_bank(3, 4, 32)
    x = np.stack(generate_polygon5(256, 32, 77))
    s = scatter_array(x, bank).reshape(256, -1)
    w = fit_whitening(s, 64)
    e = whiten(s, w)
    mean_err = float(np.max(np.abs(e.mean(axis=0))))
    cov_err = float(np.max(np.abs(np.cov(e, rowvar=False) - np.eye(64))))
    rng = np.random.default_rng(5)
    pairs = rng.integers(0, 256, (300, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    xd = np.linalg.norm((x[pairs[:, 0]] - x[pairs[:, 1]]).reshape(len(pairs), -1), axis=1)
    upper = True
    for d in (1, 8, 16, 32, 64, 128, 255):
        wd = fit_whitening(s, d)
        proj = (s - wd.mean) @ wd.eigvecs
        pd = np.linalg.norm(proj[pairs[:, 0]] - proj[pairs[:, 1]], axis=1)
        upper &= bool(np.all(pd <= xd + 1e-9))
    ok = mean_err <= 1e-6 and cov_err <= 1e-4 and upper
    verdict("whitening", ok, f"mean {mean_err:.1e}, cov {cov_err:.1e}, upper bound at all d: {upper}")


# --- desk scale --------------------------------------------------------------------


def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    if os.environ.get("SCATGEN_SKIP_DESK"):
        pytest.skip("SCATGEN_SKIP_DESK set")
    root = tmp_path_factory.mktemp("desk")
    ds, ws, run = root / "polygon5", root / "whitening.scgw", root / "train"
    t0 = time.perf_counter()
    assert main(["make-dataset", "--root", str(ds), "--n-train", "1024", "--n-test", "256", "--side", "32", "--seed", "0"]) == 0
    assert main(["fit-embedding", "--dataset", str(ds), "--out", str(ws), "--J", "3", "--Q", "4", "--d", "64"]) == 0
    assert main(["train", "--dataset", str(ds), "--whitening", str(ws), "--out-dir", str(run), "--seed", "0",
                 "--epochs", "60", "--batch-size", "16", "--c0", "128", "--U", "3", "--deterministic"]) == 0
    ev = {}
    for split in ("train", "test"):
        assert main(["eval", "--checkpoint", str(run / "checkpoint.scgn"), "--whitening", str(ws), "--dataset", str(ds),
                     "--split", split, "--out-dir", str(root / f"eval_{split}")]) == 0
        ev[split] = _csv(root / f"eval_{split}" / "eval.csv")[0]
    return {"root": root, "ds": ds, "ws": ws, "ck": run / "checkpoint.scgn", "metrics": _csv(run / "metrics.csv"),
            "eval": ev, "seconds": time.perf_counter() - t0}


def test_desk_scale_end_to_end(desk):
    m = desk["metrics"]
    first, last = float(m[0]["mean_l1"]), float(m[-1]["mean_l1"])
    tr, te = float(desk["eval"]["train"]["mean_psnr"]), float(desk["eval"]["test"]["mean_psnr"])
    ok_a = last <= 0.5 * first
    ok_b = tr >= te
    ok_c = tr >= 20.0
    ok_t = desk["seconds"] <= 30 * 60
    detail = (f"(a) L1 {first:.4f}->{last:.4f} ratio {last / first:.3f}; (b) train {tr:.2f} dB vs test {te:.2f} dB; "
              f"(c) train >= 20 dB; {desk['seconds'] / 60:.1f} min")
    verdict("desk-scale end-to-end", ok_a and ok_b and ok_c and ok_t, detail)


def test_morphing(desk, tmp_path):
    a, b = desk["ds"] / "test" / "000000.png", desk["ds"] / "test" / "000001.png"
    common = ["--checkpoint", str(desk["ck"]), "--whitening", str(desk["ws"])]
    for tag in ("m1", "m2"):
        assert main(["interpolate", *common, "--img-a", str(a), "--img-b", str(b), "--steps", "8", "--out-dir", str(tmp_path / tag)]) == 0
    assert main(["reconstruct", *common, "--images", str(a), str(b), "--out-dir", str(tmp_path / "r")]) == 0
    assert main(["interpolate", *common, "--img-a", str(a), "--img-b", str(a), "--steps", "8", "--out-dir", str(tmp_path / "same")]) == 0
    read = lambda p: p.read_bytes()
    ends = read(tmp_path / "m1" / "frame_000.png") == read(tmp_path / "r" / "000000_rec.png") and read(
        tmp_path / "m1" / "frame_007.png"
    ) == read(tmp_path / "r" / "000001_rec.png")
    const = len({read(tmp_path / "same" / f"frame_{k:03d}.png") for k in range(8)}) == 1
    rerun = all(read(p) == read(tmp_path / "m2" / p.name) for p in sorted((tmp_path / "m1").glob("*.png")))
    verdict("morphing", ends and const and rerun, f"endpoints equal: {ends}, constant path: {const}, re-run identical: {rerun}")


# --- resume --------------------------------------------------------------------------


def test_resume_equivalence(tmp_path):
    x = np.stack(generate_polygon5(64, 32, 0))
    z = np.random.default_rng(0).standard_normal((64, 64))
    cfg = lambda n: TrainConfig(epochs=n, seed=0, deterministic=True)
    straight, _ = train(x, None, None, cfg(3), embeddings=z)
    part, _ = train(x, None, None, cfg(1), embeddings=z)
    save_checkpoint(part, tmp_path / "k.scgn")
    resumed, _ = train(x, None, None, cfg(3), resume=load_checkpoint(tmp_path / "k.scgn"), embeddings=z)
    same = all(np.array_equal(straight.params.arrays[k], resumed.params.arrays[k]) for k in straight.params.arrays)
    same &= all(np.array_equal(straight.adam.m.arrays[k], resumed.adam.m.arrays[k]) for k in straight.params.arrays)
    verdict("resume equivalence", same and straight.adam.t == resumed.adam.t, "k=1 then resume to n=3 vs straight n=3")
