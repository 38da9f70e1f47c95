"""Polygon5 synthetic images, PNG I/O and the train/test manifest.

Every image is drawn from its own PCG64 stream seeded with
``SeedSequence([stream_seed, index])``. The training split uses
``stream_seed = seed`` and the test split ``(seed + 2**63) mod 2**64``.
Changing any part of the sampling law must bump ``FORMAT_VERSION``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError

FORMAT_VERSION = 1
PRNG_NAME = "PCG64/SeedSequence"
SPLIT_OFFSET = 2**63
SUPERSAMPLE = 4
MAX_TRIES = 100
MIN_COLOR_DISTANCE = 0.1
MIN_COVERAGE, MAX_COVERAGE = 0.01, 0.90


def _rng(stream_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([stream_seed % 2**64, index])))


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull (monotone chain); collinear points are dropped."""
    pts = sorted(map(tuple, np.asarray(points, dtype=np.float64)))
    if len(pts) < 3:
        return np.array(pts).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1]).reshape(-1, 2)


def polygon_coverage(hull: np.ndarray, side: int, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Fraction of each pixel's subsamples inside the convex polygon ``hull``."""
    offs = (np.arange(supersample) + 0.5) / supersample
    grid = (np.arange(side)[:, None] + offs[None, :]).reshape(-1)
    py, px = np.meshgrid(grid, grid, indexing="ij")
    inside = np.ones(py.shape, dtype=bool)
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        inside &= (b[0] - a[0]) * (px - a[1]) - (b[1] - a[1]) * (py - a[0]) >= 0
    cov = inside.reshape(side, supersample, side, supersample).mean(axis=(1, 3))
    return cov


def _fallback_hull(side: int) -> np.ndarray:
    lo, hi = 0.25 * side, 0.75 * side
    return convex_hull(np.array([[lo, lo], [hi, lo], [lo, hi]]))


def polygon_image(stream_seed: int, index: int, side: int, antialias: bool = True) -> np.ndarray:
    """One Polygon5 image, ``side x side x 3`` floats in [0, 1]."""
    rng = _rng(stream_seed, index)
    background = rng.random(3)
    lo, hi = 0.1 * side, 0.9 * side
    ss = SUPERSAMPLE if antialias else 1
    hull, cov = None, None
    for _ in range(MAX_TRIES):
        k = int(rng.integers(3, 6))
        cand = convex_hull(lo + (hi - lo) * rng.random((k, 2)))
        if len(cand) < 3:
            continue
        c = polygon_coverage(cand, side, ss)
        frac = np.mean(c >= 0.5)
        if MIN_COVERAGE <= frac <= MAX_COVERAGE:
            hull, cov = cand, c
            break
    if hull is None:
        hull = _fallback_hull(side)
        cov = polygon_coverage(hull, side, ss)
    for _ in range(MAX_TRIES):
        foreground = rng.random(3)
        if np.max(np.abs(foreground - background)) >= MIN_COLOR_DISTANCE:
            break
    else:
        foreground = (background + 0.5) % 1.0
    img = background * (1.0 - cov[..., None]) + foreground * cov[..., None]
    return np.clip(img, 0.0, 1.0)


def generate_polygon5(n: int, side: int, seed: int, antialias: bool = True) -> list[np.ndarray]:
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    return [polygon_image(seed, i, side, antialias) for i in range(n)]


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(img: np.ndarray, path) -> None:
    arr = quantize(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            if im.format != "PNG" or im.mode not in ("RGB", "L"):
                raise FormatError(f"{path}: expected 8-bit RGB PNG, got {im.format} {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: {exc}") from exc
    return arr / 255.0


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    n_train: int
    n_test: int
    side: int
    seed: int
    version: int
    train_files: tuple[str, ...]
    test_files: tuple[str, ...]

    def files(self, split: str) -> list[Path]:
        names = {"train": self.train_files, "test": self.test_files}[split]
        return [self.root / f for f in names]

    def load(self, split: str) -> np.ndarray:
        files = self.files(split)
        if not files:
            return np.zeros((0, self.side, self.side, 3))
        return np.stack([read_png(f) for f in files])


MANIFEST_NAME = "manifest.json"


def split_manifest(root, n_train: int, n_test: int, side: int, seed: int) -> DatasetManifest:
    """Write ``train/`` and ``test/`` PNG trees and the manifest under ``root``."""
    root = Path(root)
    listing = {}
    for split, count, stream in (("train", n_train, seed), ("test", n_test, seed + SPLIT_OFFSET)):
        (root / split).mkdir(parents=True, exist_ok=True)
        names = []
        for i in range(count):
            rel = f"{split}/{i:06d}.png"
            write_png(polygon_image(stream, i, side), root / rel)
            names.append(rel)
        listing[split] = names
    meta = {
        "format_version": FORMAT_VERSION,
        "prng": PRNG_NAME,
        "n_train": n_train,
        "n_test": n_test,
        "side": side,
        "seed": seed,
        "train": listing["train"],
        "test": listing["test"],
    }
    (root / MANIFEST_NAME).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return load_manifest(root)


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    meta = json.loads(path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"dataset format version {meta.get('format_version')} unsupported")
    m = DatasetManifest(
        path.parent,
        meta["n_train"],
        meta["n_test"],
        meta["side"],
        meta["seed"],
        meta["format_version"],
        tuple(meta["train"]),
        tuple(meta["test"]),
    )
    for split in ("train", "test"):
        missing = [f for f in m.files(split) if not f.exists()]
        if missing:
            raise FormatError(f"manifest lists missing file {missing[0]}")
    if len(m.train_files) != m.n_train or len(m.test_files) != m.n_test:
        raise FormatError("manifest counts do not match file lists")
    return m


def manifest_hash(root) -> str:
    """SHA-256 over the manifest and every listed file, in listing order."""
    m = load_manifest(root)
    h = hashlib.sha256((m.root / MANIFEST_NAME).read_bytes())
    for split in ("train", "test"):
        for f in m.files(split):
            h.update(f.read_bytes())
    return h.hexdigest()
