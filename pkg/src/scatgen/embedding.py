"""Affine whitening of scattering coefficients and the embedding diagnostics.

``Phi(x) = D_d^{-1/2} Q_d^T (S_J(x) - mu)`` where ``Q_d, D_d`` are the top-d
eigenpairs of the empirical covariance of the flattened coefficients.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import (
    DimensionTooLargeError,
    FormatError,
    InsufficientSamplesError,
    LayoutMismatchError,
)
from .scattering import ScatteringCoeffs, scatter_array
from .wavelet_bank import FilterBank

WHITENING_MAGIC = b"SCGW"
WHITENING_VERSION = 1
RELATIVE_FLOOR = 1e-8
DEGENERATE_DISTANCE = 1e-12
PERCENTILES = (50.0, 90.0, 99.5)


@dataclass(frozen=True)
class WhiteningParams:
    d: int
    mean: np.ndarray
    eigvecs: np.ndarray  # dim x d, orthonormal columns
    eigvals: np.ndarray  # descending, floored
    eps: float
    J: int = 0
    Q: int = 0
    grid_size: int = 0

    @property
    def dim(self) -> int:
        return self.mean.size

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.mean, self.eigvals, self.eigvecs):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def _stack(coeffs) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Flatten coefficients into an ``(n, dim)`` matrix and check layouts agree."""
    if isinstance(coeffs, np.ndarray):
        return coeffs.reshape(len(coeffs), -1).astype(np.float64), (0, 0, 0)
    coeffs = list(coeffs)
    if not coeffs:
        return np.zeros((0, 0)), (0, 0, 0)
    first = coeffs[0]
    layout = (first.J, first.Q, first.grid_size, first.data.shape)
    for i, c in enumerate(coeffs):
        if (c.J, c.Q, c.grid_size, c.data.shape) != layout:
            raise LayoutMismatchError(f"sample {i} has layout {c.data.shape}, expected {first.data.shape}")
    return np.stack([c.flat() for c in coeffs]).astype(np.float64), layout[:3]


def _orthonormal_completion(basis: np.ndarray, total: int) -> np.ndarray:
    """Extend the orthonormal columns of ``basis`` to ``total`` columns, deterministically."""
    dim, have = basis.shape
    if have >= total:
        return basis[:, :total]
    cand = np.concatenate([basis, np.eye(dim)[:, : min(dim, total + have)]], axis=1)
    q, _ = np.linalg.qr(cand)
    extra = q[:, have:total]
    return np.concatenate([basis, extra], axis=1)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def fit_whitening(coeffs, d: int, eps: float | None = None, layout=None) -> WhiteningParams:
    """Fit mean and top-``d`` principal directions of the coefficients.

    ``coeffs`` is a sequence of :class:`ScatteringCoeffs` or an ``(n, ...)``
    array. With fewer samples than dimensions the ``n x n`` Gram matrix is
    decomposed and its eigenvectors lifted. ``eps`` defaults to
    ``1e-8 * largest eigenvalue``. ``layout`` is the ``(J, Q, grid_size)``
    triple to record when fitting from a bare array.
    """
    X, found = _stack(coeffs)
    layout = tuple(layout) if layout is not None else found
    n, dim = X.shape if X.ndim == 2 else (0, 0)
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, got {n}")
    if not 1 <= d <= min(n, dim):
        raise DimensionTooLargeError(f"d={d} must be in [1, min(n={n}, dim={dim})]")
    mean = X.mean(axis=0)
    Xc = X - mean
    if n < dim:
        gram = Xc @ Xc.T / (n - 1)
        vals, U = np.linalg.eigh(gram)
        vals, U = vals[::-1], U[:, ::-1]
        top = max(vals[0], 0.0)
        keep = vals[:d] > max(RELATIVE_FLOOR * top, 1e-300)
        k = int(np.count_nonzero(keep))
        vecs = Xc.T @ U[:, :k] / np.sqrt((n - 1) * vals[:k])
        # re-orthonormalize against round-off in the lift
        vecs, r = np.linalg.qr(vecs)
        vecs = vecs * np.sign(np.diag(r))
        vecs = _orthonormal_completion(vecs, d)
        vals = vals[:d]
    else:
        cov = Xc.T @ Xc / (n - 1)
        vals, vecs = np.linalg.eigh(cov)
        vals, vecs = vals[::-1][:d], vecs[:, ::-1][:, :d]
    vals = np.maximum(vals, 0.0)
    if eps is None:
        eps = max(RELATIVE_FLOOR * float(vals[0]), np.finfo(np.float64).tiny)
    vals = np.maximum(vals, eps)
    vecs = _fix_signs(np.ascontiguousarray(vecs))
    return WhiteningParams(d, mean, vecs, vals, float(eps), *layout)


def whiten(flat: np.ndarray, w: WhiteningParams) -> np.ndarray:
    """Whiten flattened coefficients, ``(..., dim) -> (..., d)``."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape[-1] != w.dim:
        raise LayoutMismatchError(f"coefficient dimension {flat.shape[-1]} != whitening dimension {w.dim}")
    return ((flat - w.mean) @ w.eigvecs) / np.sqrt(w.eigvals)


def embed_coeffs(coeffs, w: WhiteningParams) -> np.ndarray:
    if isinstance(coeffs, ScatteringCoeffs):
        return whiten(coeffs.flat(), w)
    X, _ = _stack(coeffs)
    return whiten(X, w)


def embed(x: np.ndarray, bank: FilterBank, w: WhiteningParams) -> np.ndarray:
    """Embedding of one image, a length-``d`` vector."""
    return embed_images(np.asarray(x)[None], bank, w)[0]


def embed_images(images: np.ndarray, bank: FilterBank, w: WhiteningParams, batch: int = 64) -> np.ndarray:
    images = np.asarray(images)
    out = np.empty((len(images), w.d))
    for i in range(0, len(images), batch):
        s = scatter_array(images[i : i + batch], bank)
        out[i : i + batch] = whiten(s.reshape(len(s), -1), w)
    return out


def save_whitening(w: WhiteningParams, path) -> None:
    header = {"dim": w.dim, "d": w.d, "J": w.J, "Q": w.Q, "grid_size": w.grid_size, "eps": w.eps}
    blobs = [w.mean, w.eigvals, w.eigvecs]
    binio.write_bytes(path, binio.pack(WHITENING_MAGIC, WHITENING_VERSION, header, blobs))


def load_whitening(path) -> WhiteningParams:
    header, body = binio.unpack(binio.read_bytes(path), WHITENING_MAGIC, WHITENING_VERSION)
    dim, d = header["dim"], header["d"]
    mean, off = binio.take(body, 0, (dim,))
    vals, off = binio.take(body, off, (d,))
    vecs, off = binio.take(body, off, (dim, d))
    if off != body.size:
        raise FormatError("trailing bytes after whitening payload")
    return WhiteningParams(
        d,
        mean.astype(np.float64),
        vecs.astype(np.float64),
        vals.astype(np.float64),
        header["eps"],
        header["J"],
        header["Q"],
        header["grid_size"],
    )


# --- diagnostics ---------------------------------------------------------


@dataclass
class LipschitzReport:
    alpha_max: float
    quantile_alpha: dict[float, float]
    n_pairs: int
    upper_ok: bool
    degenerate_pairs: int = 0
    ratios: np.ndarray = field(default=None, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["percentile", "alpha"])
        for p, a in self.quantile_alpha.items():
            wr.writerow([p, _fmt(a)])
        wr.writerow(["max", _fmt(self.alpha_max)])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "inf" if np.isinf(v) else f"{v:.6g}"


def sample_pairs(n: int, n_pairs: int, seed: int) -> np.ndarray:
    """``n_pairs`` uniformly drawn index pairs with distinct members."""
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=n_pairs)
    j = rng.integers(0, n - 1, size=n_pairs)
    j = j + (j >= i)
    return np.stack([i, j], axis=1)


def bilipschitz_report(
    images,
    bank: FilterBank,
    w: WhiteningParams,
    n_pairs: int,
    seed: int,
    pairs: np.ndarray | None = None,
) -> LipschitzReport:
    """Distance ratios ``|x - x'| / |P Phi_bar(x) - P Phi_bar(x')|`` over random pairs.

    The projection is the unwhitened one onto the top-d principal directions.
    Pairs with a projected distance below 1e-12 are counted as degenerate and
    contribute an infinite ratio.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) < 2:
        raise InsufficientSamplesError("need at least 2 images")
    if pairs is None:
        pairs = sample_pairs(len(images), n_pairs, seed)
    pairs = np.asarray(pairs)
    flat = scatter_array(images, bank).reshape(len(images), -1)
    proj = (flat - w.mean) @ w.eigvecs
    xd = np.linalg.norm((images[pairs[:, 0]] - images[pairs[:, 1]]).reshape(len(pairs), -1), axis=1)
    pd = np.linalg.norm(proj[pairs[:, 0]] - proj[pairs[:, 1]], axis=1)
    degenerate = pd < DEGENERATE_DISTANCE
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(degenerate, np.inf, xd / np.where(degenerate, 1.0, pd))
    with np.errstate(invalid="ignore"):
        # interpolating next to an infinite ratio yields nan; report it as inf
        quant = {p: float(np.nan_to_num(np.percentile(ratios, p), nan=np.inf)) for p in PERCENTILES}
    return LipschitzReport(
        alpha_max=float(np.max(ratios)),
        quantile_alpha=quant,
        n_pairs=len(pairs),
        upper_ok=bool(np.all(pd <= xd + 1e-9)),
        degenerate_pairs=int(np.count_nonzero(degenerate)),
        ratios=ratios,
    )


@dataclass
class MomentStats:
    skewness: np.ndarray
    excess_kurtosis: np.ndarray
    median_abs_skew: float
    median_abs_kurtosis: float
    degenerate: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["dimension", "skewness", "excess_kurtosis"])
        for i, (s, k) in enumerate(zip(self.skewness, self.excess_kurtosis)):
            wr.writerow([i, f"{s:.6g}", f"{k:.6g}"])
        wr.writerow(["median_abs", f"{self.median_abs_skew:.6g}", f"{self.median_abs_kurtosis:.6g}"])
        return buf.getvalue()


def moment_stats(vectors: np.ndarray) -> MomentStats:
    """Per-dimension skewness and excess kurtosis of ``(n, d)`` samples."""
    v = np.asarray(vectors, dtype=np.float64)
    c = v - v.mean(axis=0)
    var = (c**2).mean(axis=0)
    flat = var <= 1e-24 * max(1.0, float(np.max(np.abs(v)) ** 2) if v.size else 1.0)
    safe = np.where(flat, 1.0, var)
    skew = np.where(flat, np.nan, (c**3).mean(axis=0) / safe**1.5)
    kurt = np.where(flat, np.nan, (c**4).mean(axis=0) / safe**2 - 3.0)
    ok = ~flat
    med_s = float(np.median(np.abs(skew[ok]))) if ok.any() else float("nan")
    med_k = float(np.median(np.abs(kurt[ok]))) if ok.any() else float("nan")
    return MomentStats(skew, kurt, med_s, med_k, bool(flat.any()))


def gaussianization_report(coeffs, w: WhiteningParams) -> MomentStats:
    emb = embed_coeffs(coeffs, w)
    if len(emb) < 8:
        raise InsufficientSamplesError("need at least 8 samples for moment statistics")
    return moment_stats(emb)
