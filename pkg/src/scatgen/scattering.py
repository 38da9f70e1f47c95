"""Order-2 scattering transform S_J computed with FFT-domain circular convolutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import DimensionMismatchError, FormatError
from .wavelet_bank import FilterBank, _check_params

PATH_ORDER_VERSION = 1
COEFFS_MAGIC = b"SCGS"


@dataclass(frozen=True)
class ScatteringCoeffs:
    J: int
    Q: int
    grid_size: int
    data: np.ndarray  # spatial x spatial x (K_J * colors), color-major channels
    path_index: tuple

    @property
    def spatial(self) -> int:
        return self.grid_size >> self.J

    @property
    def channels_per_color(self) -> int:
        return len(self.path_index)

    @property
    def colors(self) -> int:
        return self.data.shape[-1] // len(self.path_index)

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


def path_index(J: int, Q: int) -> tuple:
    """Canonical path order: order 0, then order 1, then order 2 (lexicographic)."""
    first = [(ell, q) for ell in range(1, J + 1) for q in range(Q)]
    second = [(a, b) for a in first for b in first if a[0] < b[0]]
    return ((),) + tuple(first) + tuple(second)


def scattering_dims(J: int, Q: int, grid_size: int) -> tuple[int, int, float]:
    _check_params(J, Q, grid_size)
    k = 1 + Q * J + Q * Q * J * (J - 1) // 2
    return k, grid_size >> J, 2.0 ** (-2 * J) * k


def _as_batch(images: np.ndarray, n: int) -> np.ndarray:
    """(B, n, n[, C]) images -> (B, C, n, n) float64."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[1] != n or x.shape[2] != n:
        raise DimensionMismatchError(f"image batch shape {x.shape} does not match grid {n}x{n}")
    return np.moveaxis(x, -1, 1)


def _lowpass_sub(u_hat: np.ndarray, phi: np.ndarray, step: int) -> np.ndarray:
    return np.fft.ifft2(u_hat * phi).real[..., ::step, ::step]


def scatter_array(images: np.ndarray, bank: FilterBank, fast: bool = False) -> np.ndarray:
    """Scatter a batch ``(B, n, n[, C])`` into ``(B, s, s, K_J * C)``.

    ``fast=True`` runs the subsampled cascade, see :func:`_scatter_fast`.
    """
    x = _as_batch(images, bank.grid_size)
    if fast:
        out = _scatter_fast(x, bank)
    else:
        out = _scatter_exact(x, bank)
    b, c, k = out.shape[:3]
    # (B, C, K, s, s) -> (B, s, s, C*K)
    return np.ascontiguousarray(np.moveaxis(out.reshape(b, c * k, *out.shape[3:]), 1, -1))


def _scatter_exact(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    step = 2**bank.J
    keys = bank.keys()
    phi = bank.lowpass
    x_hat = np.fft.fft2(x)
    chans = [_lowpass_sub(x_hat, phi, step)]
    u1_hat = {}
    for key in keys:
        u1 = np.abs(np.fft.ifft2(x_hat * bank.wavelets[key]))
        u1_hat[key] = np.fft.fft2(u1)
        chans.append(_lowpass_sub(u1_hat[key], phi, step))
    for k1 in keys:
        for k2 in keys:
            if k1[0] < k2[0]:
                u2 = np.abs(np.fft.ifft2(u1_hat[k1] * bank.wavelets[k2]))
                chans.append(_lowpass_sub(np.fft.fft2(u2), phi, step))
    return np.stack(chans, axis=2)


def _fold(f_hat: np.ndarray, factor: int) -> np.ndarray:
    """Spectrum of a signal subsampled by ``factor``: average of the aliases."""
    if factor == 1:
        return f_hat
    n = f_hat.shape[-1]
    m = n // factor
    lead = f_hat.shape[:-2]
    return f_hat.reshape(*lead, factor, m, factor, m).mean(axis=(-4, -2))


def _scatter_fast(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Cascade that keeps |x * psi_ell| at resolution 2**(ell - 2) instead of full size.

    One octave of oversampling relative to the critical rate of the wavelet.
    """
    J, step = bank.J, 2**bank.J
    keys = bank.keys()
    n = bank.grid_size
    x_hat = np.fft.fft2(x)

    def res(ell):
        return 2 ** max(ell - 2, 0)

    def filt(f_hat, factor):
        # periodize a full-grid filter onto the n/factor grid
        m = n // factor
        idx = np.fft.fftfreq(m, 1.0 / m).astype(int) % n
        return f_hat[np.ix_(idx, idx)]

    def lowpass(u_hat, factor):
        rest = step // factor
        return np.fft.ifft2(u_hat * filt(bank.lowpass, factor)).real[..., ::rest, ::rest]

    chans = [lowpass(x_hat, 1)]
    u1_hat = {}
    for key in keys:
        r = res(key[0])
        y_hat = _fold(x_hat * bank.wavelets[key], r)
        u1_hat[key] = np.fft.fft2(np.abs(np.fft.ifft2(y_hat)))
        chans.append(lowpass(u1_hat[key], r))
    for k1 in keys:
        r1 = res(k1[0])
        for k2 in keys:
            if k1[0] < k2[0]:
                r2 = res(k2[0])
                y_hat = _fold(u1_hat[k1] * filt(bank.wavelets[k2], r1), r2 // r1)
                u2_hat = np.fft.fft2(np.abs(np.fft.ifft2(y_hat)))
                chans.append(lowpass(u2_hat, r2))
    return np.stack(chans, axis=2)


def scatter(x: np.ndarray, bank: FilterBank, fast: bool = False) -> ScatteringCoeffs:
    """Scattering coefficients of one image (``n x n`` or ``n x n x C``)."""
    x = np.asarray(x)
    if x.ndim not in (2, 3) or x.shape[:2] != (bank.grid_size, bank.grid_size):
        raise DimensionMismatchError(
            f"image of shape {x.shape} does not match bank grid {bank.grid_size}"
        )
    data = scatter_array(x[None], bank, fast=fast)[0]
    return ScatteringCoeffs(bank.J, bank.Q, bank.grid_size, data, path_index(bank.J, bank.Q))


def scatter_batch(xs, bank: FilterBank, fast: bool = False) -> list[ScatteringCoeffs]:
    out = []
    for i, x in enumerate(xs):
        try:
            out.append(scatter(x, bank, fast=fast))
        except DimensionMismatchError as exc:
            raise DimensionMismatchError(f"image {i}: {exc}") from exc
    return out


def _encode_path(p) -> list:
    return [list(e) if isinstance(e, tuple) else e for e in p]


def _decode_path(p) -> tuple:
    if p and isinstance(p[0], list):
        return tuple(tuple(e) for e in p)
    return tuple(p)


def save_coeffs(coeffs: ScatteringCoeffs, path) -> None:
    header = {
        "J": coeffs.J,
        "Q": coeffs.Q,
        "grid_size": coeffs.grid_size,
        "channels": int(coeffs.data.shape[-1]),
        "spatial": coeffs.spatial,
        "path_order_version": PATH_ORDER_VERSION,
        "path_index": [_encode_path(p) for p in coeffs.path_index],
    }
    binio.write_bytes(path, binio.pack(COEFFS_MAGIC, PATH_ORDER_VERSION, header, [coeffs.data]))


def load_coeffs(path) -> ScatteringCoeffs:
    header, body = binio.unpack(binio.read_bytes(path), COEFFS_MAGIC, PATH_ORDER_VERSION)
    s = header["spatial"]
    data, end = binio.take(body, 0, (s, s, header["channels"]))
    if end != body.size:
        raise FormatError("trailing bytes after coefficient payload")
    paths = tuple(_decode_path(p) for p in header["path_index"])
    return ScatteringCoeffs(header["J"], header["Q"], header["grid_size"], data, paths)
