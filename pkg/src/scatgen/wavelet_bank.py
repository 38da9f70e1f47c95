"""Morlet filter bank built in the Fourier domain on a periodic grid.

Wavelets are indexed by scale ``ell`` in ``1..J`` and orientation ``q`` in
``0..Q-1``; the finest wavelet (``ell = 1``) has envelope width ``sigma`` and
central frequency ``xi``, and each further scale halves the frequencies.
The low-pass is a Gaussian of width ``sigma * 2**J``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParameterError

SIGMA = 0.8
XI = 3 * np.pi / 4
ALIASES = range(-2, 3)


@dataclass(frozen=True)
class FilterBank:
    J: int
    Q: int
    grid_size: int
    wavelets: dict[tuple[int, int], np.ndarray]
    lowpass: np.ndarray
    lp_bound: float
    scale: float = 1.0

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self.wavelets)


def _frequency_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    w = 2 * np.pi * np.fft.fftfreq(n)
    return np.meshgrid(w, w, indexing="ij")


def gabor_hat(wx, wy, sigma: float, xi: float, theta: float, slant: float) -> np.ndarray:
    """Unperiodized Fourier transform of a unit-DC Gaussian envelope modulated at ``xi``.

    The spatial envelope is ``exp(-u^T C u)`` with
    ``C = R diag(1, slant**2) R^T / (2 sigma**2)``; its transform is a Gaussian
    with covariance proportional to ``C``'s inverse, centred on ``xi * e_theta``.
    """
    c, s = np.cos(theta), np.sin(theta)
    # coordinates along / across the orientation
    a = c * (wx - xi * c) + s * (wy - xi * s)
    b = -s * (wx - xi * c) + c * (wy - xi * s)
    return np.exp(-0.5 * sigma**2 * (a**2 + b**2 / slant**2))


def _periodize(fn, wx, wy) -> np.ndarray:
    out = np.zeros(wx.shape)
    for mx in ALIASES:
        for my in ALIASES:
            out += fn(wx + 2 * np.pi * mx, wy + 2 * np.pi * my)
    return out


def morlet_hat(n: int, ell: int, theta: float, slant: float) -> np.ndarray:
    """Periodized zero-mean Morlet filter at scale ``ell`` on an ``n x n`` grid."""
    wx, wy = _frequency_grid(n)
    dil = 2.0 ** (ell - 1)
    sigma, xi = SIGMA * dil, XI / dil
    gab = _periodize(lambda x, y: gabor_hat(x, y, sigma, xi, theta, slant), wx, wy)
    env = _periodize(lambda x, y: gabor_hat(x, y, sigma, 0.0, theta, slant), wx, wy)
    beta = gab[0, 0] / env[0, 0]
    out = gab - beta * env
    out[0, 0] = 0.0
    return out.astype(complex)


def gaussian_hat(n: int, J: int) -> np.ndarray:
    wx, wy = _frequency_grid(n)
    sigma = SIGMA * 2.0**J
    g = _periodize(lambda x, y: gabor_hat(x, y, sigma, 0.0, 0.0, 1.0), wx, wy)
    return g / g[0, 0]


def _wavelet_energy(wavelets) -> np.ndarray:
    energy = 0.0
    for psi in wavelets:
        mag2 = np.abs(psi) ** 2
        # |psi(-w)|^2: index negation on the periodic grid
        flipped = np.roll(mag2[::-1, ::-1], 1, axis=(0, 1))
        energy = energy + 0.5 * (mag2 + flipped)
    return energy


def littlewood_paley_sum(bank: FilterBank) -> np.ndarray:
    """Pointwise Littlewood-Paley sum over the frequency grid."""
    wav = _wavelet_energy(bank.wavelets.values()) if bank.wavelets else 0.0
    return np.abs(bank.lowpass) ** 2 + wav


def littlewood_paley_bound(bank: FilterBank) -> float:
    return float(np.max(littlewood_paley_sum(bank)))


def littlewood_paley_lower(bank: FilterBank) -> float:
    """Frame lower bound: the infimum of the Littlewood-Paley sum."""
    return float(np.min(littlewood_paley_sum(bank)))


def _check_params(J: int, Q: int, grid_size: int) -> None:
    if J < 1 or Q < 1:
        raise InvalidParameterError(f"need J >= 1 and Q >= 1, got J={J}, Q={Q}")
    if grid_size < 2**J:
        raise InvalidParameterError(f"grid_size {grid_size} < 2**J = {2 ** J}")
    if grid_size & (grid_size - 1):
        raise InvalidParameterError(f"grid_size {grid_size} is not a power of two")


def build_filter_bank(J: int, Q: int, grid_size: int) -> FilterBank:
    """Build the normalized Morlet bank for scales ``1..J`` and ``Q`` angles.

    The low-pass keeps unit DC gain; every wavelet is multiplied by one common
    constant, the largest one for which the Littlewood-Paley sum stays <= 1.
    """
    _check_params(J, Q, grid_size)
    slant = 4.0 / Q
    raw = {
        (ell, q): morlet_hat(grid_size, ell, q * np.pi / Q, slant)
        for ell in range(1, J + 1)
        for q in range(Q)
    }
    phi = gaussian_hat(grid_size, J)
    phi2 = phi**2
    wav = _wavelet_energy(raw.values())
    mask = wav > 1e-300
    headroom = np.clip(1.0 - phi2[mask], 0.0, None)
    scale = float(np.sqrt(np.min(headroom / wav[mask])))
    wavelets = {k: v * scale for k, v in raw.items()}
    bank = FilterBank(J, Q, grid_size, wavelets, phi, 0.0, scale)
    return replace(bank, lp_bound=littlewood_paley_bound(bank))


def spatial_filters(bank: FilterBank) -> tuple[dict[tuple[int, int], np.ndarray], np.ndarray]:
    """Space-domain filters (inverse DFT of the bank), for debugging and oracles."""
    wav = {k: np.fft.ifft2(v) for k, v in bank.wavelets.items()}
    return wav, np.fft.ifft2(bank.lowpass).real
