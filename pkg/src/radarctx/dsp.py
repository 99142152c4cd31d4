"""ADC cube -> range-azimuth magnitude spectrum."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .config import RadarConfig


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_1d(x, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 FFT along the last axis.

    The inverse includes the 1/N factor, so ``fft_1d(fft_1d(x), True) == x``.
    """
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    out = a[..., _bit_reverse(n)].copy()
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(*out.shape[:-1], n // size, size)
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        size *= 2
    if inverse:
        out /= n
    return out


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


@lru_cache(maxsize=None)
def _windows(rc: RadarConfig):
    return hann(rc.samples_per_chirp), hann(rc.virtual_antennas)


def reference_level(rc: RadarConfig) -> float:
    """Raw peak magnitude of a 1 m^2 scatterer at 1 m sitting on a bin centre."""
    wr, wa = _windows(rc)
    return float(wr.sum() * wa.sum())


def _complex_kernel(window: np.ndarray, nfft: int, offset) -> np.ndarray:
    """DTFT of ``window`` at bin offsets (output bin minus source bin), 1 at zero offset.

    Sample phase is referenced to the window centre, matching the simulator.
    """
    offset = np.asarray(offset, dtype=float)
    n = np.arange(window.size) - window.size // 2
    phase = np.exp(-2j * np.pi * offset[..., None] * n / nfft)
    return (phase @ window) / window.sum()


def range_kernel(rc: RadarConfig, offset, coherent: bool = False) -> np.ndarray:
    """Normalised range point-spread response at (fractional) bin offsets.

    Magnitude by default; ``coherent=True`` keeps the complex value so that
    several sources can be summed the way the FFT sums them.
    """
    k = _complex_kernel(_windows(rc)[0], rc.range_bins, offset)
    return k if coherent else np.abs(k)


def azimuth_kernel(rc: RadarConfig, offset, coherent: bool = False) -> np.ndarray:
    """Normalised azimuth point-spread response at (fractional) bin offsets."""
    k = _complex_kernel(_windows(rc)[1], rc.azimuth_bins, offset)
    return k if coherent else np.abs(k)


def compute_spectrum(adc, rc: RadarConfig) -> np.ndarray:
    """Range-azimuth magnitude spectrum, shape ``(range_bins, azimuth_bins)``.

    Hann + zero-pad + FFT over fast time, then Hann + zero-pad + FFT across
    antennas with the azimuth axis shifted so bin ``azimuth_bins // 2`` is
    boresight. Magnitudes are divided by the fixed :func:`reference_level`.
    """
    adc = np.asarray(adc)
    if adc.shape != (rc.virtual_antennas, rc.samples_per_chirp):
        raise ValueError(f"ADC shape {adc.shape} does not match "
                         f"{(rc.virtual_antennas, rc.samples_per_chirp)}")
    wr, wa = _windows(rc)
    x = np.zeros((rc.virtual_antennas, rc.range_bins), dtype=np.complex128)
    x[:, :rc.samples_per_chirp] = adc * wr
    rng = fft_1d(x)                                   # antennas x range
    y = np.zeros((rc.range_bins, rc.azimuth_bins), dtype=np.complex128)
    y[:, :rc.virtual_antennas] = (rng * wa[:, None]).T
    az = fft_1d(y)
    az = np.roll(az, rc.azimuth_bins // 2, axis=1)
    return (np.abs(az) / reference_level(rc)).astype(np.float32)
