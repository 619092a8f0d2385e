"""Minimal DSP kernel set: radix-2 FFT, one-sided STFT, HTK mel filterbank.

Everything is implemented in-repo on float64/complex128 so results are
bit-reproducible and the adjoint of each linear stage is available for the
loss gradients in :mod:`soundlm.enhance`.
"""

from functools import lru_cache

import numpy as np

from .errors import ConfigError, InputError


@lru_cache(maxsize=None)
def _bit_reversal(n):
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.int64)
    for i in range(n):
        b = 0
        x = i
        for _ in range(bits):
            b = (b << 1) | (x & 1)
            x >>= 1
        rev[i] = b
    return rev


@lru_cache(maxsize=None)
def _twiddles(m):
    half = m // 2
    return np.exp(-2j * np.pi * np.arange(half) / m)


def fft(x):
    """Radix-2 decimation-in-time FFT over the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n & (n - 1) or n < 1:
        raise InputError(f"FFT length {n} is not a power of two")
    y = x[..., _bit_reversal(n)].copy()
    m = 2
    while m <= n:
        half = m // 2
        w = _twiddles(m)
        y = y.reshape(*y.shape[:-1][:], n // m, m)
        even = y[..., :half]
        odd = y[..., half:] * w
        y = np.concatenate([even + odd, even - odd], axis=-1)
        y = y.reshape(*y.shape[:-2], n)
        m *= 2
    return y


def ifft(x):
    x = np.asarray(x, dtype=np.complex128)
    return np.conj(fft(np.conj(x))) / x.shape[-1]


def fft_adjoint(g):
    """Adjoint of ``fft`` as a real-linear map: W^H g."""
    return np.conj(fft(np.conj(g)))


def hann_periodic(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x, n_fft, hop):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("expected a mono waveform")
    if x.shape[0] < n_fft:
        raise InputError(f"waveform shorter than the {n_fft}-point window")
    n_frames = 1 + (x.shape[0] - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(x, n_fft, hop, window=None):
    """One-sided complex STFT, frames on rows, no centering/padding."""
    if window is None:
        window = hann_periodic(n_fft)
    frames = frame_signal(x, n_fft, hop) * window
    return fft(frames)[:, : n_fft // 2 + 1]


def stft_adjoint(grad_bins, length, n_fft, hop, window=None):
    """Map a one-sided spectrum gradient back to the waveform.

    ``grad_bins``: complex (frames, n_fft//2+1) with dL/dRe + i dL/dIm.
    """
    if window is None:
        window = hann_periodic(n_fft)
    n_frames = grad_bins.shape[0]
    full = np.zeros((n_frames, n_fft), dtype=np.complex128)
    full[:, : n_fft // 2 + 1] = grad_bins
    frames = np.real(fft_adjoint(full)) * window
    out = np.zeros(length, dtype=np.float64)
    for i in range(n_frames):
        out[i * hop : i * hop + n_fft] += frames[i]
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(n_mels, n_fft, sample_rate):
    """Triangular HTK-style filters over the one-sided bins; every filter
    is checked to have support."""
    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for j in range(n_mels):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        bank[j] = np.clip(np.minimum(up, down), 0.0, None)
        if not np.any(bank[j] > 0):
            raise ConfigError(
                f"mel filter {j} of {n_mels} has no support at n_fft={n_fft}"
            )
    return bank
