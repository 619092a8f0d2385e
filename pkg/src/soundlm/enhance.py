"""Training losses for the waveform enhancement stage, as pure functions.

Every loss comes with a hand-derived gradient (``*_grad``) with respect to
the generated side, finite-difference checked in the tests. Magnitudes and
mel energies are floored at ``FLOOR`` before any ratio or logarithm; the
losses are differentiable away from those floors.

Conventions fixed here (the reference formulas leave them open):

* both multi-resolution STFT terms act on the complex spectra: spectral
  convergence is a complex Frobenius ratio, and the log-ratio term is the
  *mean* modulus of the complex log of the bin ratio (log-magnitude gap
  plus principal phase difference), so a sign flip is visible;
* the phase part of a bin is counted only when both magnitudes clear the
  floor -- the phase of a sub-floor bin is numerical noise;
* mel energies are power spectra (squared magnitudes) through the bank, so
  scaling a waveform by 10 shifts every log10 mel bin by exactly 2;
* feature-matching terms are mean(|real - fake|) / mean(|real|) per head
  and layer, averaged over all of them.
"""

from dataclasses import dataclass

import numpy as np

from . import dsp
from .errors import ConfigError, InputError

FLOOR = 1e-7


@dataclass
class SpectralConfig:
    fft_sizes: tuple = (64, 128, 256)
    mel_banks: tuple = ((128, 8), (256, 16))  # (n_fft, n_mels) per scale
    sample_rate: int = 8000

    def __post_init__(self):
        if len(set(self.fft_sizes)) != len(self.fft_sizes):
            raise ConfigError("FFT sizes must be distinct")
        for n in self.fft_sizes:
            if n & (n - 1):
                raise ConfigError(f"FFT size {n} is not a power of two")

    def hop(self, n_fft):
        return n_fft // 4


@dataclass
class LatentStats:
    mean: np.ndarray
    logvar: np.ndarray
    weight: float = 1e-4

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.logvar = np.asarray(self.logvar, dtype=np.float64)
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.logvar))):
            raise InputError("latent statistics must be finite")


def _check_pair(x, y, cfg):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InputError("waveform length mismatch")
    if x.shape[-1] < max(cfg.fft_sizes):
        raise InputError("waveforms shorter than the largest FFT size")
    return x, y


def _ratio_terms(zx, zy):
    """Per-bin complex-log gap |log(zx/zy)| with floored magnitudes."""
    rx = np.abs(zx)
    ry = np.abs(zy)
    mag_gap = np.log(np.maximum(rx, FLOOR)) - np.log(np.maximum(ry, FLOOR))
    phase_live = (rx > FLOOR) & (ry > FLOOR)
    raw = np.angle(zx) - np.angle(zy)
    raw = np.mod(raw + np.pi, 2.0 * np.pi) - np.pi  # principal difference
    phase_gap = np.where(phase_live, raw, 0.0)
    return rx, ry, mag_gap, phase_gap, np.sqrt(mag_gap**2 + phase_gap**2)


def mrstft_loss(x, xhat, cfg=None):
    """Sum over resolutions of spectral convergence + mean |complex log ratio|."""
    cfg = cfg or SpectralConfig()
    x, xhat = _check_pair(x, xhat, cfg)
    total = 0.0
    for n_fft in cfg.fft_sizes:
        hop = cfg.hop(n_fft)
        zx = dsp.stft(x, n_fft, hop)
        zy = dsp.stft(xhat, n_fft, hop)
        total += np.linalg.norm(zx - zy) / max(np.linalg.norm(zx), FLOOR)
        *_, gap = _ratio_terms(zx, zy)
        total += float(np.mean(gap))
    return float(total)


def mrstft_loss_grad(x, xhat, cfg=None):
    """d mrstft_loss / d xhat (complex-pair chain through the STFT)."""
    cfg = cfg or SpectralConfig()
    x, xhat = _check_pair(x, xhat, cfg)
    grad = np.zeros_like(xhat)
    for n_fft in cfg.fft_sizes:
        hop = cfg.hop(n_fft)
        zx = dsp.stft(x, n_fft, hop)
        zy = dsp.stft(xhat, n_fft, hop)
        diff = zy - zx
        num = np.linalg.norm(diff)
        g = np.zeros_like(zy)
        if num > 0:
            g += diff / (num * max(np.linalg.norm(zx), FLOOR))
        rx, ry, mag_gap, phase_gap, gap = _ratio_terms(zx, zy)
        live = gap > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            d_lnry = np.where(live & (ry > FLOOR), -mag_gap / gap, 0.0)
            d_thetay = np.where(live, -phase_gap / gap, 0.0)
        ry_safe = np.maximum(ry, FLOOR)
        phase = np.where(ry > 0, zy / ry_safe, 1.0)
        g += phase * (d_lnry / ry_safe + 1j * d_thetay / ry_safe) / gap.size
        grad += dsp.stft_adjoint(g, xhat.shape[-1], n_fft, hop)
    return grad


def stereo_mrstft_loss(x_gt, xhat, cfg=None):
    """MR-STFT on the sum channel plus the difference channel."""
    cfg = cfg or SpectralConfig()
    x_gt = np.asarray(x_gt, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x_gt.ndim != 2 or x_gt.shape[0] != 2 or xhat.shape != x_gt.shape:
        raise InputError("stereo loss expects matching (2, T) inputs")
    return mrstft_loss(x_gt[0] + x_gt[1], xhat[0] + xhat[1], cfg) + mrstft_loss(
        x_gt[0] - x_gt[1], xhat[0] - xhat[1], cfg
    )


def stereo_mrstft_loss_grad(x_gt, xhat, cfg=None):
    cfg = cfg or SpectralConfig()
    g_sum = mrstft_loss_grad(x_gt[0] + x_gt[1], xhat[0] + xhat[1], cfg)
    g_diff = mrstft_loss_grad(x_gt[0] - x_gt[1], xhat[0] - xhat[1], cfg)
    return np.stack([g_sum + g_diff, g_sum - g_diff])


def _mel_energies(wave, n_fft, hop, n_mels, sample_rate):
    spec = dsp.stft(wave, n_fft, hop)
    power = np.abs(spec) ** 2
    bank = dsp.mel_filterbank(n_mels, n_fft, sample_rate)
    return np.maximum(power @ bank.T, FLOOR), spec, bank


def logmel_loss(x, xhat, cfg=None):
    """Sum over mel scales of the L1 gap between log10 mel energies."""
    cfg = cfg or SpectralConfig()
    x, xhat = _check_pair(x, xhat, cfg)
    total = 0.0
    for n_fft, n_mels in cfg.mel_banks:
        hop = cfg.hop(n_fft)
        mx, _, _ = _mel_energies(x, n_fft, hop, n_mels, cfg.sample_rate)
        my, _, _ = _mel_energies(xhat, n_fft, hop, n_mels, cfg.sample_rate)
        total += float(np.sum(np.abs(np.log10(mx) - np.log10(my))))
    return total


def logmel_loss_grad(x, xhat, cfg=None):
    cfg = cfg or SpectralConfig()
    x, xhat = _check_pair(x, xhat, cfg)
    grad = np.zeros_like(xhat)
    ln10 = np.log(10.0)
    for n_fft, n_mels in cfg.mel_banks:
        hop = cfg.hop(n_fft)
        mx, _, _ = _mel_energies(x, n_fft, hop, n_mels, cfg.sample_rate)
        my, spec_y, bank = _mel_energies(xhat, n_fft, hop, n_mels, cfg.sample_rate)
        raw = (np.abs(spec_y) ** 2) @ bank.T
        d_mel = np.where(raw > FLOOR, -np.sign(np.log10(mx) - np.log10(my)) / (my * ln10), 0.0)
        d_power = d_mel @ bank
        d_spec = d_power * 2.0 * spec_y
        grad += dsp.stft_adjoint(d_spec, xhat.shape[-1], n_fft, hop)
    return grad


def lsgan_losses(real_heads, fake_heads):
    """(discriminator, generator) least-squares losses over K heads.

    Head outputs may be scalars or maps; maps are averaged within the head.
    """
    if len(real_heads) == 0 or len(real_heads) != len(fake_heads):
        raise InputError("need matching, non-empty discriminator head lists")
    k = len(real_heads)
    d_loss = g_loss = 0.0
    for r, f in zip(real_heads, fake_heads):
        r = np.asarray(r, dtype=np.float64)
        f = np.asarray(f, dtype=np.float64)
        d_loss += float(np.mean((r - 1.0) ** 2) + np.mean(f**2))
        g_loss += float(np.mean((f - 1.0) ** 2))
    return d_loss / k, g_loss / k


def lsgan_losses_grad_fake(real_heads, fake_heads):
    """Gradients of both losses w.r.t. each fake head output."""
    k = len(fake_heads)
    d_grads, g_grads = [], []
    for f in fake_heads:
        f = np.asarray(f, dtype=np.float64)
        d_grads.append(2.0 * f / (k * f.size))
        g_grads.append(2.0 * (f - 1.0) / (k * f.size))
    return d_grads, g_grads


def feature_matching_loss(real_feats, fake_feats):
    """Normalized L1 feature gap averaged over heads and layers."""
    if len(real_feats) == 0 or len(real_feats) != len(fake_feats):
        raise InputError("need matching, non-empty feature lists")
    terms = []
    for r_layers, f_layers in zip(real_feats, fake_feats):
        if len(r_layers) != len(f_layers):
            raise InputError("layer count mismatch between real and fake features")
        for r, f in zip(r_layers, f_layers):
            r = np.asarray(r, dtype=np.float64)
            f = np.asarray(f, dtype=np.float64)
            if r.shape != f.shape:
                raise InputError("feature map shape mismatch")
            terms.append(np.mean(np.abs(r - f)) / np.mean(np.abs(r)))
    return float(np.mean(terms))


def feature_matching_loss_grad_fake(real_feats, fake_feats):
    n_terms = sum(len(layers) for layers in real_feats)
    grads = []
    for r_layers, f_layers in zip(real_feats, fake_feats):
        row = []
        for r, f in zip(r_layers, f_layers):
            r = np.asarray(r, dtype=np.float64)
            f = np.asarray(f, dtype=np.float64)
            row.append(-np.sign(r - f) / (r.size * np.mean(np.abs(r)) * n_terms))
        grads.append(row)
    return grads


def kl_gauss(stats):
    """KL(N(mu, sigma^2) || N(0, I)) with sigma^2 = exp(logvar)."""
    var = np.exp(stats.logvar)
    return float(0.5 * np.sum(stats.mean**2 + var - stats.logvar - 1.0))


def kl_gauss_grad(stats):
    """(d/d mean, d/d logvar)."""
    return stats.mean.copy(), 0.5 * (np.exp(stats.logvar) - 1.0)


class ToyDiscriminator:
    """Fixed, seeded multi-head feature extractor for exercising the
    adversarial and feature-matching losses in tests."""

    def __init__(self, heads=3, layers=2, width=12, window=64, seed=0):
        rng = np.random.default_rng(seed)
        self.window = window
        self.weights = []
        for _ in range(heads):
            chain = [rng.normal(scale=0.5, size=(window, width))]
            chain += [rng.normal(scale=0.5, size=(width, width)) for _ in range(layers - 1)]
            self.weights.append(chain)

    def __call__(self, wave):
        wave = np.asarray(wave, dtype=np.float64)
        n = (wave.shape[-1] // self.window) * self.window
        frames = wave[:n].reshape(-1, self.window)
        scores, feats = [], []
        for chain in self.weights:
            h = frames
            layer_feats = []
            for w in chain:
                h = np.tanh(h @ w)
                layer_feats.append(h)
            feats.append(layer_feats)
            scores.append(h.mean(axis=1))
        return scores, feats
