"""Ambient-noise analysis of 8 kHz audio: MFCC extraction and a frame-energy SNR.

MFCC pipeline per frame: Hamming window → |DFT|² over 256 points (zero-padded) → 26
triangular mel filters spanning 0-4000 Hz → natural log with a floor → orthonormal DCT-II,
keeping the first 13 coefficients (coefficient 0 included).

The SNR is a pilot-report statistic only: overall RMS against the mean RMS of the
quietest decile of frames.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .models import SAMPLE_RATE, BustopError

NFFT = 256
MIN_SNR_FRAMES = 10
RMS_FLOOR = 1e-10


@dataclass(frozen=True)
class MfccConfig:
    frame_len: int = 200  # 25 ms
    hop: int = 80  # 10 ms
    n_mel: int = 26
    n_ceps: int = 13
    log_floor: float = 1e-10

    def __post_init__(self):
        assert self.frame_len > self.hop > 0, "frame_len must exceed hop"
        assert self.n_ceps <= self.n_mel, "cannot keep more cepstra than mel filters"
        assert self.frame_len <= NFFT, "frames longer than the DFT would be truncated"


class WindowTooShort(BustopError):
    def __init__(self, samples: int, needed: int) -> None:
        super().__init__(f"audio window of {samples} samples is shorter than {needed}")


def hz_to_mel(hz):
    return 2595 * np.log10(1 + np.asarray(hz) / 700)


def mel_to_hz(mel):
    return 700 * (10 ** (np.asarray(mel) / 2595) - 1)


@functools.cache
def mel_filterbank(n_mel: int = 26, nfft: int = NFFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """(n_mel, nfft//2 + 1) triangular filters with edges evenly spaced in mel from 0 to Nyquist."""
    mel_points = np.linspace(hz_to_mel(0), hz_to_mel(sample_rate / 2), n_mel + 2)
    bins = np.floor((nfft + 1) * mel_to_hz(mel_points) / sample_rate).astype(int)
    bank = np.zeros((n_mel, nfft // 2 + 1))
    for j in range(n_mel):
        lo, mid, hi = bins[j], bins[j + 1], bins[j + 2]
        for i in range(lo, mid):
            bank[j, i] = (i - lo) / (mid - lo)
        for i in range(mid, hi):
            bank[j, i] = (hi - i) / (hi - mid)
    bank.setflags(write=False)
    return bank


def frames(signal: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    """(n_frames, frame_len) view of `signal`; trailing samples that do not fill a frame are dropped."""
    signal = np.asarray(signal, dtype=np.float64)
    if len(signal) < cfg.frame_len:
        raise WindowTooShort(len(signal), cfg.frame_len)
    return np.lib.stride_tricks.sliding_window_view(signal, cfg.frame_len)[:: cfg.hop]


def mel_energies(signal: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    """(n_frames, n_mel) filterbank energies of the Hamming-windowed power spectrum."""
    windowed = frames(signal, cfg) * np.hamming(cfg.frame_len)
    power = np.abs(np.fft.rfft(windowed, NFFT)) ** 2
    return power @ mel_filterbank(cfg.n_mel).T


def dct_ii(log_energies: np.ndarray, n_ceps: int) -> np.ndarray:
    """Orthonormal DCT-II along the last axis, first `n_ceps` coefficients."""
    return dct(log_energies, type=2, axis=-1, norm="ortho")[..., :n_ceps]


def mfcc(signal: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """(n_frames, n_ceps) cepstral coefficients; deterministic and finite for any finite input."""
    energies = mel_energies(signal, cfg)
    return dct_ii(np.log(np.maximum(energies, cfg.log_floor)), cfg.n_ceps)


def snr_db(signal: np.ndarray, cfg: MfccConfig = MfccConfig()) -> float:
    """20·log10 of overall RMS over the noise floor (mean RMS of the quietest 10% of frames)."""
    framed = frames(signal, cfg)
    if len(framed) < MIN_SNR_FRAMES:
        raise WindowTooShort(len(signal), cfg.frame_len + (MIN_SNR_FRAMES - 1) * cfg.hop)
    frame_rms = np.sqrt(np.mean(framed**2, axis=1))
    quietest = np.sort(frame_rms)[: max(1, int(np.ceil(0.1 * len(frame_rms))))]
    floor = max(float(quietest.mean()), RMS_FLOOR)
    overall = max(float(np.sqrt(np.mean(np.asarray(signal, dtype=np.float64) ** 2))), RMS_FLOOR)
    return 20 * np.log10(overall / floor)
