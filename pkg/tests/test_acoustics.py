import math

import numpy as np
import pytest

from bustop.acoustics import (
    MfccConfig,
    WindowTooShort,
    dct_ii,
    frames,
    hz_to_mel,
    mel_energies,
    mel_filterbank,
    mel_to_hz,
    mfcc,
    snr_db,
)
from bustop.models import SAMPLE_RATE

CFG = MfccConfig()


def naive_dct(x: np.ndarray, n_ceps: int) -> np.ndarray:
    n = len(x)
    out = np.empty(n_ceps)
    for k in range(n_ceps):
        scale = math.sqrt(1 / n) if k == 0 else math.sqrt(2 / n)
        out[k] = scale * sum(x[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
    return out


def test_mel_scale_round_trip():
    hz = np.array([0.0, 300.0, 1000.0, 4000.0])
    assert np.allclose(mel_to_hz(hz_to_mel(hz)), hz)
    assert hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.05)


def test_filterbank_shape_and_read_only():
    bank = mel_filterbank(26)
    assert bank.shape == (26, 129)
    assert (bank >= 0).all() and bank.max() <= 1.0
    with pytest.raises(ValueError):
        bank[0, 0] = 1.0


def test_frames_count_and_hop():
    signal = np.arange(8000, dtype=np.float64)
    framed = frames(signal, CFG)
    assert framed.shape == (1 + (8000 - 200) // 80, 200)
    assert framed[1, 0] == 80


def test_mfcc_shape_one_second():
    clip = np.random.default_rng(0).normal(0, 1000, SAMPLE_RATE)
    assert mfcc(clip).shape == (98, 13)


def test_mfcc_window_too_short():
    with pytest.raises(WindowTooShort):
        mfcc(np.zeros(199))


def test_mfcc_silence_is_finite():
    out = mfcc(np.zeros(SAMPLE_RATE))
    assert np.isfinite(out).all()
    # every log energy hits the floor, so only c0 is non-zero
    assert out[0, 0] == pytest.approx(math.log(1e-10) * math.sqrt(26), rel=1e-12)
    assert np.allclose(out[:, 1:], 0.0, atol=1e-9)


def test_mfcc_deterministic():
    clip = np.random.default_rng(1).integers(-32768, 32768, SAMPLE_RATE).astype(np.float64)
    assert np.array_equal(mfcc(clip), mfcc(clip))


def test_dct_matches_naive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = rng.normal(0, 10, 26)
        assert np.allclose(dct_ii(x, 13), naive_dct(x, 13), atol=1e-9, rtol=0)


def test_dct_stage_on_random_clip():
    clip = np.random.default_rng(3).normal(0, 500, SAMPLE_RATE)
    log_energies = np.log(np.maximum(mel_energies(clip, CFG), CFG.log_floor))
    coefficients = mfcc(clip)
    for frame, row in zip(log_energies[:20], coefficients[:20]):
        assert np.allclose(row, naive_dct(frame, 13), atol=1e-9, rtol=0)


def test_one_khz_sine_peaks_in_its_filter():
    n = np.arange(SAMPLE_RATE)
    clip = 10_000 * np.sin(2 * np.pi * 1000 * n / SAMPLE_RATE)
    energies = mel_energies(clip, CFG)
    bin_1k = round(1000 * 256 / SAMPLE_RATE)
    expected = int(mel_filterbank(26)[:, bin_1k].argmax())
    assert (energies.argmax(axis=1) == expected).all()


class TestSnr:
    def test_matches_frame_energy_oracle(self):
        rng = np.random.default_rng(4)
        clip = np.concatenate([rng.normal(0, 50, 4000), rng.normal(0, 3000, 12000)])
        rms = []
        for start in range(0, len(clip) - 200 + 1, 80):
            frame = clip[start : start + 200]
            rms.append(math.sqrt(sum(v * v for v in frame) / 200))
        rms.sort()
        quiet = rms[: math.ceil(len(rms) / 10)]
        floor = sum(quiet) / len(quiet)
        overall = math.sqrt(sum(v * v for v in clip) / len(clip))
        assert snr_db(clip) == pytest.approx(20 * math.log10(overall / floor), abs=1e-6)

    def test_constant_amplitude_is_zero_db(self):
        clip = np.full(4000, 100.0)
        assert snr_db(clip) == pytest.approx(0.0, abs=1e-9)

    def test_needs_ten_frames(self):
        with pytest.raises(WindowTooShort):
            snr_db(np.ones(200 + 8 * 80))
        assert math.isfinite(snr_db(np.ones(200 + 9 * 80)))

    def test_silence_is_finite(self):
        assert snr_db(np.zeros(4000)) == pytest.approx(0.0)


def test_config_rejects_hop_not_below_frame():
    with pytest.raises(AssertionError):
        MfccConfig(frame_len=80, hop=80)
