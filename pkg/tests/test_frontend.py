import io
import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spoofqa.frontend import (LOG_FLOOR, AudioFormatError, Waveform, decode_wav, log_mel,
                              mel_center_freqs, mel_filterbank)


def wav_bytes(samples, rate=16000, channels=1, width=2):
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(np.asarray(samples).astype(f"<i{width}").tobytes())
    return buf.getvalue()


def tone(freq, n=16000, amp=0.5):
    return Waveform(amp * np.sin(2 * np.pi * freq * np.arange(n) / 16000), 16000)


def test_decode_silence():
    w = decode_wav(wav_bytes(np.zeros(16000)))
    assert w.sample_rate == 16000
    assert w.samples.shape == (16000,)
    assert not w.samples.any()


def test_decode_scaling():
    w = decode_wav(wav_bytes([-32768, 0, 16384, 32767]))
    assert w.samples.tolist() == [-1.0, 0.0, 0.5, 32767 / 32768]


@pytest.mark.parametrize("kw,needle", [
    ({"rate": 44100}, "unsupported sample rate"),
    ({"channels": 2}, "channel count"),
    ({"width": 4}, "sample width"),
])
def test_decode_rejects(kw, needle):
    n = 32000 if kw.get("channels") == 2 else 16000
    with pytest.raises(AudioFormatError, match=needle):
        decode_wav(wav_bytes(np.zeros(n), **kw))


def test_decode_garbage():
    with pytest.raises(AudioFormatError):
        decode_wav(b"RIFF....not a wave")


def test_silence_hits_floor():
    m = log_mel(Waveform(np.zeros(16000), 16000))
    assert np.all(m.frames == LOG_FLOOR)
    assert LOG_FLOOR == pytest.approx(math.log(1e-10))


def test_frame_count():
    m = log_mel(tone(440))
    assert m.n_frames == 1 + (16000 - 400) // 160 == 98
    assert m.frames.shape == (98, 80)


@pytest.mark.parametrize("n", [400, 401, 559, 560, 12345])
def test_frame_count_formula(n):
    assert log_mel(Waveform(np.ones(n) * 0.1, 16000), n_mels=40).n_frames == 1 + (n - 400) // 160


def test_too_short():
    with pytest.raises(ValueError, match="too short"):
        log_mel(Waveform(np.zeros(399), 16000))


def naive_log_mel(x, n_mels, win=400, hop=160, sr=16000):
    """Loop-and-formula reference: explicit DFT sums and explicit triangles."""
    n_frames = 1 + (len(x) - win) // hop
    n_bins = win // 2 + 1
    hann = [0.5 - 0.5 * math.cos(2 * math.pi * i / win) for i in range(win)]
    mel = lambda f: 2595 * math.log10(1 + f / 700)
    imel = lambda m: 700 * (10 ** (m / 2595) - 1)
    top = mel(sr / 2)
    edges = [imel(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    k = np.arange(win)
    out = np.zeros((n_frames, n_mels))
    for t in range(n_frames):
        seg = [x[t * hop + i] * hann[i] for i in range(win)]
        power = []
        for b in range(n_bins):
            ang = -2 * np.pi * b * k / win
            re = float(np.dot(seg, np.cos(ang)))
            im = float(np.dot(seg, np.sin(ang)))
            power.append(re * re + im * im)
        for m in range(n_mels):
            lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
            acc = 0.0
            for b in range(n_bins):
                f = b * sr / win
                if lo < f <= c:
                    acc += power[b] * (f - lo) / (c - lo)
                elif c < f < hi:
                    acc += power[b] * (hi - f) / (hi - c)
            out[t, m] = math.log(max(acc, 1e-10))
    return out


def test_matches_naive_reference():
    rng = np.random.default_rng(5)
    x = 0.1 * rng.standard_normal(400 + 160 * 3)
    got = log_mel(Waveform(x, 16000), n_mels=40).frames
    want = naive_log_mel(x, 40)
    assert np.max(np.abs(got - want)) < 1e-8


def test_filterbank_shape_and_peaks():
    fb = mel_filterbank(80, 400)
    assert fb.shape == (80, 201)
    assert fb.min() >= 0 and fb.max() <= 1
    centers = mel_center_freqs(80)
    assert centers[0] > 0 and centers[-1] < 8000
    assert np.all(np.diff(centers) > 0)


@pytest.mark.parametrize("n_mels", [40, 80])
def test_tone_argmax_is_nearest_center(n_mels):
    m = log_mel(tone(1000), n_mels=n_mels)
    nearest = int(np.argmin(np.abs(mel_center_freqs(n_mels) - 1000)))
    assert np.all(np.argmax(m.frames, axis=1) == nearest)


def test_time_shift_covariance():
    x = np.random.default_rng(0).standard_normal(16000) * 0.1
    a = log_mel(Waveform(x, 16000)).frames
    b = log_mel(Waveform(x[160:], 16000)).frames
    assert np.max(np.abs(a[1:1 + b.shape[0]] - b)) < 1e-6


@given(st.floats(0.01, 50.0))
@settings(max_examples=30, deadline=None)
def test_amplitude_scaling_adds_2_ln_c(c):
    x = np.random.default_rng(1).standard_normal(2000) * 0.1
    a = log_mel(Waveform(x, 16000), n_mels=40).frames
    b = log_mel(Waveform(c * x, 16000), n_mels=40).frames
    unfloored = (a > LOG_FLOOR + 1) & (b > LOG_FLOOR + 1)
    assert unfloored.any()
    assert np.allclose(b[unfloored] - a[unfloored], 2 * math.log(c), atol=1e-9)


@given(arrays(np.float64, st.integers(400, 1200),
              elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)))
@settings(max_examples=50, deadline=None)
def test_finite_for_finite_input(x):
    m = log_mel(Waveform(x, 16000), n_mels=40).frames
    assert np.all(np.isfinite(m))
    assert np.all(m >= LOG_FLOOR)


def test_deterministic_and_csv():
    w = tone(300)
    a, b = log_mel(w), log_mel(w)
    assert np.array_equal(a.frames, b.frames)
    rows = a.to_csv().strip().splitlines()
    assert len(rows) == 98 and len(rows[0].split(",")) == 80
