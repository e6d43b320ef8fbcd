"""WAV ingestion and Whisper-style log-Mel features."""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
LOG_FLOOR = float(np.log(1e-10))


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class MelFeatures:
    frames: np.ndarray  # [n_frames, n_mels]
    n_mels: int
    hop: int
    win: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.frames, delimiter=",", fmt="%.6f")
        return buf.getvalue()


def decode_wav(data: bytes) -> Waveform:
    """Decode RIFF PCM16 mono at 16 kHz. No resampling or downmixing."""
    try:
        with wave.open(io.BytesIO(data), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise AudioFormatError(f"not a PCM WAV file: {e}") from e
    if width != 2:
        raise AudioFormatError(f"unsupported sample width: {8 * width} bit (need PCM16)")
    if channels != 1:
        raise AudioFormatError(f"unsupported channel count: {channels} (need mono)")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"unsupported sample rate: {rate} Hz (need {SAMPLE_RATE})")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def load_wav(path: str | Path) -> Waveform:
    return decode_wav(Path(path).read_bytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_center_freqs(n_mels: int, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Unnormalised HTK triangular filters, shape [n_mels, n_fft // 2 + 1]."""
    fft_freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_freqs - lo) / (ctr - lo)
    down = (hi - fft_freqs) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def log_mel(w: Waveform, n_mels: int = 80, win: int = 400, hop: int = 160,
            n_fft: int = 400) -> MelFeatures:
    x = np.asarray(w.samples, dtype=np.float64)
    if x.shape[0] < win:
        raise ValueError(f"clip too short: {x.shape[0]} samples < window {win}")
    if n_fft < win:
        raise ValueError("n_fft must be >= win")
    n_frames = 1 + (x.shape[0] - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win + 1)[:-1]  # periodic Hann
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(n_mels, n_fft, w.sample_rate).T
    logmel = np.log(np.maximum(mel, 1e-10))
    return MelFeatures(logmel, n_mels, hop, win)
