"""Trial lists: ASVspoof CM protocols, CSV manifests, fractional subsampling
and a synthetic real/fake corpus for desk-scale runs.

Protocol line format (one trial per line)::

    SPEAKER_ID UTT_ID GAP SYSTEM_ID KEY
    LA_0079 LA_T_1138215 - - bonafide
    LA_0079 LA_T_1271820 - A01 spoof
"""

from __future__ import annotations

import csv
import enum
import io
import wave
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Raised for malformed protocol or manifest input; carries the line number."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class Key(enum.Enum):
    BONAFIDE = "bonafide"
    SPOOF = "spoof"


class Split(enum.Enum):
    TRAIN = "train"
    DEV = "dev"
    EVAL = "eval"


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    speaker_id: str
    system_id: str
    key: Key
    audio_path: Path


@dataclass
class Protocol:
    split: Split
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def counts(self) -> tuple[int, int]:
        """(n_bonafide, n_spoof)."""
        c = Counter(u.key for u in self.utterances)
        return c[Key.BONAFIDE], c[Key.SPOOF]


@dataclass(frozen=True)
class SamplingSpec:
    k: int
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"sampling denominator must be >= 1, got {self.k}")


@dataclass(frozen=True)
class SynthSpec:
    n_real: int
    n_fake: int
    duration_s: float = 1.0
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        if self.n_real < 0 or self.n_fake < 0:
            raise ValueError("n_real and n_fake must be >= 0")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be > 0")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be > 0")


# ---------------------------------------------------------------------------
# protocol text


def parse_protocol(
    text: str,
    audio_root: str | Path = ".",
    split: Split = Split.TRAIN,
    ext: str = ".wav",
) -> Protocol:
    root = Path(audio_root)
    utts: list[Utterance] = []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ParseError(lineno, f"expected 5 fields, got {len(fields)}")
        speaker, utt_id, _gap, system, key_tok = fields
        try:
            key = Key(key_tok)
        except ValueError:
            raise ParseError(lineno, f"unknown key token {key_tok!r}") from None
        if utt_id in seen:
            raise ParseError(lineno, f"duplicate utterance id {utt_id!r}")
        seen.add(utt_id)
        utts.append(Utterance(utt_id, speaker, system, key, root / f"{utt_id}{ext}"))
    return Protocol(split, utts)


def serialize_protocol(p: Protocol) -> str:
    return "".join(
        f"{u.speaker_id} {u.utt_id} - {u.system_id} {u.key.value}\n" for u in p.utterances
    )


def read_protocol(path: str | Path, audio_root: str | Path | None = None,
                  split: Split = Split.TRAIN, ext: str = ".wav") -> Protocol:
    path = Path(path)
    root = path.parent if audio_root is None else audio_root
    return parse_protocol(path.read_text(), root, split=split, ext=ext)


def load_manifest(text: str, base_dir: str | Path | None = None) -> Protocol:
    """Parse ``utt_id,audio_path,key`` CSV rows into an eval-split protocol.

    Relative audio paths are resolved against ``base_dir`` when given.
    """
    utts: list[Utterance] = []
    reader = csv.reader(io.StringIO(text))
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ParseError(lineno, f"expected 3 CSV columns, got {len(row)}")
        utt_id, audio_path, key_tok = (c.strip() for c in row)
        try:
            key = Key(key_tok)
        except ValueError:
            raise ParseError(lineno, f"unknown key token {key_tok!r}") from None
        path = Path(audio_path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        system = "-" if key is Key.BONAFIDE else "?"
        utts.append(Utterance(utt_id, "-", system, key, path))
    return Protocol(Split.EVAL, utts)


# ---------------------------------------------------------------------------
# ASV@1/k subsampling


def _rng(seed: int) -> np.random.Generator:
    # Philox is counter-based; its stream is fixed by numpy's stability policy.
    return np.random.Generator(np.random.Philox(key=seed))


def subsample(p: Protocol, spec: SamplingSpec) -> Protocol:
    """Keep floor(n/k) utterances of each class, drawn uniformly without
    replacement, in original file order.

    Bonafide indices are drawn first, then spoof, from one Philox stream
    keyed by ``spec.seed``.
    """
    if not p.utterances:
        raise ValueError("cannot subsample an empty protocol")
    rng = _rng(spec.seed)
    keep: list[int] = []
    for key in (Key.BONAFIDE, Key.SPOOF):
        idx = [i for i, u in enumerate(p.utterances) if u.key is key]
        m = len(idx) // spec.k
        if m:
            chosen = rng.permutation(len(idx))[:m]
            keep.extend(idx[j] for j in chosen)
    keep.sort()
    return replace(p, utterances=[p.utterances[i] for i in keep])


# ---------------------------------------------------------------------------
# synthetic corpus

_ARTIFACT_FRAME = 512
_PHASE_CUTOFF_HZ = 4000.0
_NOTCH_PERIOD_HZ = 250.0
_NOTCH_WIDTH_HZ = 70.0
_NOTCH_DEPTH = 0.05


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=float)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / (np.std(x) + 1e-12)


def _voiced_clip(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = rng.uniform(90.0, 300.0)
    n_harm = int(rng.integers(3, 7))
    vib_rate = rng.uniform(3.0, 7.0)
    vib_depth = rng.uniform(0.1, 0.3)
    env = 1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi))
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        amp = rng.uniform(0.3, 1.0) / h
        x += amp * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    x *= env
    x += rng.uniform(0.01, 0.03) * np.max(np.abs(x)) * _pink_noise(n, rng)
    return x


def _vocoder_artifacts(x: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Per-frame phase scrambling above 4 kHz plus a periodic comb notch."""
    n = x.size
    pad = (-n) % _ARTIFACT_FRAME
    frames = np.concatenate([x, np.zeros(pad)]).reshape(-1, _ARTIFACT_FRAME)
    spec = np.fft.rfft(frames, axis=1)
    freqs = np.fft.rfftfreq(_ARTIFACT_FRAME, 1.0 / sr)
    hi = freqs > _PHASE_CUTOFF_HZ
    phase = rng.uniform(0, 2 * np.pi, size=(spec.shape[0], int(hi.sum())))
    spec[:, hi] = np.abs(spec[:, hi]) * np.exp(1j * phase)
    # distance to nearest multiple of the notch period
    dist = np.abs(freqs - _NOTCH_PERIOD_HZ * np.round(freqs / _NOTCH_PERIOD_HZ))
    gain = np.where(dist < _NOTCH_WIDTH_HZ / 2, _NOTCH_DEPTH, 1.0)
    gain[0] = 1.0
    spec *= gain
    return np.fft.irfft(spec, _ARTIFACT_FRAME, axis=1).reshape(-1)[:n]


def _to_pcm16(x: np.ndarray, rng: np.random.Generator) -> bytes:
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (rng.uniform(0.3, 0.9) / peak)
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    return pcm.tobytes()


def write_wav(path: str | Path, pcm: bytes, sample_rate: int) -> None:
    try:
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(sample_rate)
            w.writeframes(pcm)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def synth_generate(spec: SynthSpec, out_dir: str | Path, split: Split = Split.TRAIN,
                   prefix: str = "SYN") -> Protocol:
    """Write ``n_real`` bonafide then ``n_fake`` spoof clips as PCM16 WAVs.

    Clip ``i`` draws from its own stream seeded by ``(spec.seed, i)``, so
    output is a pure function of ``spec``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = int(round(spec.duration_s * spec.sample_rate))
    utts: list[Utterance] = []
    for i in range(spec.n_real + spec.n_fake):
        fake = i >= spec.n_real
        rng = np.random.default_rng([spec.seed, i])
        x = _voiced_clip(n, spec.sample_rate, rng)
        if fake:
            x = _vocoder_artifacts(x, spec.sample_rate, rng)
        utt_id = f"{prefix}_{spec.seed}_{i:05d}"
        path = out / f"{utt_id}.wav"
        write_wav(path, _to_pcm16(x, rng), spec.sample_rate)
        utts.append(Utterance(
            utt_id,
            f"{prefix}_SPK{i % 8}",
            "S01" if fake else "-",
            Key.SPOOF if fake else Key.BONAFIDE,
            path,
        ))
    return Protocol(split, utts)
