from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spoofqa.corpus import (Key, ParseError, Protocol, SamplingSpec, Split, SynthSpec,
                            Utterance, load_manifest, parse_protocol, read_protocol,
                            serialize_protocol, subsample, synth_generate)
from spoofqa.frontend import load_wav

from conftest import table2_train_text


def test_parse_bonafide_line():
    p = parse_protocol("LA_0079 LA_T_1138215 - - bonafide\n", "/audio")
    (u,) = p.utterances
    assert u.key is Key.BONAFIDE
    assert u.system_id == "-"
    assert u.speaker_id == "LA_0079"
    assert u.audio_path == Path("/audio/LA_T_1138215.wav")


def test_parse_spoof_line():
    (u,) = parse_protocol("LA_0079 LA_T_1271820 - A01 spoof").utterances
    assert u.key is Key.SPOOF
    assert u.system_id == "A01"


def test_parse_extension_and_split():
    p = parse_protocol("S U - - bonafide", "r", split=Split.DEV, ext=".flac")
    assert p.split is Split.DEV
    assert p.utterances[0].audio_path == Path("r/U.flac")


def test_parse_skips_blank_lines_and_keeps_order():
    text = "\nA u3 - - bonafide\n\n  \nB u1 - A02 spoof\nC u2 - - bonafide\n"
    p = parse_protocol(text)
    assert [u.utt_id for u in p] == ["u3", "u1", "u2"]


@pytest.mark.parametrize("line,lineno", [
    ("A u1 - - bonafide\nA u2 - bonafide", 2),
    ("A u1 - - bonafide extra", 1),
    ("A u1 - - genuine", 1),
    ("A u1 - - Bonafide", 1),
    ("A u1 - - bonafide\nB u1 - A01 spoof", 2),
])
def test_parse_errors_cite_line(line, lineno):
    with pytest.raises(ParseError) as e:
        parse_protocol(line)
    assert e.value.lineno == lineno
    assert f"line {lineno}" in str(e.value)


def test_table2_train_counts():
    p = parse_protocol(table2_train_text())
    assert p.counts() == (2580, 22800)
    assert len(p) == 25380


_ids = st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ_0123456789", min_size=1, max_size=8)


@st.composite
def protocols(draw, max_size=60):
    n = draw(st.integers(0, max_size))
    ids = draw(st.lists(_ids, min_size=n, max_size=n, unique=True))
    utts = []
    for uid in ids:
        fake = draw(st.booleans())
        spk = draw(_ids)
        system = draw(st.sampled_from(["A01", "A07", "A19"])) if fake else "-"
        utts.append(Utterance(uid, spk, system, Key.SPOOF if fake else Key.BONAFIDE,
                              Path(".") / f"{uid}.wav"))
    return Protocol(Split.TRAIN, utts)


@given(protocols())
def test_serialize_parse_roundtrip(p):
    assert parse_protocol(serialize_protocol(p), ".") == p


@given(protocols(max_size=80).filter(lambda p: len(p) > 0),
       st.integers(1, 100), st.integers(0, 2**64 - 1))
def test_subsample_exact_counts(p, k, seed):
    n_real, n_fake = p.counts()
    out = subsample(p, SamplingSpec(k, seed))
    assert out.counts() == (n_real // k, n_fake // k)
    # retained items keep their file order
    pos = {u.utt_id: i for i, u in enumerate(p)}
    kept = [pos[u.utt_id] for u in out]
    assert kept == sorted(kept)
    assert subsample(p, SamplingSpec(k, seed)) == out


@given(protocols().filter(lambda p: len(p) > 0), st.integers(0, 2**32))
def test_subsample_k1_is_identity(p, seed):
    assert Counter(subsample(p, SamplingSpec(1, seed)).utterances) == Counter(p.utterances)


@pytest.mark.parametrize("k,expected", [(4, (645, 5700)), (8, (322, 2850)),
                                        (16, (161, 1425)), (128, (20, 178))])
def test_subsample_table2(k, expected):
    p = parse_protocol(table2_train_text())
    assert subsample(p, SamplingSpec(k, seed=3)).counts() == expected


def test_subsample_k_larger_than_class():
    p = parse_protocol("A a - - bonafide\nB b - A01 spoof\nC c - A01 spoof\n")
    assert subsample(p, SamplingSpec(2)).counts() == (0, 1)
    assert len(subsample(p, SamplingSpec(10))) == 0


def test_subsample_is_uniform_within_class():
    # each of 10 bonafide items should be kept about half the time at k=2
    p = parse_protocol("".join(f"S u{i} - - bonafide\n" for i in range(10)))
    hits = Counter()
    for seed in range(2000):
        hits.update(u.utt_id for u in subsample(p, SamplingSpec(2, seed)))
    freq = np.array([hits[f"u{i}"] for i in range(10)]) / 2000
    assert np.all(np.abs(freq - 0.5) < 0.05)


def test_subsample_seed_changes_selection():
    p = parse_protocol(table2_train_text())
    a = subsample(p, SamplingSpec(16, 0))
    b = subsample(p, SamplingSpec(16, 1))
    assert a.counts() == b.counts()
    assert a.utterances != b.utterances


def test_subsample_rejects_empty_and_bad_k():
    with pytest.raises(ValueError):
        subsample(Protocol(Split.TRAIN, []), SamplingSpec(2))
    with pytest.raises(ValueError):
        SamplingSpec(0)


def test_manifest_basic(tmp_path):
    p = load_manifest("a,x.wav,bonafide\n")
    assert p.split is Split.EVAL
    assert p.counts() == (1, 0)
    assert p.utterances[0].audio_path == Path("x.wav")
    assert load_manifest("a,x.wav,spoof", base_dir=tmp_path).utterances[0].audio_path == tmp_path / "x.wav"


def test_manifest_empty():
    assert len(load_manifest("")) == 0


def test_manifest_in_the_wild_counts():
    rows = [f"r{i},r{i}.wav,bonafide" for i in range(19963)]
    rows += [f"f{i},f{i}.wav,spoof" for i in range(11816)]
    assert load_manifest("\n".join(rows)).counts() == (19963, 11816)


@pytest.mark.parametrize("text,lineno", [("a,x.wav\n", 1), ("a,x.wav,bonafide\nb,y.wav,fake\n", 2)])
def test_manifest_errors(text, lineno):
    with pytest.raises(ParseError) as e:
        load_manifest(text)
    assert e.value.lineno == lineno


def test_synth_empty(tmp_path):
    p = synth_generate(SynthSpec(0, 0), tmp_path)
    assert len(p) == 0
    assert list(tmp_path.iterdir()) == []


def test_synth_deterministic(tmp_path):
    a = synth_generate(SynthSpec(2, 3, seed=7), tmp_path / "a")
    b = synth_generate(SynthSpec(2, 3, seed=7), tmp_path / "b")
    assert [u.utt_id for u in a] == [u.utt_id for u in b]
    for ua, ub in zip(a, b):
        assert ua.audio_path.read_bytes() == ub.audio_path.read_bytes()
    c = synth_generate(SynthSpec(2, 3, seed=8), tmp_path / "c")
    assert a.utterances[0].audio_path.read_bytes() != c.utterances[0].audio_path.read_bytes()


def test_synth_labels_and_format(small_corpus):
    root, p = small_corpus
    assert p.counts() == (8, 8)
    for u in p:
        assert (u.system_id == "-") == (u.key is Key.BONAFIDE)
        w = load_wav(u.audio_path)
        assert w.sample_rate == 16000
        assert len(w) == 16000
        assert 0.25 < np.max(np.abs(w.samples)) <= 0.9 + 1e-4
    # protocol written next to the audio re-reads to the same utterances
    (root / "p.txt").write_text(serialize_protocol(p))
    assert read_protocol(root / "p.txt").utterances == p.utterances


def test_artifact_transform_geometry():
    # on its own 512-sample frame grid: notch bins scaled by 0.05, magnitudes
    # elsewhere kept, phase above 4 kHz scrambled, low band untouched
    from spoofqa.corpus import _vocoder_artifacts
    x = np.random.default_rng(0).standard_normal(512 * 4)
    y = _vocoder_artifacts(x, 16000, np.random.default_rng(1))
    X = np.fft.rfft(x.reshape(4, 512), axis=1)
    Y = np.fft.rfft(y.reshape(4, 512), axis=1)
    f = np.fft.rfftfreq(512, 1 / 16000)
    inner = (f > 0) & (f < 8000)  # a real signal cannot carry a random phase at Nyquist
    notch = (np.abs(f - 250 * np.round(f / 250)) < 35) & inner
    ratio = np.abs(Y) / np.abs(X)
    assert np.allclose(ratio[:, notch], 0.05, atol=1e-9)
    assert np.allclose(ratio[:, ~notch & inner], 1.0, atol=1e-9)
    low = (f <= 4000) & ~notch
    assert np.allclose(Y[:, low], X[:, low], atol=1e-9)
    hi = (f > 4000) & ~notch & inner
    dphase = np.angle(Y[:, hi] / X[:, hi])
    assert np.std(dphase) > 1.0


def test_synth_io_error_names_file(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        synth_generate(SynthSpec(1, 0), blocker / "sub")
