import numpy as np
import pytest
import torch

from spoofqa.corpus import SynthSpec, synth_generate
from spoofqa.model import ModelConfig, build_model

# Table-2 style counts for ASVspoof2019 LA
TRAIN_REAL, TRAIN_FAKE = 2580, 22800
EVAL_REAL, EVAL_FAKE = 7355, 64578

TINY = ModelConfig(n_mels=80, d=32, n_heads=2, n_enc_layers=1, n_dec_layers=2)


def table2_train_text(seed=0):
    """A 2580/22800 CM protocol with the two classes interleaved at random."""
    rng = np.random.default_rng(seed)
    keys = np.array([0] * TRAIN_REAL + [1] * TRAIN_FAKE)
    rng.shuffle(keys)
    lines = []
    for i, k in enumerate(keys):
        spk = f"LA_{i % 20:04d}"
        if k:
            lines.append(f"{spk} LA_T_{i:07d} - A0{1 + i % 6} spoof")
        else:
            lines.append(f"{spk} LA_T_{i:07d} - - bonafide")
    return "\n".join(lines) + "\n"


def tiny_model(seed=0, dtype=torch.float32, **kw):
    cfg = ModelConfig(**{**TINY.__dict__, **kw})
    return build_model(cfg, seed=seed, dtype=dtype)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """8 real + 8 fake one-second clips."""
    out = tmp_path_factory.mktemp("small")
    p = synth_generate(SynthSpec(8, 8, seed=11), out, prefix="SM")
    return out, p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, echoed again in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
