"""Key-token scoring, greedy answers, and the zero-shot response protocol."""

from __future__ import annotations

import enum
import logging
import re
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol as TypingProtocol, Sequence

import numpy as np
import torch

from .corpus import Key
from .model import AudioLM
from .trainer import two_way_softmax

log = logging.getLogger(__name__)


class PromptBank:
    """The five zero-shot templates, with or without their answer-format suffix."""

    QUESTIONS = (
        "Is this audio fake or real?",
        "What is the authenticity of this audio?",
        "Can you determine if this audio is fake or real?",
        "Tell me if this audio is a real audio?",
        "Please assess whether this audio recording is fake or real.",
    )
    SUFFIXES = (
        "Answer fake or real.",
        "Answer fake or real.",
        "Answer fake or real.",
        "Answer yes or no.",
        "Answer fake or real.",
    )
    YES_NO = frozenset({4})

    @classmethod
    def get(cls, index: int, with_suffix: bool = True) -> str:
        if not 1 <= index <= len(cls.QUESTIONS):
            raise ValueError(f"prompt index must be in 1..{len(cls.QUESTIONS)}, got {index}")
        q = cls.QUESTIONS[index - 1]
        return f"{q} {cls.SUFFIXES[index - 1]}" if with_suffix else q

    @classmethod
    def is_yes_no(cls, index: int) -> bool:
        return index in cls.YES_NO


# ---------------------------------------------------------------------------
# scoring


def p_fake_from_scores(s_fake: float, s_real: float) -> float:
    return float(two_way_softmax(float(s_fake) - float(s_real)))


def p_fake_from_logits(scores, fake_id: int, real_id: int) -> float:
    s = np.asarray(scores, dtype=np.float64)
    return p_fake_from_scores(s[fake_id], s[real_id])


@torch.no_grad()
def p_fake(model: AudioLM, mel, q: str) -> float:
    """P(Fake) for one clip's log-Mel features under instruction ``q``."""
    model.eval()
    s = model.next_token_scores(model.encode_audio(mel), q)
    tok = model.tokenizer
    return p_fake_from_logits(s.double().numpy(), tok.fake_id, tok.real_id)


@torch.no_grad()
def generate(model: AudioLM, mel, q: str, max_new_tokens: int = 8) -> str:
    """Greedy decode from the answer-free chat, stopping at ``<|im_end|>``."""
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    model.eval()
    tok = model.tokenizer
    seq = model.assemble_chat(model.encode_audio(mel), q)
    out: list[int] = []
    for _ in range(max_new_tokens):
        if len(seq) >= model.cfg.max_seq_len:
            break
        nxt = int(torch.argmax(model.forward(seq)[-1]))
        if nxt == tok.im_end:
            break
        out.append(nxt)
        seq.ids.append(nxt)
        seq.loss_mask.append(False)
    return tok.decode(out)


# ---------------------------------------------------------------------------
# response classification


class Verdict(enum.Enum):
    REAL = "Real"
    FAKE = "Fake"
    NOT_SURE = "Not sure"


class Source(enum.Enum):
    RULE = "rule"
    ADJUDICATOR = "adjudicator"


@dataclass(frozen=True)
class ResponseVerdict:
    verdict: Verdict
    source: Source


_FAKE = re.compile(r"\bfake\b", re.IGNORECASE)
_REAL = re.compile(r"\breal\b", re.IGNORECASE)
_LEAD = re.compile(r"^\W*(yes|no)\b", re.IGNORECASE)


def classify_response(res: str, yes_no: bool = False) -> ResponseVerdict:
    """Rule-based verdict, first matching rule wins:

    1. the word "fake" and not "real"   -> Fake
    2. the word "real" and not "fake"   -> Real
    3. yes/no prompts: leading "yes"    -> Real, leading "no" -> Fake
    4. otherwise                        -> NotSure
    """
    has_fake = bool(_FAKE.search(res))
    has_real = bool(_REAL.search(res))
    if has_fake and not has_real:
        return ResponseVerdict(Verdict.FAKE, Source.RULE)
    if has_real and not has_fake:
        return ResponseVerdict(Verdict.REAL, Source.RULE)
    if yes_no:
        m = _LEAD.match(res)
        if m:
            v = Verdict.REAL if m.group(1).lower() == "yes" else Verdict.FAKE
            return ResponseVerdict(v, Source.RULE)
    return ResponseVerdict(Verdict.NOT_SURE, Source.RULE)


ADJUDICATION_PROMPT = (
    "I want to detect fake audio. This is the answer that I get from a model: <res>. "
    "I need you to determine whether this audio is real or fake. "
    'If this audio is real, answer "Real". If this audio is fake, answer "Fake". '
    'If you can not determine, answer "Not sure".'
)


def adjudication_prompt(res: str) -> str:
    return ADJUDICATION_PROMPT.replace("<res>", res)


class AdjudicatorError(RuntimeError):
    pass


class AdjudicatorInterface(TypingProtocol):
    def complete(self, prompt: str) -> str: ...


class ScriptedAdjudicator:
    """Replays replies from a text file, one per line, in order."""

    def __init__(self, path: str | Path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"adjudicator script not found: {path}")
        self.replies = path.read_text().splitlines()
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> str:
        if len(self.prompts) >= len(self.replies):
            raise AdjudicatorError(f"scripted replies exhausted after {len(self.replies)}")
        self.prompts.append(prompt)
        return self.replies[len(self.prompts) - 1]


class CommandAdjudicator:
    """Runs ``argv`` once per request: prompt on stdin, reply on stdout."""

    def __init__(self, argv: Sequence[str], timeout: float = 60.0):
        self.argv = list(argv)
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        try:
            r = subprocess.run(self.argv, input=prompt, capture_output=True, text=True,
                               timeout=self.timeout, check=True)
        except (OSError, subprocess.SubprocessError) as e:
            raise AdjudicatorError(str(e)) from e
        return r.stdout.strip()


_REPLIES = {"real": Verdict.REAL, "fake": Verdict.FAKE, "not sure": Verdict.NOT_SURE}


def adjudicate(res: str, client: AdjudicatorInterface, retries: int = 2) -> ResponseVerdict:
    """Ask the adjudicator; transport failures are retried, then raised."""
    prompt = adjudication_prompt(res)
    attempts = 0
    while True:
        attempts += 1
        try:
            reply = client.complete(prompt)
            break
        except Exception as e:
            if attempts > retries:
                raise AdjudicatorError(
                    f"adjudicator failed after {attempts} attempts ({retries} retries): {e}"
                ) from e
    norm = reply.strip().strip("\"'.").strip().lower()
    verdict = _REPLIES.get(norm)
    if verdict is None:
        log.warning("unmappable adjudicator reply %r; counting as Not sure", reply)
        verdict = Verdict.NOT_SURE
    return ResponseVerdict(verdict, Source.ADJUDICATOR)


def judge(res: str, client: AdjudicatorInterface | None, yes_no: bool = False) -> ResponseVerdict:
    """Rules first, adjudicator only for rule-level NotSure."""
    v = classify_response(res, yes_no=yes_no)
    if v.verdict is not Verdict.NOT_SURE:
        return v
    if client is None:
        raise AdjudicatorError("response needs adjudication but no adjudicator is configured")
    return adjudicate(res, client)


class Category(enum.Enum):
    TP = "TP"
    TN = "TN"
    FP = "FP"
    FN = "FN"
    FAIL = "Fail"


def categorize(key: Key, verdict: Verdict | ResponseVerdict) -> Category:
    """Real is the positive class: TP = real called real, TN = fake called fake."""
    if isinstance(verdict, ResponseVerdict):
        verdict = verdict.verdict
    if verdict is Verdict.NOT_SURE:
        return Category.FAIL
    if key is Key.BONAFIDE:
        return Category.TP if verdict is Verdict.REAL else Category.FN
    return Category.TN if verdict is Verdict.FAKE else Category.FP
