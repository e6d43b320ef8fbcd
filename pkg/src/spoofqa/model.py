"""Toy audio language model: conv + transformer audio encoder feeding a causal
decoder through continuous embeddings spliced into a chat template.

Chat layout (one row per token position)::

    <|im_start|> user: <Audio> [tau audio rows] </Audio> q... <|im_end|>
    <|im_start|> assistant: [y <|im_end|>]

Logits at position i score the token at position i + 1.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .frontend import MelFeatures
from .lora import Dense

IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
AUDIO_OPEN = "<Audio>"
AUDIO_CLOSE = "</Audio>"
PAD = "<pad>"
UNK = "<unk>"
USER = "user:"
ASSISTANT = "assistant:"
ANSWERS = ("Fake", "Real")

# Word list covering the prompt bank, the fixed answers and common free-text
# replies seen in the zero-shot protocol.
_WORDS = """
Is is this audio fake or real Answer answer What what the authenticity of Can can
you determine if Tell tell me a Please please assess whether recording yes no Yes No
Not not sure I i it It sounds sound seems seem like to be genuine synthetic generated
human voice speech clip spoofed spoof bonafide deepfake machine natural artificial
could might may cannot can't don't t s do know there are that This That which
was were am and but with for in on at by from as so very quite likely probably
unclear unsure uncertain determine determined hard difficult say confident
authentic fabricated manipulated original recorded real-world speaker male female
music noise background silence there's here some any all one two because since
maybe perhaps definitely certainly appears appear true false correct wrong answer
""".split()
_PUNCT = list(".,?!:;'\"-()")

# specials (<...> without spaces), hyphenated words, single punctuation marks
_TOKEN_RE = re.compile(r"<[^<>\s]+>|[A-Za-z0-9]+(?:-[A-Za-z0-9]+)*|[^\w\s]")


class Tokenizer:
    """Word-level tokenizer with fixed special tokens and single-token answers."""

    SPECIALS = (PAD, UNK, IM_START, IM_END, AUDIO_OPEN, AUDIO_CLOSE, USER, ASSISTANT)

    def __init__(self, vocab: Sequence[str]):
        self.vocab = list(vocab)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate tokens in vocabulary")
        for t in self.SPECIALS + ANSWERS:
            if t not in self.index:
                raise ValueError(f"vocabulary lacks required token {t!r}")
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.im_start = self.index[IM_START]
        self.im_end = self.index[IM_END]
        self.audio_open = self.index[AUDIO_OPEN]
        self.audio_close = self.index[AUDIO_CLOSE]
        self.user = self.index[USER]
        self.assistant = self.index[ASSISTANT]
        self.fake_id = self.index["Fake"]
        self.real_id = self.index["Real"]

    @classmethod
    def default(cls, size: int = 512) -> "Tokenizer":
        vocab: list[str] = list(cls.SPECIALS) + list(ANSWERS)
        for w in _WORDS + _PUNCT:
            for piece in _TOKEN_RE.findall(w):
                if piece not in vocab:
                    vocab.append(piece)
        if len(vocab) > size:
            raise ValueError(f"base vocabulary needs {len(vocab)} > {size} entries")
        vocab += [f"<extra_{i}>" for i in range(size - len(vocab))]
        return cls(vocab)

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in _TOKEN_RE.findall(text)]

    def decode(self, ids: Sequence[int]) -> str:
        out = ""
        prev = ""
        for i in ids:
            tok = self.vocab[int(i)]
            glue = (not out or tok in ".,?!:;'" or prev == "'")
            out += tok if glue else " " + tok
            prev = tok
        return out


@dataclass
class ModelConfig:
    n_mels: int = 80
    d: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    vocab_size: int = 512
    max_seq_len: int = 256
    max_audio_len: int = 1500  # encoder rows, i.e. 30 s of audio

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")


class Attention(nn.Module):
    def __init__(self, d: int, n_heads: int, causal: bool):
        super().__init__()
        self.n_heads = n_heads
        self.causal = causal
        self.q = Dense(d, d)
        self.k = Dense(d, d)
        self.v = Dense(d, d)
        self.o = Dense(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        h = self.n_heads

        def split(t):
            return t.view(B, L, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // h)
        if self.causal:
            mask = torch.ones(L, L, dtype=torch.bool, device=x.device).triu(1)
            att = att.masked_fill(mask, float("-inf"))
        y = att.softmax(-1) @ v
        return self.o(y.transpose(1, 2).reshape(B, L, d))


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, causal: bool):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, n_heads, causal)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, 4 * d)
        self.fc2 = nn.Linear(4 * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


def encoded_length(n_frames: int) -> int:
    """Rows produced by the two stride-2 convolutions."""
    return math.ceil(math.ceil(n_frames / 2) / 2)


class AudioEncoder(nn.Module):
    """Two stride-2 convolutions over mel frames, then bidirectional blocks."""

    min_frames = 4

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv1d(cfg.n_mels, cfg.d, 3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(cfg.d, cfg.d, 3, stride=2, padding=1)
        self.pos_emb = nn.Embedding(cfg.max_audio_len, cfg.d)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.n_heads, causal=False)
                                    for _ in range(cfg.n_enc_layers))
        self.ln = nn.LayerNorm(cfg.d)

    @staticmethod
    def normalize(mel: torch.Tensor) -> torch.Tensor:
        # 80 dB dynamic range below the clip peak, then per-clip standardisation
        mel = torch.maximum(mel, mel.amax(dim=(-2, -1), keepdim=True) - 18.42)
        mu = mel.mean(dim=(-2, -1), keepdim=True)
        sd = mel.std(dim=(-2, -1), keepdim=True)
        return (mel - mu) / (sd + 1e-5)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """``mel: [B, T, n_mels]`` -> ``[B, tau, d]``."""
        if mel.shape[-2] < self.min_frames:
            raise ValueError(f"need >= {self.min_frames} mel frames, got {mel.shape[-2]}")
        x = self.normalize(mel).transpose(1, 2)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x)).transpose(1, 2)
        if x.shape[1] > self.pos_emb.num_embeddings:
            raise ValueError(f"clip encodes to {x.shape[1]} rows > {self.pos_emb.num_embeddings}")
        x = x + self.pos_emb.weight[: x.shape[1]]
        for b in self.blocks:
            x = b(x)
        return self.ln(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.n_heads, causal=True)
                                    for _ in range(cfg.n_dec_layers))
        self.ln_f = nn.LayerNorm(cfg.d)
        self.lm_head = Dense(cfg.d, cfg.vocab_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.pos_emb.weight[: x.shape[1]]
        for b in self.blocks:
            x = b(x)
        return self.lm_head(self.ln_f(x))


AUDIO_SLOT = -1


@dataclass
class ChatSequence:
    """Token ids with ``AUDIO_SLOT`` marking the spliced audio rows.

    ``loss_mask[j]`` marks positions whose token is a training target; the
    logits that predict it sit at ``j - 1``.
    """

    ids: list[int]
    audio: torch.Tensor  # [tau, d]
    audio_start: int
    loss_mask: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def tau(self) -> int:
        return self.audio.shape[0]


class AudioLM(nn.Module):
    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer | None = None):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer or Tokenizer.default(cfg.vocab_size)
        if len(self.tokenizer) != cfg.vocab_size:
            raise ValueError("tokenizer size != vocab_size")
        self.encoder = AudioEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.lora_config = None
        self.apply(_init_weights)

    # -- audio ---------------------------------------------------------------
    def encode_audio(self, mel: MelFeatures | np.ndarray | torch.Tensor) -> torch.Tensor:
        """Single clip: ``[T, n_mels]`` -> ``[tau, d]``."""
        return self.encoder(self._mel_tensor(mel)[None])[0]

    def _mel_tensor(self, mel) -> torch.Tensor:
        if isinstance(mel, MelFeatures):
            mel = mel.frames
        dtype = next(self.parameters()).dtype
        return torch.as_tensor(np.asarray(mel) if not torch.is_tensor(mel) else mel, dtype=dtype)

    # -- chat ----------------------------------------------------------------
    def assemble_chat(self, h: torch.Tensor, q: str, y: str | None = None,
                      full_loss: bool = False) -> ChatSequence:
        if not q.strip():
            raise ValueError("instruction must be nonempty")
        tok = self.tokenizer
        if y is not None and y not in ANSWERS:
            raise ValueError(f"training answer must be one of {ANSWERS}, got {y!r}")
        tau = h.shape[0]
        pre = [tok.im_start, tok.user, tok.audio_open]
        post = [tok.audio_close, *tok.encode(q), tok.im_end, tok.im_start, tok.assistant]
        ids = pre + [AUDIO_SLOT] * tau + post
        answer = [] if y is None else [tok.index[y], tok.im_end]
        mask = [False] * len(ids) + [True] * len(answer)
        ids = ids + answer
        if full_loss and y is not None:
            mask = [j > 0 and t != AUDIO_SLOT for j, t in enumerate(ids)]
        return ChatSequence(ids, h, len(pre), mask)

    def embed(self, seq: ChatSequence) -> torch.Tensor:
        ids = torch.tensor([t if t != AUDIO_SLOT else self.tokenizer.pad_id for t in seq.ids])
        e = self.decoder.tok_emb(ids)
        a, b = seq.audio_start, seq.audio_start + seq.tau
        return torch.cat([e[:a], seq.audio.to(e.dtype), e[b:]], dim=0)

    def forward(self, seq: ChatSequence) -> torch.Tensor:
        """Logits ``[len(seq), V]``."""
        return self.forward_batch([seq])[0, : len(seq)]

    def forward_batch(self, seqs: Sequence[ChatSequence]) -> torch.Tensor:
        """Right-padded batch -> ``[B, L_max, V]``; causal masking makes
        positions inside each sequence independent of its padding."""
        L = max(len(s) for s in seqs)
        if L > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {self.cfg.max_seq_len}")
        embs = []
        for s in seqs:
            e = self.embed(s)
            if e.shape[0] < L:
                pad = self.decoder.tok_emb.weight[self.tokenizer.pad_id]
                e = torch.cat([e, pad.expand(L - e.shape[0], -1)], dim=0)
            embs.append(e)
        return self.decoder(torch.stack(embs))

    def next_token_scores(self, h: torch.Tensor, q: str) -> torch.Tensor:
        seq = self.assemble_chat(h, q)
        return self.forward(seq)[-1]


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, (nn.Linear, nn.Conv1d)):
        nn.init.normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Embedding):
        nn.init.normal_(m.weight, std=0.02)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig | None = None, seed: int = 0,
                dtype: torch.dtype = torch.float32) -> AudioLM:
    cfg = cfg or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = AudioLM(cfg)
    return model.to(dtype)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
