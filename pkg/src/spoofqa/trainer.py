"""Supervised fine-tuning on (audio, instruction, Fake/Real) triples."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Key, Protocol, Utterance
from .frontend import load_wav, log_mel
from .lora import LoraConfig, Mode, ScaleMode, attach_lora, freeze_for, lora_layers
from .metrics import ScoreSet, eer
from .model import AudioLM, ChatSequence

log = logging.getLogger(__name__)

DEFAULT_PROMPT = "Is this audio fake or real?"


class NonFiniteLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class SftExample:
    utterance: Utterance
    instruction: str
    answer: str


def make_sft_dataset(p: Protocol, q: str = DEFAULT_PROMPT) -> list[SftExample]:
    if not p.utterances:
        raise ValueError("empty protocol")
    return [SftExample(u, q, "Fake" if u.key is Key.SPOOF else "Real") for u in p.utterances]


@dataclass
class TrainConfig:
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    warmup_ratio: float = 0.01
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    mode: Mode = Mode.STAR
    lora_r: int = 32
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    scale_mode: ScaleMode = ScaleMode.ALPHA_OVER_R
    full_sequence_loss: bool = False
    select_on_dev: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.betas = tuple(self.betas)
        self.mode = Mode(self.mode)
        self.scale_mode = ScaleMode(self.scale_mode)

    @property
    def lora(self) -> LoraConfig:
        return LoraConfig(self.lora_r, self.lora_alpha, self.lora_dropout, self.scale_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["scale_mode"] = self.scale_mode.value
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then half-cosine decay to zero."""
    if total_steps <= 0:
        raise ValueError("total_steps must be > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = round(cfg.warmup_ratio * total_steps)
    if step < warmup:
        return cfg.lr * step / warmup
    if total_steps == warmup:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total_steps - warmup)))


# ---------------------------------------------------------------------------
# features


class FeatureCache:
    """Log-Mel features per utterance id, computed once."""

    def __init__(self, n_mels: int = 80):
        self.n_mels = n_mels
        self._mel: dict[str, np.ndarray] = {}

    def mel(self, u: Utterance) -> np.ndarray:
        m = self._mel.get(u.utt_id)
        if m is None:
            m = log_mel(load_wav(u.audio_path), n_mels=self.n_mels).frames
            self._mel[u.utt_id] = m
        return m


def encode_batch(model: AudioLM, mels: Sequence[np.ndarray]) -> list[torch.Tensor]:
    """Encode clips, batching together clips of equal length."""
    out: list[torch.Tensor | None] = [None] * len(mels)
    groups: dict[int, list[int]] = {}
    for i, m in enumerate(mels):
        groups.setdefault(m.shape[0], []).append(i)
    for idx in groups.values():
        x = torch.stack([model._mel_tensor(mels[i]) for i in idx])
        h = model.encoder(x)
        for j, i in enumerate(idx):
            out[i] = h[j]
    return out


# ---------------------------------------------------------------------------
# loss


def sequence_loss(logits: torch.Tensor, seq: ChatSequence) -> torch.Tensor:
    """Mean cross-entropy over the masked target positions of one sequence."""
    pos = [j for j, m in enumerate(seq.loss_mask) if m]
    if not pos:
        raise ValueError("example has an empty loss mask")
    if pos[0] == 0:
        raise ValueError("position 0 cannot be a target")
    idx = torch.tensor(pos)
    targets = torch.tensor([seq.ids[j] for j in pos])
    return F.cross_entropy(logits[idx - 1], targets)


def batch_loss(model: AudioLM, seqs: Sequence[ChatSequence]) -> torch.Tensor:
    if not seqs:
        raise ValueError("empty batch")
    logits = model.forward_batch(seqs)
    return torch.stack([sequence_loss(logits[b], s) for b, s in enumerate(seqs)]).mean()


def sft_loss(model: AudioLM, batch: Sequence[tuple[np.ndarray, str, str]],
             full_sequence_loss: bool = False) -> torch.Tensor:
    """Loss for ``(mel, instruction, answer)`` triples; call ``.backward()`` for
    gradients on whatever parameters currently require them."""
    hs = encode_batch(model, [m for m, _, _ in batch])
    seqs = [model.assemble_chat(h, q, y, full_loss=full_sequence_loss)
            for h, (_, q, y) in zip(hs, batch)]
    return batch_loss(model, seqs)


# ---------------------------------------------------------------------------
# scoring used for dev selection (scorer builds on the same primitive)


@torch.no_grad()
def score_mels(model: AudioLM, mels: Sequence[np.ndarray], q: str,
               batch_size: int = 64) -> np.ndarray:
    """P(Fake) per clip from the two key-token logits."""
    was_training = model.training
    model.eval()
    tok = model.tokenizer
    out = []
    for s in range(0, len(mels), batch_size):
        chunk = mels[s:s + batch_size]
        hs = encode_batch(model, chunk)
        seqs = [model.assemble_chat(h, q) for h in hs]
        logits = model.forward_batch(seqs)
        last = torch.tensor([len(x) - 1 for x in seqs])
        final = logits[torch.arange(len(seqs)), last].double()
        diff = (final[:, tok.fake_id] - final[:, tok.real_id]).numpy()
        out.append(two_way_softmax(diff))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def two_way_softmax(diff):
    """exp(s_f) / (exp(s_f) + exp(s_r)) from ``diff = s_f - s_r``, overflow-free."""
    diff = np.asarray(diff, dtype=np.float64)
    pos = diff >= 0
    e = np.exp(-np.abs(diff))
    return np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    trainable: int = 0
    mode: str = ""

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for rec in self.steps:
                f.write(json.dumps(rec) + "\n")


def prepare_model(model: AudioLM, cfg: TrainConfig) -> dict[str, torch.nn.Parameter]:
    """Attach adapters if absent and freeze everything outside ``cfg.mode``."""
    if not lora_layers(model):
        attach_lora(model, cfg.lora, seed=cfg.seed)
    return freeze_for(model, cfg.mode)


def train(model: AudioLM, dataset: Sequence[SftExample], cfg: TrainConfig,
          dev: Sequence[SftExample] | None = None, features: FeatureCache | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[AudioLM, TrainLog]:
    """Fine-tune in place and return ``(model, log)``.

    With a dev set and ``cfg.select_on_dev``, the parameters of the epoch with
    the lowest dev EER (then lowest dev loss) are restored at the end.
    """
    if not dataset:
        raise ValueError("empty training set")
    # adapter dropout draws from the global torch RNG; pin it to the run seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return _train(model, dataset, cfg, dev, features, on_epoch)


def _train(model, dataset, cfg, dev, features, on_epoch):
    features = features or FeatureCache(model.cfg.n_mels)
    params = prepare_model(model, cfg)
    n_trainable = sum(p.numel() for p in params.values())
    tlog = TrainLog(trainable=n_trainable, mode=cfg.mode.value)
    log.info("mode=%s encoder_frozen=%s trainable_params=%d",
             cfg.mode.value, cfg.mode is Mode.STAR, n_trainable)

    mels = [features.mel(ex.utterance) for ex in dataset]
    dev_mels = [features.mel(ex.utterance) for ex in dev] if dev else None

    # A frozen encoder is a fixed function of the features, so encode once.
    cached_h = None
    if cfg.mode is Mode.STAR:
        with torch.no_grad():
            cached_h = encode_batch(model, mels)

    opt = torch.optim.AdamW(list(params.values()), lr=cfg.lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    gen = torch.Generator().manual_seed(cfg.seed)
    best = ((math.inf, math.inf), None)
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(dataset), generator=gen).tolist()
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if cached_h is not None:
                hs = [cached_h[i] for i in idx]
            else:
                hs = encode_batch(model, [mels[i] for i in idx])
            seqs = [model.assemble_chat(h, dataset[i].instruction, dataset[i].answer,
                                        full_loss=cfg.full_sequence_loss)
                    for h, i in zip(hs, idx)]
            lr = lr_at(step, total, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = batch_loss(model, seqs)
            if not torch.isfinite(loss):
                ids = [dataset[i].utterance.utt_id for i in idx]
                raise NonFiniteLoss(f"non-finite loss at step {step}, examples {ids}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            gnorm = torch.nn.utils.clip_grad_norm_(list(params.values()), cfg.grad_clip)
            grads = [p.grad for p in params.values() if p.grad is not None]
            clipped = torch.linalg.vector_norm(torch.stack(
                [torch.linalg.vector_norm(g) for g in grads]))
            opt.step()
            tlog.steps.append({"step": step, "lr": lr, "loss": loss.item(),
                               "grad_norm": float(gnorm), "clipped_norm": float(clipped)})
            step += 1

        rec = {"epoch": epoch, "train_loss": float(np.mean(
            [r["loss"] for r in tlog.steps[-steps_per_epoch:]]))}
        if dev:
            rec["dev_loss"] = dev_loss(model, dev, dev_mels, cfg)
            p = score_mels(model, dev_mels, dev[0].instruction)
            y = np.array([ex.answer == "Fake" for ex in dev])
            if y.any() and not y.all():
                rec["dev_eer"] = eer(ScoreSet(p, y)).eer
                # ties on dev EER go to the lower dev loss
                rank = (rec["dev_eer"], rec["dev_loss"])
                if cfg.select_on_dev and rank < best[0]:
                    best = (rank, {k: v.detach().clone() for k, v in params.items()})
                    tlog.best_epoch = epoch
        tlog.epochs.append(rec)
        log.info("epoch %d %s", epoch, rec)
        if on_epoch:
            on_epoch(rec)

    if best[1] is not None:
        with torch.no_grad():
            for k, v in best[1].items():
                params[k].copy_(v)
    model.eval()
    return model, tlog


@torch.no_grad()
def dev_loss(model: AudioLM, dev: Sequence[SftExample], mels: Sequence[np.ndarray],
             cfg: TrainConfig, batch_size: int = 64) -> float:
    was_training = model.training
    model.eval()
    total = 0.0
    for s in range(0, len(dev), batch_size):
        chunk = dev[s:s + batch_size]
        hs = encode_batch(model, mels[s:s + batch_size])
        seqs = [model.assemble_chat(h, ex.instruction, ex.answer,
                                    full_loss=cfg.full_sequence_loss)
                for h, ex in zip(hs, chunk)]
        total += float(batch_loss(model, seqs)) * len(chunk)
    model.train(was_training)
    return total / len(dev)
