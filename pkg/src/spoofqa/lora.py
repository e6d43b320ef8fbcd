"""Low-rank adapters for the decoder attention projections.

Row-vector convention throughout: a frozen weight ``W0`` has shape
``[in, out]`` and a layer computes ``x @ W0``. The adapted layer computes::

    x @ W0 + scale * (dropout(x) @ W_A) @ W_B

with ``W_A: [in, r]`` Gaussian (std 1/sqrt(r)) and ``W_B: [r, out]`` zero at
construction, so a freshly wrapped layer reproduces the base layer exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
from torch import nn


class ScaleMode(enum.Enum):
    ALPHA_OVER_R = "alpha_over_r"  # conventional LoRA scaling
    LITERAL_ALPHA = "literal_alpha"  # delta = alpha * W_A @ W_B


class Mode(enum.Enum):
    """Which parameters fine-tuning may update."""

    STAR = "star"  # adapters only, audio encoder frozen
    TRIANGLE = "triangle"  # adapters plus the audio encoder


@dataclass(frozen=True)
class LoraConfig:
    r: int = 64
    alpha: float = 16.0
    dropout: float = 0.05
    scale_mode: ScaleMode = ScaleMode.ALPHA_OVER_R

    def scale(self) -> float:
        if self.scale_mode is ScaleMode.ALPHA_OVER_R:
            return self.alpha / self.r
        return float(self.alpha)


class Dense(nn.Module):
    """Bias-free ``x @ weight`` with ``weight: [in, out]``."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        nn.init.normal_(self.weight, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.weight


class LoraLinear(nn.Module):
    def __init__(self, W0: torch.Tensor, r: int, alpha: float, p_drop: float = 0.0,
                 seed: int = 0, scale_mode: ScaleMode = ScaleMode.ALPHA_OVER_R):
        super().__init__()
        m, n = W0.shape
        if not 1 <= r <= min(m, n):
            raise ValueError(f"LoRA rank {r} outside [1, min({m}, {n})]")
        self.r = r
        self.alpha = float(alpha)
        self.scale_mode = scale_mode
        self.p_drop = p_drop
        self.weight = nn.Parameter(W0.detach().clone(), requires_grad=False)
        g = torch.Generator().manual_seed(seed)
        A = torch.randn(m, r, generator=g, dtype=torch.float64) / math.sqrt(r)
        self.lora_A = nn.Parameter(A.to(W0.dtype))
        self.lora_B = nn.Parameter(torch.zeros(r, n, dtype=W0.dtype))
        self.dropout = nn.Dropout(p_drop) if p_drop > 0 else nn.Identity()

    @property
    def scale(self) -> float:
        return LoraConfig(self.r, self.alpha, self.p_drop, self.scale_mode).scale()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.weight.shape[0]}")
        return x @ self.weight + self.scale * ((self.dropout(x) @ self.lora_A) @ self.lora_B)

    @torch.no_grad()
    def merge(self) -> torch.Tensor:
        return self.weight + self.scale * (self.lora_A @ self.lora_B)


def wrap(W0: torch.Tensor, r: int = 64, alpha: float = 16.0, p_drop: float = 0.05,
         seed: int = 0, scale_mode: ScaleMode = ScaleMode.ALPHA_OVER_R) -> LoraLinear:
    return LoraLinear(W0, r, alpha, p_drop, seed, scale_mode)


def apply(layer: LoraLinear, x: torch.Tensor) -> torch.Tensor:
    return layer(x)


def merge(layer: LoraLinear) -> torch.Tensor:
    return layer.merge()


LORA_TARGETS = ("q", "k", "v", "o")


def attach_lora(model: nn.Module, cfg: LoraConfig, seed: int = 0) -> nn.Module:
    """Replace q/k/v/o of every decoder block with a wrapped copy, in place.

    Each projection draws W_A from its own seed derived from ``seed``.
    """
    for li, block in enumerate(model.decoder.blocks):
        attn = block.attn
        for pi, name in enumerate(LORA_TARGETS):
            base = getattr(attn, name)
            if isinstance(base, LoraLinear):
                raise ValueError(f"decoder block {li} projection {name} already wrapped")
            layer = wrap(base.weight, cfg.r, cfg.alpha, cfg.dropout,
                         seed=seed * 1000 + li * len(LORA_TARGETS) + pi,
                         scale_mode=cfg.scale_mode)
            setattr(attn, name, layer)
    model.lora_config = cfg
    return model


def lora_layers(model: nn.Module) -> list[tuple[str, LoraLinear]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, LoraLinear)]


def trainable_parameters(model: nn.Module, mode: Mode) -> dict[str, nn.Parameter]:
    """Named parameters fine-tuning updates in ``mode``; base LM weights never."""
    layers = lora_layers(model)
    if not layers:
        raise ValueError("model has no LoRA adapters attached")
    out: dict[str, nn.Parameter] = {}
    for name, layer in layers:
        out[f"{name}.lora_A"] = layer.lora_A
        out[f"{name}.lora_B"] = layer.lora_B
    if mode is Mode.TRIANGLE:
        for name, p in model.encoder.named_parameters():
            out[f"encoder.{name}"] = p
    return out


def freeze_for(model: nn.Module, mode: Mode) -> dict[str, nn.Parameter]:
    """Set ``requires_grad`` so that only ``trainable_parameters`` receive gradients."""
    train = trainable_parameters(model, mode)
    keep = {id(p) for p in train.values()}
    for p in model.parameters():
        p.requires_grad_(id(p) in keep)
    return train


def merged_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Adapter-free state dict with every wrapped projection folded in."""
    state = {}
    wrapped = {n: m for n, m in lora_layers(model)}
    for name, t in model.state_dict().items():
        owner, _, leaf = name.rpartition(".")
        if owner in wrapped:
            if leaf == "weight":
                state[name] = wrapped[owner].merge()
            continue
        state[name] = t
    return state
