"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"SPQACKPT"
    8       4     u32 format version (currently 1)
    12      4     u32 header length H in bytes
    16      H     UTF-8 JSON header
    16+H    ...   tensor payload: float32 little-endian, row-major, concatenated
                  in header order

Header keys: ``kind`` ("full" or "adapter"), ``model_config``, ``lora``
(null or r/alpha/dropout/scale_mode), ``vocab`` (token list), ``tensors``
(list of {name, shape, offset} with offsets relative to the payload start),
``base_fingerprint`` (SHA-256 over the base tensors; adapter files must match
the base they are loaded onto) and free-form ``meta``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .lora import LoraConfig, ScaleMode, attach_lora, lora_layers
from .model import AudioLM, ModelConfig, Tokenizer, config_dict

MAGIC = b"SPQACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _is_adapter(name: str) -> bool:
    return name.endswith(".lora_A") or name.endswith(".lora_B")


def base_fingerprint(model: AudioLM) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        if _is_adapter(name):
            continue
        h.update(name.encode())
        h.update(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def _lora_dict(cfg: LoraConfig | None) -> dict | None:
    if cfg is None:
        return None
    return {"r": cfg.r, "alpha": cfg.alpha, "dropout": cfg.dropout,
            "scale_mode": cfg.scale_mode.value}


def _pack(header: dict, tensors: list[tuple[str, torch.Tensor]]) -> bytes:
    entries, blobs, off = [], [], 0
    for name, t in tensors:
        arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": off})
        b = arr.tobytes()
        blobs.append(b)
        off += len(b)
    header = dict(header, tensors=entries)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def _unpack(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a spoofqa checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    payload = memoryview(data)[16 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"])
    return header, tensors


def save(model: AudioLM, path: str | Path, meta: dict | None = None) -> None:
    header = {
        "kind": "full",
        "model_config": config_dict(model.cfg),
        "lora": _lora_dict(model.lora_config),
        "vocab": model.tokenizer.vocab,
        "base_fingerprint": base_fingerprint(model),
        "meta": meta or {},
    }
    Path(path).write_bytes(_pack(header, list(model.state_dict().items())))


def save_adapter(model: AudioLM, path: str | Path, meta: dict | None = None) -> None:
    if not lora_layers(model):
        raise CheckpointError("model has no adapters to save")
    header = {
        "kind": "adapter",
        "model_config": config_dict(model.cfg),
        "lora": _lora_dict(model.lora_config),
        "vocab": model.tokenizer.vocab,
        "base_fingerprint": base_fingerprint(model),
        "meta": meta or {},
    }
    tensors = [(n, t) for n, t in model.state_dict().items() if _is_adapter(n)]
    Path(path).write_bytes(_pack(header, tensors))


def _lora_cfg(d: dict) -> LoraConfig:
    return LoraConfig(d["r"], d["alpha"], d["dropout"], ScaleMode(d["scale_mode"]))


def load(path: str | Path) -> tuple[AudioLM, dict]:
    """Rebuild a model from a full checkpoint; returns ``(model, header)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, tensors = _unpack(path.read_bytes())
    if header["kind"] != "full":
        raise CheckpointError(f"expected a full checkpoint, got {header['kind']!r}")
    cfg = ModelConfig(**header["model_config"])
    model = AudioLM(cfg, Tokenizer(header["vocab"]))
    if header["lora"] is not None:
        attach_lora(model, _lora_cfg(header["lora"]))
    state = model.state_dict()
    if set(state) != set(tensors):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    model.eval()
    return model, header


def load_adapter(model: AudioLM, path: str | Path) -> AudioLM:
    """Attach (if needed) and fill adapters from an adapter-only file."""
    header, tensors = _unpack(Path(path).read_bytes())
    if header["kind"] != "adapter":
        raise CheckpointError(f"expected an adapter checkpoint, got {header['kind']!r}")
    if header["base_fingerprint"] != base_fingerprint(model):
        raise CheckpointError("adapter was trained on a different base model")
    if not lora_layers(model):
        attach_lora(model, _lora_cfg(header["lora"]))
    with torch.no_grad():
        state = model.state_dict()
        for name, arr in tensors.items():
            if name not in state or tuple(state[name].shape) != arr.shape:
                raise CheckpointError(f"adapter tensor {name} does not fit the model")
            state[name].copy_(torch.from_numpy(arr.copy()))
    return model
