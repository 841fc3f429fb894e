"""Versioned checkpoint container shared by the selector and the refiner.

A checkpoint is an .npz archive holding named parameter blobs plus a JSON
metadata record (format version, model kind, config echo). Loading rebuilds the
model from the echoed config and validates every blob's shape against it.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path: str | Path, kind: str, config: dict, model: torch.nn.Module) -> None:
    meta = {"format_version": FORMAT_VERSION, "kind": kind, "config": config}
    blobs = {
        name: tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            **{_META_KEY: np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)},
            **blobs,
        )


def read_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    with np.load(path) as archive:
        if _META_KEY not in archive:
            raise ValueError(f"{path} is not a recognized checkpoint (missing metadata)")
        meta = json.loads(bytes(archive[_META_KEY]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format {meta.get('format_version')!r}, "
                f"expected {FORMAT_VERSION}"
            )
        blobs = {k: archive[k] for k in archive.files if k != _META_KEY}
    return meta["kind"], meta["config"], blobs


def _load_into(model: torch.nn.Module, blobs: dict[str, np.ndarray], path) -> None:
    expected = model.state_dict()
    if set(expected) != set(blobs):
        missing = sorted(set(expected) - set(blobs))
        extra = sorted(set(blobs) - set(expected))
        raise ValueError(f"checkpoint {path} parameter names mismatch: "
                         f"missing={missing} unexpected={extra}")
    state = {}
    for name, arr in blobs.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise ValueError(
                f"checkpoint {path}: blob {name} has shape {tuple(arr.shape)}, "
                f"config implies {tuple(expected[name].shape)}"
            )
        state[name] = torch.from_numpy(arr)
    model.load_state_dict(state)


def save_selector(model, path: str | Path) -> None:
    save_checkpoint(path, "selector", model.config.to_dict(), model)


def load_selector(path: str | Path):
    from .selector import SelectorConfig, init_selector

    kind, cfg, blobs = read_checkpoint(path)
    if kind != "selector":
        raise ValueError(f"{path} holds a {kind!r} checkpoint, expected selector")
    model = init_selector(SelectorConfig(**cfg))
    _load_into(model, blobs, path)
    model.eval()
    return model


def save_refiner(model, path: str | Path) -> None:
    cfg = {k: getattr(model.config, k) for k in model.config.__dataclass_fields__}
    cfg["channel_mults"] = list(cfg["channel_mults"])
    save_checkpoint(path, "refiner", cfg, model)


def load_refiner(path: str | Path):
    from .refiner import RefinerConfig, init_refiner

    kind, cfg, blobs = read_checkpoint(path)
    if kind != "refiner":
        raise ValueError(f"{path} holds a {kind!r} checkpoint, expected refiner")
    model = init_refiner(RefinerConfig(**cfg))
    _load_into(model, blobs, path)
    model.eval()
    return model


def checkpoint_hash(path: str | Path) -> str:
    """Content hash used to key cached selector scores."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
