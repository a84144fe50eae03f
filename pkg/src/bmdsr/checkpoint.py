"""Single-file checkpoints.

A checkpoint is a ``torch.save`` archive of a plain dict::

    format_version  int
    model_config    ModelConfig.to_dict()
    seed            int
    tensors         {name: tensor}  -- model state_dict, keys
                                       bmdnet.* / stream.* / corenet.* / funet.*
    optimizer       optimizer state_dict or None
    train_config    dict or None
    train_state     dict or None   -- step, epoch, loss EMA, rng state, best PSNR

Files are written to a temp name and renamed, so a crash never leaves a
truncated checkpoint behind.
"""
from __future__ import annotations

import hashlib
import io
from pathlib import Path
from typing import Optional

import torch

from .fileio import atomic_write_bytes
from .networks import BMDSRNet, ModelConfig

FORMAT_VERSION = 1


def save_checkpoint(path, model: BMDSRNet, optimizer=None, train_config: Optional[dict] = None,
                    train_state: Optional[dict] = None):
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "seed": model.config.seed,
        "tensors": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "train_config": train_config,
        "train_state": train_state,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def read_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or "format_version" not in ckpt:
        raise ValueError(f"{path} is not a checkpoint")
    if ckpt["format_version"] > FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt['format_version']}")
    return ckpt


def load_model(path) -> BMDSRNet:
    ckpt = read_checkpoint(path)
    model = BMDSRNet(ModelConfig.from_dict(ckpt["model_config"]))
    model.load_state_dict(ckpt["tensors"])
    model.eval()
    return model


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
