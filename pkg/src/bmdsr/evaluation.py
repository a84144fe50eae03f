"""Inference helpers and PSNR/SSIM evaluation over a dataset split."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import fileio
from .data_pipeline import DatasetManifest, load_sample, upsample_bicubic
from .losses_metrics import psnr, ssim
from .networks import BMDSRNet


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) or (T, H, W, 3) array -> channels-first float32 tensor."""
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    return t.movedim(-1, -3)


def to_image(t: torch.Tensor) -> np.ndarray:
    return np.clip(t.detach().movedim(-3, -1).cpu().numpy().astype(np.float64), 0.0, 1.0)


@torch.no_grad()
def predict(model: BMDSRNet, blur_lr: np.ndarray) -> np.ndarray:
    """Sharp HR image for one blurry LR image."""
    model.eval()
    return to_image(model(to_tensor(blur_lr)[None]).fused_hr[0])


@torch.no_grad()
def decompose(model: BMDSRNet, blur_lr: np.ndarray) -> np.ndarray:
    """Seven sharp LR frames (7, H, W, 3) recovered from one blurry image."""
    model.eval()
    return to_image(model.decompose(to_tensor(blur_lr)[None])[0])


@dataclass
class EvalReport:
    per_sample: List[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return fileio.dumps_json(self.to_dict())

    def write(self, path):
        fileio.atomic_write_bytes(path, self.dumps().encode("utf-8"))


def _aggregate(per_sample, **extra) -> dict:
    n = len(per_sample)
    agg = {
        "n": n,
        "mean_psnr": float(np.mean([s["psnr"] for s in per_sample])) if n else None,
        "mean_ssim": float(np.mean([s["ssim"] for s in per_sample])) if n else None,
        "color_space": "RGB",
    }
    agg.update(extra)
    return agg


def evaluate(manifest: DatasetManifest, split: str = "test", model: Optional[BMDSRNet] = None,
             pred_dir=None, checkpoint_hash: Optional[str] = None,
             grid_path=None, limit: Optional[int] = None) -> EvalReport:
    """Score fused HR predictions against ``sharp_hr`` on one split.

    Predictions come from ``model`` or, when ``pred_dir`` is given, from
    ``<pred_dir>/<sample_id>.png`` files.
    """
    if (model is None) == (pred_dir is None):
        raise ValueError("pass exactly one of model or pred_dir")
    records = manifest.subset(split)[:limit]
    per_sample, grid_rows = [], []
    for rec in records:
        sample = load_sample(manifest, rec, np.float64)
        if model is not None:
            pred = predict(model, sample.blur_lr)
        else:
            path = Path(pred_dir) / f"{rec.sample_id}.png"
            if not path.is_file():
                raise FileNotFoundError(f"no prediction for {rec.sample_id} at {path}")
            pred = fileio.read_image(path, np.float64)
        per_sample.append({"id": rec.sample_id, "psnr": psnr(pred, sample.sharp_hr),
                           "ssim": ssim(pred, sample.sharp_hr)})
        if grid_path is not None:
            shown = np.repeat(np.repeat(sample.blur_lr, manifest.scale, 0), manifest.scale, 1)
            grid_rows.append([shown, pred, sample.sharp_hr])
    variant = None if model is None else model.variant.value
    report = EvalReport(per_sample, _aggregate(per_sample, scale=manifest.scale, split=split,
                                               variant=variant, checkpoint_hash=checkpoint_hash))
    if grid_path is not None and grid_rows:
        fileio.write_png(grid_path, fileio.make_grid(grid_rows))
    return report


def bicubic_baseline(manifest: DatasetManifest, split: str = "train",
                     limit: Optional[int] = None) -> EvalReport:
    """Bicubic upsampling of the blurry LR input, scored like a model."""
    per_sample = []
    for rec in manifest.subset(split)[:limit]:
        sample = load_sample(manifest, rec, np.float64)
        pred = upsample_bicubic(sample.blur_lr, manifest.scale)
        per_sample.append({"id": rec.sample_id, "psnr": psnr(pred, sample.sharp_hr),
                           "ssim": ssim(pred, sample.sharp_hr)})
    return EvalReport(per_sample, _aggregate(per_sample, scale=manifest.scale, split=split,
                                             variant="bicubic", checkpoint_hash=None))
