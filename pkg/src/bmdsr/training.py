"""Joint end-to-end training, checkpoint/resume and the ablation matrix."""
from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from . import fileio
from .checkpoint import file_hash, read_checkpoint, save_checkpoint
from .data_pipeline import DataError, DatasetManifest, TrainingSample, load_sample
from .evaluation import EvalReport, evaluate
from .losses_metrics import make_extractor, total_loss
from .networks import BMDSRNet, ModelConfig, Variant, count_parameters
from .networks import STREAM_DOWNSCALE

log = logging.getLogger(__name__)

REFERENCE_PATCH = 128
EMA_DECAY = 0.98

# Reference magnitudes from the original full-scale study (GOPRO-based data,
# 400 epochs); shown next to desk-scale numbers, never compared against them.
REFERENCE_RESULTS = {
    (2, "SRNET"): (30.88, 0.9437), (2, "C"): (31.28, 0.9457),
    (2, "FC"): (31.45, 0.9479), (2, "FCB"): (31.62, 0.9483),
    (3, "SRNET"): (29.49, 0.9256), (3, "C"): (29.95, 0.9302),
    (3, "FC"): (30.21, 0.9337), (3, "FCB"): (30.44, 0.9356),
    (4, "SRNET"): (28.06, 0.8997), (4, "C"): (28.43, 0.9068),
    (4, "FC"): (28.62, 0.9113), (4, "FCB"): (28.78, 0.9132),
}
VARIANT_LABELS = {"SRNET": "SRNet", "C": "BMDSRNet(C)", "FC": "BMDSRNet(F+C)",
                  "FCB": "BMDSRNet(F+C+B)"}


class TrainingAborted(RuntimeError):
    """Raised when the loss becomes non-finite."""


def default_patch(scale: int) -> int:
    """Largest HR patch <= 128 compatible with the encoder's /8 downscaling."""
    unit = scale * STREAM_DOWNSCALE
    return (REFERENCE_PATCH // unit) * unit


@dataclass
class TrainConfig:
    variant: str = "FCB"
    scale: int = 4
    batch_size: int = 4
    patch: Optional[int] = None  # HR patch side; None -> default_patch(scale)
    lr: float = 1e-4
    epochs: int = 400
    max_steps: Optional[int] = None  # overrides epochs when set
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    lr_schedule: Optional[str] = None  # None | "cosine"
    grad_clip: Optional[float] = 10.0
    seed: int = 0
    channel_multiplier: float = 1.0
    extractor: str = "fixed-random-conv"
    loss_weights: Dict[str, float] = field(default_factory=dict)
    checkpoint_every: int = 0  # steps; 0 -> final checkpoint only
    val_every: int = 1  # epochs; 0 disables validation
    val_split: str = "test"
    val_samples: int = 4
    deterministic: bool = True
    workers: int = 0  # batch prefetch threads

    def __post_init__(self):
        self.variant = Variant(self.variant).value
        self.betas = tuple(self.betas)
        if self.patch is None:
            self.patch = default_patch(self.scale)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patch % (self.scale * STREAM_DOWNSCALE):
            raise ValueError(f"patch {self.patch} must be divisible by "
                             f"scale x {STREAM_DOWNSCALE} = {self.scale * STREAM_DOWNSCALE}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_schedule not in (None, "cosine"):
            raise ValueError(f"unsupported lr_schedule {self.lr_schedule!r}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small patches and widths that train in minutes on one CPU core."""
        scale = overrides.get("scale", 2)
        base = dict(scale=scale, patch=2 * scale * STREAM_DOWNSCALE, channel_multiplier=0.25,
                    lr=5e-4, max_steps=2000, val_every=0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def model_config(self) -> ModelConfig:
        return ModelConfig(scale=self.scale, variant=self.variant,
                           channel_multiplier=self.channel_multiplier,
                           extractor=self.extractor, seed=self.seed)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    blur_lr: torch.Tensor  # (B, 3, p, p)
    sharp_lr: torch.Tensor  # (B, 7, 3, p, p)
    sharp_hr: torch.Tensor  # (B, 3, pN, pN)
    sample_ids: List[str]
    origins: List[tuple]  # LR (y, x) crop origins


class SampleStore:
    """Training samples held in memory, filtered to those large enough."""

    def __init__(self, samples: Sequence[TrainingSample], lr_patch: int):
        self.samples = []
        for s in samples:
            h, w = s.blur_lr.shape[:2]
            if h < lr_patch or w < lr_patch:
                log.warning("skipping %s: %dx%d smaller than patch %d", s.sample_id, h, w, lr_patch)
                continue
            self.samples.append(s)
        if not self.samples:
            raise DataError("no training sample is large enough for the patch size")

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split: str, lr_patch: int):
        return cls([load_sample(manifest, r) for r in manifest.subset(split)], lr_patch)

    def __len__(self):
        return len(self.samples)


def plan_batch(store: SampleStore, cfg: TrainConfig, rng: np.random.Generator) -> List[tuple]:
    """Draw (sample index, y, x) LR crop origins; all randomness lives here."""
    lr_patch = cfg.patch // cfg.scale
    plan = []
    for idx in rng.integers(len(store), size=cfg.batch_size):
        h, w = store.samples[idx].blur_lr.shape[:2]
        y = int(rng.integers(h - lr_patch + 1))
        x = int(rng.integers(w - lr_patch + 1))
        plan.append((int(idx), y, x))
    return plan


def materialize(store: SampleStore, cfg: TrainConfig, plan: List[tuple]) -> Batch:
    """Cut the planned crops; the HR window is the LR window scaled by N."""
    p, n = cfg.patch // cfg.scale, cfg.scale
    blur, sharp, hr, ids = [], [], [], []
    for idx, y, x in plan:
        s = store.samples[idx]
        blur.append(s.blur_lr[y:y + p, x:x + p])
        sharp.append(s.sharp_lr[:, y:y + p, x:x + p])
        hr.append(s.sharp_hr[y * n:(y + p) * n, x * n:(x + p) * n])
        ids.append(s.sample_id)
    as_t = lambda arrs: torch.from_numpy(np.ascontiguousarray(np.stack(arrs), dtype=np.float32)).movedim(-1, -3)
    return Batch(as_t(blur), as_t(sharp), as_t(hr), ids, [(y, x) for _, y, x in plan])


def sample_batch(store: SampleStore, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    return materialize(store, cfg, plan_batch(store, cfg, rng))


def batch_stream(store: SampleStore, cfg: TrainConfig, rng: np.random.Generator,
                 n: int) -> Iterable[Batch]:
    """Yield ``n`` batches. Plans are drawn in order on the calling thread, so
    the prefetch worker count never changes the sample stream."""
    if cfg.workers <= 0:
        for _ in range(n):
            yield sample_batch(store, cfg, rng)
        return
    depth = 2 * cfg.workers
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        pending = deque()
        for _ in range(n):
            pending.append(pool.submit(materialize, store, cfg, plan_batch(store, cfg, rng)))
            if len(pending) >= depth:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    ema: Dict[str, float] = field(default_factory=dict)
    rng_state: Optional[dict] = None
    best_psnr: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Optional[Path]
    log_path: Path
    history: List[dict]
    state: TrainState
    model: BMDSRNet = field(repr=False, default=None)


@contextlib.contextmanager
def _deterministic(enabled: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled or prev)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / max(total, 1)))
    return cfg.lr


def train(manifest: DatasetManifest, cfg: TrainConfig, out_dir, resume_from=None,
          split: str = "train", store: Optional[SampleStore] = None) -> TrainResult:
    """Train ``cfg.variant`` jointly from scratch (or resume a checkpoint).

    Writes ``metrics.jsonl`` (one line per step), ``last.pt`` and, when
    validation is enabled, ``best.pt``. A non-finite loss aborts the run,
    leaves the last good checkpoint in place and dumps the offending batch to
    ``nan_dump.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if manifest.scale != cfg.scale:
        raise DataError(f"manifest scale {manifest.scale} != config scale {cfg.scale}")
    if store is None:
        store = SampleStore.from_manifest(manifest, split, cfg.patch // cfg.scale)

    torch.manual_seed(cfg.seed)
    model = BMDSRNet(cfg.model_config())
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    phi = make_extractor(cfg.extractor) if model.variant.uses_bmdnet else None
    state = TrainState()
    rng = np.random.default_rng(cfg.seed)

    log_path = out_dir / "metrics.jsonl"
    last_path = out_dir / "last.pt"
    best_path = out_dir / "best.pt"
    if resume_from is not None:
        ckpt = read_checkpoint(resume_from)
        model.load_state_dict(ckpt["tensors"])
        optimizer.load_state_dict(ckpt["optimizer"])
        ts = dict(ckpt["train_state"])
        state = TrainState(**ts)
        rng.bit_generator.state = state.rng_state
        if log_path.exists():  # drop lines logged after the checkpoint was taken
            kept = [ln for ln in log_path.read_text().splitlines()
                    if ln and json.loads(ln)["step"] <= state.step]
            log_path.write_text("".join(k + "\n" for k in kept))
    elif log_path.exists():
        log_path.unlink()

    steps_per_epoch = max(1, math.ceil(len(store) / cfg.batch_size))
    total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch
    history: List[dict] = []
    t0 = time.time()

    def snapshot(path):
        state.rng_state = rng.bit_generator.state
        save_checkpoint(path, model, optimizer, cfg.to_dict(), state.to_dict())

    with _deterministic(cfg.deterministic), open(log_path, "a") as log_fh:
        model.train()
        for batch in batch_stream(store, cfg, rng, max(total_steps - state.step, 0)):
            lr = _lr_at(cfg, state.step, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            out = model(batch.blur_lr)
            losses = total_loss(out, batch.sharp_lr, batch.sharp_hr, model.variant, phi,
                                cfg.loss_weights)
            loss = losses.total
            if not torch.isfinite(loss):
                dump = {"step": state.step + 1, "sample_ids": batch.sample_ids,
                        "origins": batch.origins, "terms": losses.as_floats()}
                fileio.atomic_write_json(out_dir / "nan_dump.json", dump)
                raise TrainingAborted(f"non-finite loss at step {state.step + 1}; "
                                      f"batch {batch.sample_ids} dumped to nan_dump.json")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            state.step += 1
            state.epoch = state.step // steps_per_epoch

            values = losses.as_floats()
            for k, v in values.items():
                state.ema[k] = v if k not in state.ema else EMA_DECAY * state.ema[k] + (1 - EMA_DECAY) * v
            entry = {"step": state.step, **values, "lr": lr, "wallclock": time.time() - t0}
            history.append(entry)
            log_fh.write(json.dumps(entry) + "\n")

            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                log_fh.flush()
                snapshot(last_path)
            if cfg.val_every and state.step % (steps_per_epoch * cfg.val_every) == 0:
                val_psnr = _validate(model, manifest, cfg)
                model.train()
                if val_psnr is not None and (state.best_psnr is None or val_psnr > state.best_psnr):
                    state.best_psnr = val_psnr
                    snapshot(best_path)
        snapshot(last_path)
    model.eval()
    return TrainResult(last_path, best_path if best_path.exists() else None, log_path,
                       history, state, model)


def _validate(model: BMDSRNet, manifest: DatasetManifest, cfg: TrainConfig) -> Optional[float]:
    split = cfg.val_split if manifest.subset(cfg.val_split) else "train"
    report = evaluate(manifest, split, model=model, limit=cfg.val_samples)
    return report.aggregate["mean_psnr"]


def optimizer_steps(optimizer: torch.optim.Optimizer) -> int:
    """Number of updates Adam has applied (read from its per-parameter state)."""
    steps = {int(s["step"]) for s in optimizer.state.values() if "step" in s}
    return steps.pop() if len(steps) == 1 else (0 if not steps else -1)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationReport:
    rows: List[dict]  # one per (variant, scale, seed)
    table: List[dict]  # one per (scale, variant), averaged over seeds

    def to_dict(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        lines = [f"{'Scale':<6}{'Method':<18}{'PSNR':>8}{'SSIM':>9}   "
                 f"{'ref PSNR':>9}{'ref SSIM':>9}"]
        for r in self.table:
            psnr_s = "   -   " if r["psnr"] is None else f"{r['psnr']:.2f}"
            ssim_s = "   -   " if r["ssim"] is None else f"{r['ssim']:.4f}"
            lines.append(f"x{r['scale']:<5}{VARIANT_LABELS[r['variant']]:<18}{psnr_s:>8}"
                         f"{ssim_s:>9}   {r['ref_psnr']:>9.2f}{r['ref_ssim']:>9.4f}")
        return "\n".join(lines)


def run_ablation(manifests: Dict[int, DatasetManifest], base_cfg: TrainConfig, out_dir,
                 variants: Sequence[str] = ("SRNET", "C", "FC", "FCB"),
                 seeds: Sequence[int] = (0,), split: str = "test") -> AblationReport:
    """Train and evaluate every (variant, scale, seed) cell.

    A cell that fails is kept with ``psnr``/``ssim`` set to None and the error
    recorded; no value is substituted.
    """
    out_dir = Path(out_dir)
    rows = []
    for scale in sorted(manifests):
        for variant in variants:
            for seed in seeds:
                cell = {"variant": Variant(variant).value, "scale": scale, "seed": seed,
                        "psnr": None, "ssim": None}
                cfg_d = base_cfg.to_dict()
                cfg_d.update(variant=variant, scale=scale, seed=seed, patch=None)
                if base_cfg.patch is not None and base_cfg.patch % (scale * STREAM_DOWNSCALE) == 0:
                    cfg_d["patch"] = base_cfg.patch
                elif base_cfg.patch is not None:
                    unit = scale * STREAM_DOWNSCALE
                    cfg_d["patch"] = max(unit, (base_cfg.patch // unit) * unit)
                try:
                    cfg = TrainConfig.from_dict(cfg_d)
                    res = train(manifests[scale], cfg, out_dir / f"x{scale}_{variant}_s{seed}")
                    rep = evaluate(manifests[scale], split, model=res.model,
                                   checkpoint_hash=file_hash(res.checkpoint))
                    cell.update(psnr=rep.aggregate["mean_psnr"], ssim=rep.aggregate["mean_ssim"],
                                params=count_parameters(res.model).total)
                except Exception as exc:  # recorded, not fabricated
                    log.exception("ablation cell %s x%d seed %d failed", variant, scale, seed)
                    cell["error"] = repr(exc)
                rows.append(cell)

    table = []
    for scale in sorted(manifests):
        for variant in variants:
            v = Variant(variant).value
            cells = [r for r in rows if r["scale"] == scale and r["variant"] == v
                     and r["psnr"] is not None]
            ref = REFERENCE_RESULTS.get((scale, v), (float("nan"), float("nan")))
            table.append({
                "scale": scale, "variant": v, "n_seeds": len(cells),
                "psnr": float(np.mean([c["psnr"] for c in cells])) if cells else None,
                "ssim": float(np.mean([c["ssim"] for c in cells])) if cells else None,
                "ref_psnr": ref[0], "ref_ssim": ref[1],
            })
    report = AblationReport(rows, table)
    fileio.atomic_write_json(out_dir / "ablation.json", report.to_dict())
    return report
