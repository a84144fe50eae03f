"""Motion-blurred LR dataset synthesis.

A blurry frame is the pixel-wise mean of seven consecutive sharp frames.
Blur and sharp frames are then downsampled by the scale factor N; the
high-resolution target is the sharp central frame (index 4 of 1..7).

On disk::

    <root>/manifest.json
    <root>/<split>/<sample_id>/{blur_lr.png, sharp_lr_1..7.png, sharp_hr.png}
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from . import fileio
from .resize import KERNEL_ID, resize

log = logging.getLogger(__name__)

WINDOW = 7
CENTER = 3
SCALES = (2, 3, 4)
MIN_SIZE = 8
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MEAN_IDENTITY_TOL = 1e-6


class DataError(ValueError):
    """Invalid or inconsistent input data."""


# ---------------------------------------------------------------------------
# images and sequences


def as_image(img, name: str = "image") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"{name} must be (H, W, 3), got {img.shape}")
    if img.shape[0] < MIN_SIZE or img.shape[1] < MIN_SIZE:
        raise DataError(f"{name} must be at least {MIN_SIZE}x{MIN_SIZE}, got {img.shape[:2]}")
    return img


def as_sequence(frames: Sequence) -> np.ndarray:
    """Validate seven same-shaped frames, returned as a (7, H, W, 3) array."""
    if len(frames) != WINDOW:
        raise DataError(f"a frame sequence holds exactly {WINDOW} frames, got {len(frames)}")
    first = np.shape(frames[0])
    for i, f in enumerate(frames):
        if np.shape(f) != first:
            raise DataError(
                f"frame {i + 1} has shape {np.shape(f)}, expected {first} (frame 1)")
    return np.stack([as_image(f, f"frame {i + 1}") for i, f in enumerate(frames)])


def synthesize_blur(frames: Sequence) -> np.ndarray:
    """Pixel-wise arithmetic mean of seven sharp frames."""
    return np.clip(as_sequence(frames).mean(axis=0), 0.0, 1.0)


def crop_divisible(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


def downsample(img, scale: int) -> np.ndarray:
    """Antialiased bicubic downsampling by an integer factor N in {2, 3, 4}.

    The image is first cropped (bottom/right) to the largest region divisible
    by N. Output is clamped to [0, 1].
    """
    if scale not in SCALES:
        raise DataError(f"scale must be one of {SCALES}, got {scale}")
    img = crop_divisible(np.asarray(img, dtype=np.float64), scale)
    h, w = img.shape[:2]
    return np.clip(resize(img, h // scale, w // scale), 0.0, 1.0)


def upsample_bicubic(img, scale: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.clip(resize(img, img.shape[0] * scale, img.shape[1] * scale), 0.0, 1.0)


@dataclass
class TrainingSample:
    blur_lr: np.ndarray
    sharp_lr: np.ndarray  # (7, h, w, 3)
    sharp_hr: np.ndarray
    scale: int
    source_id: str = ""
    frame_window: tuple = (0, WINDOW - 1)
    sample_id: str = ""

    def __post_init__(self):
        h, w = self.blur_lr.shape[:2]
        if self.sharp_lr.shape != (WINDOW, h, w, 3):
            raise DataError(f"sharp_lr shape {self.sharp_lr.shape} does not match blur_lr {self.blur_lr.shape}")
        if self.sharp_hr.shape[:2] != (h * self.scale, w * self.scale):
            raise DataError(
                f"sharp_hr {self.sharp_hr.shape[:2]} is not {self.scale}x blur_lr {(h, w)}")


def synthesize_sample(frames_hr: Sequence, scale: int, source_id: str = "",
                      start: int = 0) -> TrainingSample:
    """Build one (blur_lr, sharp_lr x7, sharp_hr) triple from seven HR frames."""
    seq = as_sequence(frames_hr)
    seq = np.stack([crop_divisible(f, scale) for f in seq])
    blur_hr = synthesize_blur(seq)
    return TrainingSample(
        blur_lr=downsample(blur_hr, scale),
        sharp_lr=np.stack([downsample(f, scale) for f in seq]),
        sharp_hr=seq[CENTER].copy(),
        scale=scale,
        source_id=source_id,
        frame_window=(start, start + WINDOW - 1),
        sample_id=sample_id_for(source_id, start),
    )


def sample_id_for(source_id: str, start: int) -> str:
    return f"{source_id}_{start:05d}"


# ---------------------------------------------------------------------------
# toy videos


@dataclass
class ShapeSpec:
    kind: str = "square"  # square | disc
    size: float = 12.0  # side length or diameter, pixels
    color: tuple = (1.0, 0.2, 0.2)
    position: tuple = (32.0, 32.0)  # centre (x, y) in frame 0
    velocity: tuple = (0.0, 0.0)  # pixels per frame (x, y)


@dataclass
class ToyVideoSpec:
    height: int = 64
    width: int = 64
    n_frames: int = 7
    seed: int = 0
    background: str = "texture"  # flat | gradient | texture
    shapes: List[ShapeSpec] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyVideoSpec":
        d = dict(d)
        d["shapes"] = [s if isinstance(s, ShapeSpec) else ShapeSpec(**s) for s in d.get("shapes", [])]
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _interval_coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [k, k+1) covered by [lo, hi)."""
    k = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(k + 1.0, hi) - np.maximum(k, lo), 0.0, 1.0)


_SS = 4  # disc supersampling per axis


def render_mask(shape: ShapeSpec, t: float, height: int, width: int) -> np.ndarray:
    """Area coverage of ``shape`` at frame ``t``, values in [0, 1]."""
    cx = shape.position[0] + shape.velocity[0] * t
    cy = shape.position[1] + shape.velocity[1] * t
    r = shape.size / 2.0
    if shape.kind == "square":
        return np.outer(_interval_coverage(cy - r, cy + r, height),
                        _interval_coverage(cx - r, cx + r, width))
    if shape.kind == "disc":
        offs = (np.arange(_SS) + 0.5) / _SS
        ys = (np.arange(height)[:, None] + offs[None, :]).ravel()
        xs = (np.arange(width)[:, None] + offs[None, :]).ravel()
        inside = ((ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2) <= r * r
        return inside.reshape(height, _SS, width, _SS).mean(axis=(1, 3))
    raise DataError(f"unknown shape kind {shape.kind!r}")


def _background(spec: ToyVideoSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)
    if spec.background == "flat":
        return np.broadcast_to(rng.uniform(0.1, 0.9, 3), (h, w, 3)).copy()
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    base = rng.uniform(0.2, 0.6, 3)
    tilt = rng.uniform(-0.25, 0.25, (2, 3))
    bg = base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]
    if spec.background == "texture":
        for _ in range(3):
            freq = rng.uniform(2.0, 8.0, 2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.03, 0.08, 3)
            wave = np.sin(2 * np.pi * (freq[0] * yy + freq[1] * xx) + phase)
            bg = bg + wave[..., None] * amp
    elif spec.background != "gradient":
        raise DataError(f"unknown background {spec.background!r}")
    return np.clip(bg, 0.0, 1.0)


def generate_toy_video(spec: Union[ToyVideoSpec, dict]) -> List[np.ndarray]:
    """Render a deterministic sequence of sharp frames with linear motion.

    Shapes are painted in order over a static background using exact area
    coverage (squares) or 4x4 supersampling (discs), so motion is
    sub-pixel consistent.
    """
    if isinstance(spec, dict):
        spec = ToyVideoSpec.from_dict(spec)
    if spec.height < 32 or spec.width < 32:
        raise DataError(f"toy video must be at least 32x32, got {spec.height}x{spec.width}")
    if spec.n_frames < 1:
        raise DataError("n_frames must be positive")
    for k, s in enumerate(spec.shapes):
        for t in range(spec.n_frames):
            if render_mask(s, t, spec.height, spec.width).sum() <= 0.0:
                raise DataError(f"shape {k} leaves the canvas entirely at frame {t}")
    bg = _background(spec)
    frames = []
    for t in range(spec.n_frames):
        img = bg.copy()
        for s in spec.shapes:
            m = render_mask(s, t, spec.height, spec.width)[..., None]
            img = img * (1.0 - m) + np.asarray(s.color, dtype=np.float64) * m
        frames.append(np.clip(img, 0.0, 1.0))
    return frames


@dataclass
class ToySuiteSpec:
    """Recipe for a set of random toy videos (a desk-scale video corpus)."""

    n_sequences: int = 6
    n_frames: int = 14
    height: int = 96
    width: int = 96
    n_shapes: int = 3
    max_speed: float = 2.5
    min_size: float = 10.0
    max_size: float = 28.0
    seed: int = 0
    test_fraction: float = 1.0 / 3.0

    @classmethod
    def from_dict(cls, d: dict) -> "ToySuiteSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def random_video_spec(suite: ToySuiteSpec, index: int) -> ToyVideoSpec:
    """Random shapes whose whole trajectory stays inside the canvas."""
    rng = np.random.default_rng([suite.seed, index])
    shapes = []
    span = suite.n_frames - 1
    for _ in range(suite.n_shapes):
        size = float(rng.uniform(suite.min_size, suite.max_size))
        vel = rng.uniform(-suite.max_speed, suite.max_speed, 2)
        r = size / 2.0
        pos = []
        for axis, extent in enumerate((suite.width, suite.height)):
            lo = r - min(vel[axis] * span, 0.0)
            hi = extent - r - max(vel[axis] * span, 0.0)
            if hi <= lo:
                vel[axis] = 0.0
                lo, hi = r, extent - r
            pos.append(float(rng.uniform(lo, hi)))
        shapes.append(ShapeSpec(
            kind=str(rng.choice(["square", "disc"])),
            size=size,
            color=tuple(float(c) for c in rng.uniform(0.0, 1.0, 3)),
            position=tuple(pos),
            velocity=tuple(float(v) for v in vel),
        ))
    return ToyVideoSpec(height=suite.height, width=suite.width, n_frames=suite.n_frames,
                        seed=int(rng.integers(2**31)), background="texture", shapes=shapes)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class SampleRecord:
    sample_id: str
    split: str
    source_id: str
    frame_window: List[int]
    blur_lr: str
    sharp_lr: List[str]
    sharp_hr: str
    lr_shape: List[int]
    hr_shape: List[int]


@dataclass
class DatasetManifest:
    scale: int
    stride: int
    kernel: str = KERNEL_ID
    window: int = WINDOW
    split: Dict[str, List[str]] = field(default_factory=lambda: {"train": [], "test": []})
    samples: List[SampleRecord] = field(default_factory=list)
    skipped: List[dict] = field(default_factory=list)
    source: dict = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION
    root: Optional[Path] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("root")
        return d

    def dumps(self) -> str:
        return fileio.dumps_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "DatasetManifest":
        d = dict(d)
        d["samples"] = [SampleRecord(**s) for s in d.get("samples", [])]
        return cls(**d, root=None if root is None else Path(root))

    @classmethod
    def loads(cls, text: str, root=None) -> "DatasetManifest":
        import json
        return cls.from_dict(json.loads(text), root)

    def subset(self, split: str) -> List[SampleRecord]:
        return [s for s in self.samples if s.split == split]

    def validate(self, check_files: bool = True):
        train, test = set(self.split.get("train", [])), set(self.split.get("test", []))
        overlap = train & test
        if overlap:
            raise DataError(f"sources in both splits: {sorted(overlap)}")
        for s in self.samples:
            if s.source_id not in set(self.split.get(s.split, [])):
                raise DataError(f"sample {s.sample_id} source not listed in split {s.split}")
            if check_files and self.root is not None:
                for rel in [s.blur_lr, s.sharp_hr, *s.sharp_lr]:
                    if not (self.root / rel).is_file():
                        raise DataError(f"missing file {rel} for sample {s.sample_id}")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    if not path.is_file():
        raise DataError(f"no manifest at {path}")
    return DatasetManifest.loads(path.read_text(encoding="utf-8"), root=path.parent)


def load_sample(manifest: DatasetManifest, record: SampleRecord,
                dtype=np.float32) -> TrainingSample:
    root = manifest.root
    return TrainingSample(
        blur_lr=fileio.read_image(root / record.blur_lr, dtype),
        sharp_lr=np.stack([fileio.read_image(root / p, dtype) for p in record.sharp_lr]),
        sharp_hr=fileio.read_image(root / record.sharp_hr, dtype),
        scale=manifest.scale,
        source_id=record.source_id,
        frame_window=tuple(record.frame_window),
        sample_id=record.sample_id,
    )


# ---------------------------------------------------------------------------
# dataset building


@dataclass
class _Source:
    source_id: str
    split: str
    frames: Optional[List[np.ndarray]] = None  # in-memory (toy) frames
    paths: Optional[List[Path]] = None  # frame files on disk

    def __len__(self):
        return len(self.frames) if self.frames is not None else len(self.paths)


def _split_ids(ids: List[str], test_fraction: float) -> Dict[str, str]:
    n_test = int(math.ceil(len(ids) * test_fraction)) if len(ids) > 1 else 0
    n_test = min(n_test, len(ids) - 1) if len(ids) > 1 else 0
    return {sid: ("test" if i >= len(ids) - n_test else "train") for i, sid in enumerate(ids)}


def _frame_files(d: Path) -> List[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _directory_sources(root: Path, test_fraction: float) -> List[_Source]:
    """Each subdirectory is one video. ``train/`` and ``test/`` subdirectories,
    when present, fix the split; otherwise videos are split by sorted order."""
    if not root.is_dir():
        raise DataError(f"source directory {root} does not exist")
    if (root / "train").is_dir() or (root / "test").is_dir():
        out = []
        for split in ("train", "test"):
            if (root / split).is_dir():
                for d in sorted(p for p in (root / split).iterdir() if p.is_dir()):
                    out.append(_Source(d.name, split, paths=_frame_files(d)))
        return out
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs and _frame_files(root):
        dirs = [root]
    splits = _split_ids([d.name for d in dirs], test_fraction)
    return [_Source(d.name, splits[d.name], paths=_frame_files(d)) for d in dirs]


def _toy_sources(suite: ToySuiteSpec) -> List[_Source]:
    ids = [f"toy{i:03d}" for i in range(suite.n_sequences)]
    splits = _split_ids(ids, suite.test_fraction)
    return [_Source(sid, splits[sid], frames=generate_toy_video(random_video_spec(suite, i)))
            for i, sid in enumerate(ids)]


def _write_window(task) -> dict:
    """Synthesize and store one window. Runs in worker processes."""
    root, split, source_id, start, scale, frames, paths = task
    if frames is None:
        try:
            frames = [fileio.read_image(p, np.float64) for p in paths]
        except Exception as exc:  # unreadable or corrupt frame file
            return {"dropped": {"source_id": source_id, "start": start,
                                "reason": f"unreadable frame: {exc}"}}
    try:
        sample = synthesize_sample(frames, scale, source_id, start)
    except DataError as exc:
        return {"dropped": {"source_id": source_id, "start": start, "reason": str(exc)}}

    seq = np.stack([crop_divisible(np.asarray(f, np.float64), scale) for f in frames])
    check = downsample(seq.mean(axis=0), scale)
    err = float(np.abs(check - sample.blur_lr).max())
    if err > MEAN_IDENTITY_TOL:
        raise AssertionError(f"mean identity violated for {sample.sample_id}: {err}")

    sdir = Path(split) / sample.sample_id
    rec = SampleRecord(
        sample_id=sample.sample_id,
        split=split,
        source_id=source_id,
        frame_window=list(sample.frame_window),
        blur_lr=str(sdir / "blur_lr.png"),
        sharp_lr=[str(sdir / f"sharp_lr_{i + 1}.png") for i in range(WINDOW)],
        sharp_hr=str(sdir / "sharp_hr.png"),
        lr_shape=list(sample.blur_lr.shape[:2]),
        hr_shape=list(sample.sharp_hr.shape[:2]),
    )
    root = Path(root)
    fileio.write_png(root / rec.blur_lr, sample.blur_lr)
    for i, p in enumerate(rec.sharp_lr):
        fileio.write_png(root / p, sample.sharp_lr[i])
    fileio.write_png(root / rec.sharp_hr, sample.sharp_hr)
    return {"record": asdict(rec)}


def window_starts(n_frames: int, stride: int) -> List[int]:
    return list(range(0, n_frames - WINDOW + 1, stride))


def build_dataset(source: Union[str, Path, ToySuiteSpec, dict], out_root, scale: int,
                  stride: int = WINDOW, workers: int = 1,
                  test_fraction: float = 1.0 / 3.0) -> DatasetManifest:
    """Synthesize every sliding window of every source video and write the
    dataset plus ``manifest.json`` (written last, atomically).

    ``source`` is a directory of frame directories or a toy-suite recipe.
    Windows are independent; with ``workers > 1`` they are produced by a
    process pool and the manifest is assembled in sorted order, so the result
    does not depend on the worker count.
    """
    if scale not in SCALES:
        raise DataError(f"scale must be one of {SCALES}, got {scale}")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    out_root = Path(out_root)

    if isinstance(source, dict):
        source = ToySuiteSpec.from_dict(source)
    if isinstance(source, ToySuiteSpec):
        sources = _toy_sources(source)
        source_info = {"kind": "toy", "spec": source.to_dict()}
    else:
        sources = _directory_sources(Path(source), test_fraction)
        source_info = {"kind": "directory", "path": str(Path(source))}

    manifest = DatasetManifest(scale=scale, stride=stride, source=source_info, root=out_root)
    tasks = []
    for src in sources:
        if len(src) < WINDOW:
            log.warning("skipping %s: %d frames < %d", src.source_id, len(src), WINDOW)
            manifest.skipped.append({"source_id": src.source_id,
                                     "reason": f"too short: {len(src)} frames"})
            continue
        manifest.split.setdefault(src.split, []).append(src.source_id)
        for start in window_starts(len(src), stride):
            frames = None if src.frames is None else src.frames[start:start + WINDOW]
            paths = None if src.paths is None else src.paths[start:start + WINDOW]
            tasks.append((str(out_root), src.split, src.source_id, start, scale, frames, paths))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_write_window, tasks))
    else:
        results = [_write_window(t) for t in tasks]

    for res in results:
        if "dropped" in res:
            log.warning("dropped window %s", res["dropped"])
            manifest.skipped.append(res["dropped"])
        else:
            manifest.samples.append(SampleRecord(**res["record"]))
    manifest.samples.sort(key=lambda s: (s.split, s.sample_id))
    manifest.skipped.sort(key=lambda s: (s["source_id"], s.get("start", -1)))
    for ids in manifest.split.values():
        ids.sort()
    manifest.validate()
    fileio.atomic_write_bytes(out_root / MANIFEST_NAME, manifest.dumps().encode("utf-8"))
    return manifest


def iter_samples(manifest: DatasetManifest, split: Optional[str] = None) -> Iterable[TrainingSample]:
    for rec in manifest.samples:
        if split is None or rec.split == split:
            yield load_sample(manifest, rec)
