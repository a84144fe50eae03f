import numpy as np
import pytest
import torch

from bmdsr.data_pipeline import ToySuiteSpec, build_dataset


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    """Three 21-frame toy videos, N=2, stride 7: 9 samples, 2 videos train / 1 test."""
    root = tmp_path_factory.mktemp("toy_x2")
    suite = ToySuiteSpec(n_sequences=3, n_frames=21, height=64, width=64, seed=5)
    return build_dataset(suite, root, scale=2, stride=7)


def pil_downsample(img, scale):
    """Reference resampler: PIL bicubic (antialiased) on float32 channels."""
    from PIL import Image

    h, w = img.shape[0] // scale * scale, img.shape[1] // scale * scale
    img = img[:h, :w]
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F")
                        .resize((w // scale, h // scale), Image.BICUBIC))
             for c in range(3)]
    return np.clip(np.stack(chans, -1).astype(np.float64), 0.0, 1.0)


def loop_mean(frames):
    """Per-pixel arithmetic mean by explicit scalar loops."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    h, w, c = frames[0].shape
    out = np.zeros((h, w, c))
    for y in range(h):
        for x in range(w):
            for k in range(c):
                acc = 0.0
                for f in frames:
                    acc += float(f[y, x, k])
                out[y, x, k] = acc / len(frames)
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
