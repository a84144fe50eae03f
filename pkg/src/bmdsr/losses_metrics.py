"""Training losses (central, pairwise, content) and PSNR/SSIM.

Loss functions take torch tensors of shape (..., 3, H, W) and return scalar
tensors; reductions are means, so an "L1" below is a mean absolute error.
The metric functions accept numpy arrays (H, W, 3) or tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import CENTER_INDEX, NUM_FRAMES, NetworkOutput, Variant

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# perceptual extractors


class PerceptualExtractor(nn.Module):
    """Frozen feature transform Image -> feature map."""

    id: str = "base"

    def __init__(self):
        super().__init__()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


class IdentityExtractor(PerceptualExtractor):
    id = "identity"

    def forward(self, x):
        return x


class FixedRandomConv(PerceptualExtractor):
    """Three frozen 3x3 conv layers with fixed-seed weights and ReLUs between."""

    id = "fixed-random-conv"

    def __init__(self, widths=(16, 32, 32), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = 3
        for k, w in enumerate(widths):
            conv = nn.Conv2d(prev, w, 3, padding=1)
            bound = math.sqrt(6.0 / (prev * 9))
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.zero_()
            layers.append(conv)
            if k < len(widths) - 1:
                layers.append(nn.ReLU())
            prev = w
        self.body = nn.Sequential(*layers)
        self.freeze()

    def forward(self, x):
        return self.body(x)


class VGG19LastConv(PerceptualExtractor):
    """Features of the last convolutional layer (conv5_4, pre-activation) of
    VGG19. Needs pretrained weights: a local state-dict path or a torchvision
    download."""

    id = "vgg19-lastconv"
    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: Optional[str] = None):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        if weights_path is not None:
            net = vgg19(weights=None)
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        else:
            net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        self.body = net.features[:35]
        self.register_buffer("mean", torch.tensor(self._MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self._STD).view(1, 3, 1, 1))
        self.freeze()

    def forward(self, x):
        return self.body((x - self.mean) / self.std)


EXTRACTORS: Dict[str, Callable[[], PerceptualExtractor]] = {
    "identity": IdentityExtractor,
    "fixed-random-conv": FixedRandomConv,
    "vgg19-lastconv": VGG19LastConv,
}


def make_extractor(name: str, **kwargs) -> PerceptualExtractor:
    try:
        return EXTRACTORS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown extractor {name!r}; choose from {sorted(EXTRACTORS)}") from None


def _features(phi: nn.Module, x: torch.Tensor) -> torch.Tensor:
    flat = x.reshape(-1, *x.shape[-3:])
    param = next(iter(phi.parameters()), None)
    if param is not None and param.dtype != flat.dtype:
        raise TypeError(f"extractor is {param.dtype} but input is {flat.dtype}; "
                        f"convert the extractor explicitly")
    return phi(flat)


# ---------------------------------------------------------------------------
# losses


def s2d_central_loss(out4: torch.Tensor, sharp4: torch.Tensor,
                     phi: nn.Module) -> torch.Tensor:
    """Central-frame loss: pixel L1 plus L1 between extractor features."""
    _check_same(out4, sharp4, "s2d_central_loss")
    pixel = (sharp4 - out4).abs().mean()
    feat = (_features(phi, sharp4) - _features(phi, out4)).abs().mean()
    return pixel + feat


def _frame_pairs(seq: torch.Tensor):
    """(i, 8 - i) pairs for i = 1, 2, 3 along the frame axis (dim -4)."""
    for i in range(3):
        yield seq.select(-4, i), seq.select(-4, NUM_FRAMES - 1 - i)


def s2d_pairwise_loss(out: torch.Tensor, sharp: torch.Tensor) -> torch.Tensor:
    """Order-invariant loss on the six non-central frames.

    For each symmetric pair, compare the pixel-wise sums and the pixel-wise
    absolute differences; both are unchanged by swapping the pair members.
    """
    if out.shape[-4] != NUM_FRAMES or sharp.shape[-4] != NUM_FRAMES:
        raise ValueError(f"s2d_pairwise_loss needs {NUM_FRAMES}-frame sequences, "
                         f"got {out.shape[-4]} and {sharp.shape[-4]}")
    _check_same(out, sharp, "s2d_pairwise_loss")
    total = out.new_zeros(())
    for (s_a, s_b), (o_a, o_b) in zip(_frame_pairs(sharp), _frame_pairs(out)):
        total = total + ((s_a + s_b) - (o_a + o_b)).abs().mean()
        total = total + ((s_a - s_b).abs() - (o_a - o_b).abs()).abs().mean()
    return total


def content_mse_loss(pred_hr: torch.Tensor, sharp_hr: torch.Tensor) -> torch.Tensor:
    _check_same(pred_hr, sharp_hr, "content_mse_loss")
    return ((sharp_hr - pred_hr) ** 2).mean()


@dataclass
class LossBreakdown:
    terms: Dict[str, torch.Tensor]
    weights: Dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        return sum(self.weights.get(k, 1.0) * v for k, v in self.terms.items())

    def as_floats(self) -> Dict[str, float]:
        d = {k: float(v.detach()) for k, v in self.terms.items()}
        d["total"] = float(self.total.detach())
        return d


def loss_term_names(variant) -> list:
    variant = Variant(variant)
    names = []
    if variant.uses_bmdnet:
        names += ["s2d_central", "s2d_pairwise"]
    names += [f"content_{s}" for s in variant.streams]
    if variant.uses_funet:
        names.append("content_funet")
    return names


def total_loss(output: NetworkOutput, sharp_lr: Optional[torch.Tensor],
               sharp_hr: torch.Tensor, variant, phi: Optional[nn.Module] = None,
               weights: Optional[Dict[str, float]] = None) -> LossBreakdown:
    """Assemble the weighted loss for one variant.

    Static-to-dynamic terms exist only when BMDNet is active; every active HR
    head (streams and FuNet) is supervised against ``sharp_hr``.
    """
    variant = Variant(variant)
    terms: Dict[str, torch.Tensor] = {}
    if variant.uses_bmdnet:
        if output.frames_lr is None:
            raise ValueError("variant needs the BMDNet head 'frames_lr'")
        if sharp_lr is None:
            raise ValueError("variant needs sharp LR frames for supervision")
        if phi is None:
            raise ValueError("variant needs a perceptual extractor")
        terms["s2d_central"] = s2d_central_loss(
            output.frames_lr.select(-4, CENTER_INDEX), sharp_lr.select(-4, CENTER_INDEX), phi)
        terms["s2d_pairwise"] = s2d_pairwise_loss(output.frames_lr, sharp_lr)
    for stream in variant.streams:
        if stream not in output.stream_hr:
            raise ValueError(f"missing required head {stream!r}")
        terms[f"content_{stream}"] = content_mse_loss(output.stream_hr[stream], sharp_hr)
    if variant.uses_funet:
        terms["content_funet"] = content_mse_loss(output.fused_hr, sharp_hr)
    w = {k: 1.0 for k in terms}
    if weights:
        w.update({k: float(v) for k, v in weights.items() if k in terms})
    return LossBreakdown(terms, w)


# ---------------------------------------------------------------------------
# metrics


def _as_chw64(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        t = img.detach().to(torch.float64)
        if t.dim() == 3 and t.shape[0] == 3:
            return t
        return t.permute(2, 0, 1)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {arr.shape}")
    return torch.from_numpy(arr).permute(2, 0, 1)


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1], capped at 100 dB for identical inputs."""
    ta, tb = _as_chw64(a), _as_chw64(b)
    _check_same(ta, tb, "psnr")
    mse = float(((ta - tb) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(1.0 / math.sqrt(mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, per channel then averaged."""
    ta, tb = _as_chw64(a), _as_chw64(b)
    _check_same(ta, tb, "ssim")
    if min(ta.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = gaussian_window().view(1, 1, SSIM_WINDOW, SSIM_WINDOW).repeat(3, 1, 1, 1)
    x, y = ta.unsqueeze(0), tb.unsqueeze(0)
    filt = lambda t: F.conv2d(t, win, groups=3)
    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    per_channel = (num / den).mean(dim=(0, 2, 3))
    return float(per_channel.mean())


@dataclass
class QualityScore:
    psnr: float
    ssim: float


def quality(pred, target) -> QualityScore:
    return QualityScore(psnr=psnr(pred, target), ssim=ssim(pred, target))
