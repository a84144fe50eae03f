"""Sub-networks of the deblurring super-resolution model and their composition.

Four building blocks:

* ``BMDNet``  -- one blurred LR image -> seven sharp LR frames (21 channels).
* ``StreamNet`` -- recurrent Conv+ConvLSTM encoder/decoder over the seven
  frames; used once forward (ForNet) and once on the reversed sequence
  (BackNet) with the *same* weights.
* ``CoreNet`` -- residual SR network applied to the central frame.
* ``FuNet``   -- small residual fusion head over the concatenated HR streams.

``BMDSRNet`` wires them together for the four ablation variants.
Tensors are NCHW; a frame sequence is ``(B, 7, 3, H, W)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_FRAMES = 7
CENTER_INDEX = 3  # frame 4 of 1..7, zero-based
SCALES = (2, 3, 4)

# Layer widths at channel multiplier 1.0
RES_WIDTH = 64
NUM_RES_BLOCKS = 9
FUNET_BLOCKS = 3
ENCODER_WIDTHS = (32, 64, 128, 256, 256, 256, 512)
ENCODER_STRIDES = (1, 2, 1, 2, 1, 2, 1)
DECODER_WIDTHS = (256, 128, 128, 128, 64, 32)
DECODER_STRIDES = (1, 2, 1, 2, 1, 2)
TAIL_WIDTH = 32
STREAM_DOWNSCALE = 8
HEAD_INIT_SCALE = 0.01


class Variant(str, Enum):
    SRNET = "SRNET"
    C = "C"
    FC = "FC"
    FCB = "FCB"

    @property
    def uses_bmdnet(self) -> bool:
        return self is not Variant.SRNET

    @property
    def streams(self) -> tuple:
        return {
            Variant.SRNET: ("corenet",),
            Variant.C: ("corenet",),
            Variant.FC: ("fornet", "corenet"),
            Variant.FCB: ("fornet", "corenet", "backnet"),
        }[self]

    @property
    def uses_funet(self) -> bool:
        return len(self.streams) > 1


@dataclass
class ModelConfig:
    scale: int = 4
    variant: Variant = Variant.FCB
    channel_multiplier: float = 1.0
    extractor: str = "fixed-random-conv"
    seed: int = 0
    # each head predicts a correction on top of its natural base image
    global_residual: bool = True

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale}")
        if not 0.0 < self.channel_multiplier <= 1.0:
            raise ValueError(
                f"channel_multiplier must lie in (0, 1], got {self.channel_multiplier}")

    def width(self, base: int) -> int:
        """Scaled layer width: multiple of 4, at least 4."""
        return max(4, int(round(base * self.channel_multiplier / 4.0)) * 4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def conv3x3(in_ch: int, out_ch: int, stride: int = 1, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=bias)


def deconv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.ConvTranspose2d:
    # output_padding makes stride-2 deconvs exactly double the spatial size
    return nn.ConvTranspose2d(in_ch, out_ch, 3, stride=stride, padding=1,
                              output_padding=stride - 1)


class ResBlock(nn.Module):
    """conv-ReLU-conv plus identity, no normalization."""

    def __init__(self, width: int):
        super().__init__()
        self.conv1 = conv3x3(width, width)
        self.conv2 = conv3x3(width, width)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Upsample(nn.Module):
    """Bilinear resize by an integer factor (works for any N)."""

    def __init__(self, factor: int, mode: str = "bilinear"):
        super().__init__()
        self.factor = factor
        self.mode = mode

    def forward(self, x):
        return F.interpolate(x, scale_factor=self.factor, mode=self.mode,
                             align_corners=False)

    def extra_repr(self):
        return f"factor={self.factor}"


class _ResidualTrunk(nn.Module):
    """Shared skeleton of BMDNet and CoreNet.

    L1 conv, L2 conv+ReLU, nine residual blocks, (optional ReLU+upsampling
    after B9), L3/L4 conv+ReLU, L5 conv.
    """

    head = "l5"

    def __init__(self, in_ch: int, out_ch: int, width: int, upscale: int = 1):
        super().__init__()
        self.l1 = conv3x3(in_ch, width)
        self.l2 = conv3x3(width, width)
        self.blocks = nn.Sequential(*[ResBlock(width) for _ in range(NUM_RES_BLOCKS)])
        self.upscale = upscale
        self.up = Upsample(upscale) if upscale > 1 else nn.Identity()
        self.l3 = conv3x3(width, width)
        self.l4 = conv3x3(width, width)
        self.l5 = conv3x3(width, out_ch)

    def forward(self, x):
        x = F.relu(self.l2(self.l1(x)))
        x = self.blocks(x)
        if self.upscale > 1:
            x = self.up(F.relu(x))
        x = F.relu(self.l3(x))
        x = F.relu(self.l4(x))
        return self.l5(x)


def _check_rgb(x: torch.Tensor, name: str):
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"{name} expects a (B, 3, H, W) tensor, got {tuple(x.shape)}")


class BMDNet(_ResidualTrunk):
    """Blurred LR image -> seven sharp LR frames at the input resolution.

    With ``global_residual`` every frame is the input plus a predicted offset.
    """

    def __init__(self, width: int = RES_WIDTH, global_residual: bool = True):
        super().__init__(3, 3 * NUM_FRAMES, width)
        self.global_residual = global_residual

    def forward(self, blur):
        _check_rgb(blur, "BMDNet")
        out = super().forward(blur)
        b, _, h, w = out.shape
        # contiguous channel triples, frame order 1..7
        frames = out.view(b, NUM_FRAMES, 3, h, w)
        if self.global_residual:
            frames = frames + blur.unsqueeze(1)
        return frames


class CoreNet(_ResidualTrunk):
    """Central LR frame -> HR image, N times larger."""

    def __init__(self, scale: int, width: int = RES_WIDTH, global_residual: bool = True):
        super().__init__(3, 3, width, upscale=scale)
        self.global_residual = global_residual
        self.base_up = Upsample(scale, "bicubic")

    def forward(self, x):
        _check_rgb(x, "CoreNet")
        out = super().forward(x)
        if self.global_residual:
            out = out + self.base_up(x)
        return out


class ConvLSTMCell(nn.Module):
    """Standard four-gate ConvLSTM with 3x3 kernels.

    The input and recurrent convolutions are kept separate so the recurrent
    kernel can be initialized orthogonally.
    """

    def __init__(self, in_ch: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.input_conv = conv3x3(in_ch, 4 * hidden)
        self.recurrent_conv = conv3x3(hidden, 4 * hidden, bias=False)

    def forward(self, x, state=None):
        if state is None:
            zeros = x.new_zeros(x.shape[0], self.hidden, x.shape[2], x.shape[3])
            state = (zeros, zeros)
        h, c = state
        gates = self.input_conv(x) + self.recurrent_conv(h)
        i, f, g, o = torch.chunk(gates, 4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class StreamNet(nn.Module):
    """Recurrent encoder/decoder producing one HR image from seven LR frames.

    Encoder stages 2, 4 and 6 downsample by 2; the decoder mirrors them and
    concatenates the final-time-step hidden state of the equal-resolution
    encoder stage. Inputs whose size is not a multiple of 8 are reflect-padded
    and the output cropped back.
    """

    head = "out_conv"

    def __init__(self, scale: int, config: Optional[ModelConfig] = None):
        super().__init__()
        cfg = config or ModelConfig(scale=scale)
        enc_w = [cfg.width(w) for w in ENCODER_WIDTHS]
        dec_w = [cfg.width(w) for w in DECODER_WIDTHS]
        tail = cfg.width(TAIL_WIDTH)
        self.scale = scale
        self.global_residual = cfg.global_residual

        self.enc_convs = nn.ModuleList()
        self.enc_cells = nn.ModuleList()
        prev = 3
        for w, s in zip(enc_w, ENCODER_STRIDES):
            self.enc_convs.append(conv3x3(prev, w, stride=s))
            self.enc_cells.append(ConvLSTMCell(w, w))
            prev = w

        # decoder stage j concatenates encoder stage (6 - j), zero-based
        self.dec_deconvs = nn.ModuleList()
        self.dec_convs = nn.ModuleList()
        for j, (w, s) in enumerate(zip(dec_w, DECODER_STRIDES)):
            skip = enc_w[len(enc_w) - 2 - j]
            self.dec_deconvs.append(deconv3x3(prev, w, stride=s))
            self.dec_convs.append(conv3x3(w + skip, w))
            prev = w
        self.final_deconv = deconv3x3(prev, tail)
        self.up = Upsample(scale)
        self.up_conv = conv3x3(tail, tail)
        self.out_conv = conv3x3(tail, 3)
        self.base_up = Upsample(scale, "bicubic")

    def forward(self, frames):
        if frames.dim() != 5 or frames.shape[1] != NUM_FRAMES or frames.shape[2] != 3:
            raise ValueError(
                f"StreamNet expects (B, {NUM_FRAMES}, 3, H, W), got {tuple(frames.shape)}")
        h, w = frames.shape[-2:]
        ph = (-h) % STREAM_DOWNSCALE
        pw = (-w) % STREAM_DOWNSCALE
        if ph or pw:
            b = frames.shape[0]
            flat = frames.reshape(b * NUM_FRAMES, 3, h, w)
            mode = "reflect" if ph < h and pw < w else "replicate"
            flat = F.pad(flat, (0, pw, 0, ph), mode=mode)
            frames = flat.view(b, NUM_FRAMES, 3, h + ph, w + pw)

        states: List = [None] * len(self.enc_cells)
        for t in range(NUM_FRAMES):
            x = frames[:, t]
            for k, (conv, cell) in enumerate(zip(self.enc_convs, self.enc_cells)):
                x = F.relu(conv(x))
                states[k] = cell(x, states[k])
                x = states[k][0]
        hidden = [s[0] for s in states]

        x = hidden[-1]
        n_enc = len(hidden)
        for j, (deconv, conv) in enumerate(zip(self.dec_deconvs, self.dec_convs)):
            x = F.relu(deconv(x))
            x = F.relu(conv(torch.cat([x, hidden[n_enc - 2 - j]], dim=1)))
        x = F.relu(self.final_deconv(x))
        x = F.relu(self.up_conv(self.up(x)))
        out = self.out_conv(x)
        if self.global_residual:
            out = out + self.base_up(frames[:, CENTER_INDEX])
        if ph or pw:
            out = out[..., : h * self.scale, : w * self.scale]
        return out


class FuNet(nn.Module):
    """Fuses 2 or 3 HR estimates: entry conv, three residual blocks, two
    conv+ReLU layers and an output conv. No upsampling."""

    head = "out_conv"

    def __init__(self, num_inputs: int, width: int = RES_WIDTH, global_residual: bool = True):
        super().__init__()
        if num_inputs not in (2, 3):
            raise ValueError(f"FuNet fuses 2 or 3 streams, got {num_inputs}")
        self.num_inputs = num_inputs
        self.global_residual = global_residual
        self.entry = conv3x3(3 * num_inputs, width)
        self.blocks = nn.Sequential(*[ResBlock(width) for _ in range(FUNET_BLOCKS)])
        self.conv1 = conv3x3(width, width)
        self.conv2 = conv3x3(width, width)
        self.out_conv = conv3x3(width, 3)

    def forward(self, *images):
        if len(images) != self.num_inputs:
            raise ValueError(f"FuNet built for {self.num_inputs} inputs, got {len(images)}")
        shape = images[0].shape
        for k, im in enumerate(images):
            if im.shape != shape:
                raise ValueError(
                    f"FuNet input {k} has shape {tuple(im.shape)}, expected {tuple(shape)}")
        x = F.relu(self.entry(torch.cat(images, dim=1)))
        x = self.blocks(x)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        out = self.out_conv(x)
        if self.global_residual:
            out = out + torch.stack(images).mean(dim=0)
        return out


@dataclass
class NetworkOutput:
    fused_hr: torch.Tensor
    frames_lr: Optional[torch.Tensor] = None
    stream_hr: Dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass
class ParameterCount:
    parts: Dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.parts.values())

    def to_dict(self) -> dict:
        return {**self.parts, "total": self.total}


def init_weights(module: nn.Module, generator: Optional[torch.Generator] = None):
    """Fan-in uniform for convs, orthogonal for recurrent kernels, zero biases."""
    for name, m in module.named_modules():
        if isinstance(m, ConvLSTMCell):
            w = m.recurrent_conv.weight
            with torch.no_grad():
                flat = torch.empty(w.shape[0], w[0].numel())
                nn.init.orthogonal_(flat, generator=generator)
                w.copy_(flat.view_as(w))
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            if name.endswith("recurrent_conv"):
                continue
            w = m.weight
            fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w.shape[2] * w.shape[3]
            bound = math.sqrt(6.0 / fan_in)  # He-uniform, suits ReLU stacks
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    # residual branches start small so deep stacks begin near identity
    for m in module.modules():
        if isinstance(m, ResBlock):
            with torch.no_grad():
                m.conv2.weight.mul_(0.1)
        # heads on a global residual start close to their anchor image
        if getattr(m, "global_residual", False):
            with torch.no_grad():
                getattr(m, m.head).weight.mul_(HEAD_INIT_SCALE)


class BMDSRNet(nn.Module):
    """Composite model; only the sub-networks of the chosen variant exist.

    Checkpoint key schema: ``bmdnet.*``, ``stream.*`` (shared by ForNet and
    BackNet), ``corenet.*``, ``funet.*``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        v = config.variant
        w = config.width(RES_WIDTH)
        gr = config.global_residual
        self.bmdnet = BMDNet(w, gr) if v.uses_bmdnet else None
        self.corenet = CoreNet(config.scale, w, gr)
        self.stream = StreamNet(config.scale, config) if "fornet" in v.streams else None
        self.funet = FuNet(len(v.streams), w, gr) if v.uses_funet else None
        gen = torch.Generator().manual_seed(config.seed)
        init_weights(self, gen)

    @property
    def variant(self) -> Variant:
        return self.config.variant

    def decompose(self, blur_lr):
        if self.bmdnet is None:
            raise ValueError(f"variant {self.variant.value} has no BMDNet")
        return self.bmdnet(blur_lr)

    def forward(self, blur_lr) -> NetworkOutput:
        _check_rgb(blur_lr, "BMDSRNet")
        if self.bmdnet is None:
            core = self.corenet(blur_lr)
            return NetworkOutput(fused_hr=core, stream_hr={"corenet": core})

        frames = self.bmdnet(blur_lr)
        streams = {"corenet": self.corenet(frames[:, CENTER_INDEX])}
        if self.stream is not None:
            streams["fornet"] = self.stream(frames)
            if "backnet" in self.variant.streams:
                streams["backnet"] = self.stream(torch.flip(frames, dims=[1]))
        if self.funet is None:
            fused = streams["corenet"]
        else:
            fused = self.funet(*[streams[k] for k in self.variant.streams])
        return NetworkOutput(fused_hr=fused, frames_lr=frames, stream_hr=streams)

    def count_parameters(self) -> ParameterCount:
        return count_parameters(self)


def _numel(module: Optional[nn.Module]) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())


def count_parameters(model: BMDSRNet) -> ParameterCount:
    """Per-sub-network parameter counts; the shared stream is counted once."""
    parts = {"corenet": _numel(model.corenet)}
    if model.bmdnet is not None:
        parts["bmdnet"] = _numel(model.bmdnet)
    if model.stream is not None:
        parts["stream"] = _numel(model.stream)
    if model.funet is not None:
        parts["funet"] = _numel(model.funet)
    return ParameterCount(parts)


def build_model(config: ModelConfig) -> BMDSRNet:
    return BMDSRNet(config)


def model_forward(model: BMDSRNet, blur_lr: torch.Tensor) -> NetworkOutput:
    """Accepts a single (3, H, W) image or a (B, 3, H, W) batch."""
    single = blur_lr.dim() == 3
    out = model(blur_lr.unsqueeze(0) if single else blur_lr)
    if not single:
        return out
    squeeze = lambda t: None if t is None else t[0]
    return NetworkOutput(fused_hr=out.fused_hr[0],
                         frames_lr=squeeze(out.frames_lr),
                         stream_hr={k: v[0] for k, v in out.stream_hr.items()})
