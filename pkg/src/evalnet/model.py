"""Two-stage reconstruction network.

The construction stage is a residual U-shaped encoder followed by five
Hierarchical Fusion Decoder stages (structure-residual fusion plus a
multi-scale dilated aggregator). The refinement stage is a dual-branch
refiner that lets each low-resolution position attend to its window in a
high-resolution mask branch and predicts a residual correction.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ModelConfig:
    in_channels: int = 7
    encoder_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512])
    decoder_channels: list[int] = field(default_factory=lambda: [512, 256, 128, 64, 32])
    ma_dilations: list[int] = field(default_factory=lambda: [1, 4, 9])
    srf_enabled: bool = True
    ma_enabled: bool = True
    dfr_enabled: bool = True
    cla_window: int = 5
    scale_ratio: int = 5
    dfr_channels: int = 32
    dfr_blocks_low: int = 4
    dfr_blocks_high: int = 4
    dfr_blocks_fused: int = 2
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.decoder_channels = [int(c) for c in self.decoder_channels]
        self.ma_dilations = [int(d) for d in self.ma_dilations]
        self.validate()

    def validate(self) -> None:
        if len(self.encoder_channels) != 5 or len(self.decoder_channels) != 5:
            raise ValueError("encoder_channels and decoder_channels need exactly 5 entries")
        counts = [self.in_channels, self.dfr_channels, *self.encoder_channels, *self.decoder_channels]
        if any(c <= 0 for c in counts):
            raise ValueError("channel counts must be positive")
        # tensors entering a pixel shuffle must split into 4 sub-pixel groups
        shuffled = [self.encoder_channels[-1], *self.decoder_channels[:-1]]
        if any(c % 4 for c in shuffled):
            raise ValueError(f"channels feeding PixelShuffle must be divisible by 4, got {shuffled}")
        if self.cla_window < 1 or self.cla_window % 2 == 0:
            raise ValueError("cla_window must be odd")
        if self.scale_ratio < 1:
            raise ValueError("scale_ratio must be >= 1")
        if not self.ma_dilations or any(d < 1 for d in self.ma_dilations):
            raise ValueError("ma_dilations must be positive")
        if min(self.dfr_blocks_low, self.dfr_blocks_high, self.dfr_blocks_fused) < 0:
            raise ValueError("block counts must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


class Module:
    """Container that discovers parameters and sub-modules from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        padding: Optional[int] = None,
        zero_init: bool = False,
        bias: bool = True,
    ):
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel // 2) if padding is None else padding
        fan_in = in_ch * kernel * kernel
        shape = (out_ch, in_ch, kernel, kernel)
        if zero_init:
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class EncoderStage(Module):
    """Two 3x3 conv+ReLU with an additive shortcut, then a stride-2 conv."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.conv_a = Conv2d(in_ch, out_ch, 3, rng)
        self.conv_b = Conv2d(out_ch, out_ch, 3, rng)
        self.shortcut = Conv2d(in_ch, out_ch, 1, rng) if in_ch != out_ch else None
        self.down = Conv2d(out_ch, out_ch, 3, rng, stride=2, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.relu(self.conv_b(T.relu(self.conv_a(x))))
        y = y + (self.shortcut(x) if self.shortcut is not None else x)
        return T.relu(self.down(y))


class Encoder(Module):
    def __init__(self, in_ch: int, channels: list[int], rng: np.random.Generator):
        widths = [in_ch, *channels]
        self.stages = [EncoderStage(widths[i], widths[i + 1], rng) for i in range(len(channels))]

    def __call__(self, x: Tensor) -> list[Tensor]:
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise T.ShapeError(f"input extent {h}x{w} must be divisible by 32")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class StructureResidualFusion(Module):
    """Skip fusion with separate content (1x1) and structure (5x5) paths.

    The structure path is gated by a sigmoid and added to the main path after
    the fusion convolution.
    """

    def __init__(self, skip_ch: int, up_ch: int, out_ch: int, rng: np.random.Generator):
        self.content = Conv2d(skip_ch, out_ch, 1, rng)
        self.structure = Conv2d(skip_ch, out_ch, 5, rng)
        self.fuse = Conv2d(out_ch + up_ch // 4, out_ch, 3, rng)
        self.gate = Conv2d(out_ch, out_ch, 1, rng)
        self.project = Conv2d(out_ch, out_ch, 1, rng)

    def __call__(self, skip: Tensor, up_in: Tensor) -> Tensor:
        up = T.pixel_shuffle(up_in, 2)
        if up.shape[2:] != skip.shape[2:]:
            raise T.ShapeError(f"shuffled input {up.shape} misaligned with skip {skip.shape}")
        main = T.relu(self.fuse(T.concat_channels([self.content(skip), up])))
        structure = self.structure(skip)
        residual = T.sigmoid(self.gate(structure)) * self.project(structure)
        return main + residual


class PlainFusion(Module):
    """U-Net style fusion used when structure-residual fusion is ablated."""

    def __init__(self, skip_ch: int, up_ch: int, out_ch: int, rng: np.random.Generator):
        self.fuse = Conv2d(skip_ch + up_ch // 4, out_ch, 3, rng)

    def __call__(self, skip: Tensor, up_in: Tensor) -> Tensor:
        up = T.pixel_shuffle(up_in, 2)
        if up.shape[2:] != skip.shape[2:]:
            raise T.ShapeError(f"shuffled input {up.shape} misaligned with skip {skip.shape}")
        return T.relu(self.fuse(T.concat_channels([skip, up])))


class MultiScaleAggregator(Module):
    """Dilated 3x3 branches mixed by per-channel softmax weights."""

    def __init__(self, channels: int, dilations: list[int], rng: np.random.Generator):
        self.channels = channels
        self.branches = [Conv2d(channels, channels, 3, rng, dilation=d) for d in dilations]
        # logit for (channel c, branch b) lives at output index c * n_branches + b
        self.attn = Conv2d(channels, channels * len(dilations), 1, rng)
        self.last_weights: Optional[np.ndarray] = None

    def __call__(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        k = len(self.branches)
        logits = T.reshape(self.attn(T.global_avg_pool(x)), (n, c, k))
        weights = T.softmax(logits)
        self.last_weights = weights.data
        out = None
        for b, branch in enumerate(self.branches):
            wb = T.reshape(T.take_last(weights, b), (n, c, 1, 1))
            term = wb * branch(x)
            out = term if out is None else out + term
        return out


class HFDStage(Module):
    def __init__(self, skip_ch: int, up_ch: int, out_ch: int, cfg: ModelConfig, rng: np.random.Generator):
        fusion = StructureResidualFusion if cfg.srf_enabled else PlainFusion
        self.fusion = fusion(skip_ch, up_ch, out_ch, rng)
        self.ma = MultiScaleAggregator(out_ch, cfg.ma_dilations, rng) if cfg.ma_enabled else None

    def __call__(self, prev: Tensor, skip: Tensor) -> Tensor:
        y = self.fusion(skip, prev)
        return self.ma(y) if self.ma is not None else y


class Decoder(Module):
    """Five upsampling stages; the last one fuses with the network input."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        enc = cfg.encoder_channels
        dec = cfg.decoder_channels
        skips = [enc[3], enc[2], enc[1], enc[0], cfg.in_channels]
        ups = [enc[4], *dec[:4]]
        self.stages = [HFDStage(skips[i], ups[i], dec[i], cfg, rng) for i in range(5)]
        self.head = Conv2d(dec[4], 1, 3, rng)

    def __call__(self, x: Tensor, feats: list[Tensor]) -> Tensor:
        skips = [feats[3], feats[2], feats[1], feats[0], x]
        y = feats[4]
        for stage, skip in zip(self.stages, skips):
            y = stage(y, skip)
        return self.head(y)


class ResBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv_a = Conv2d(channels, channels, 3, rng)
        self.conv_b = Conv2d(channels, channels, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x + self.conv_b(T.relu(self.conv_a(x))))


def window_centers(low_extent: int, ratio: int) -> np.ndarray:
    """High-resolution centre index of each low-resolution footprint."""
    return np.arange(low_extent) * ratio + ratio // 2


class CrossResolutionAttention(Module):
    """Each low-res position attends to a window of the high-res map."""

    def __init__(self, channels: int, ratio: int, window: int, rng: np.random.Generator):
        self.ratio = ratio
        self.window = window
        self.query = Conv2d(channels, channels, 1, rng)
        # a key bias shifts every logit of a query equally, so softmax ignores it
        self.key = Conv2d(channels, channels, 1, rng, bias=False)
        self.value = Conv2d(channels, channels, 1, rng)
        self.last_weights: Optional[np.ndarray] = None

    def __call__(self, low: Tensor, high: Tensor) -> Tensor:
        h, w = low.shape[2:]
        s = self.ratio
        if high.shape[2:] != (s * h, s * w) or high.shape[:2] != low.shape[:2]:
            raise T.ShapeError(f"high-res features {high.shape} do not match {low.shape} at ratio {s}")
        rows, cols = window_centers(h, s), window_centers(w, s)
        keys, valid = T.gather_windows(self.key(high), rows, cols, self.window)
        values, _ = T.gather_windows(self.value(high), rows, cols, self.window)
        assert valid.any(axis=-1).all()
        attended, weights = T.local_dot_attention(self.query(low), keys, values, valid, return_weights=True)
        self.last_weights = weights
        return low + attended


class DualFeatureRefiner(Module):
    """Predicts a residual correction for the initial low-res prediction."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.dfr_channels
        self.ratio = cfg.scale_ratio
        self.low_stem = Conv2d(1, c, 3, rng)
        self.low_blocks = [ResBlock(c, rng) for _ in range(cfg.dfr_blocks_low)]
        self.high_stem = Conv2d(1, c, 3, rng)
        self.high_blocks = [ResBlock(c, rng) for _ in range(cfg.dfr_blocks_high)]
        self.cla = CrossResolutionAttention(c, cfg.scale_ratio, cfg.cla_window, rng)
        self.fuse = Conv2d(2 * c, c, 1, rng)
        self.fused_blocks = [ResBlock(c, rng) for _ in range(cfg.dfr_blocks_fused)]
        self.head = Conv2d(c, 1, 3, rng, zero_init=True)

    def __call__(self, pred_low: Tensor, mask_high: Tensor) -> Tensor:
        h, w = pred_low.shape[2:]
        s = self.ratio
        if mask_high.shape[2:] != (s * h, s * w):
            raise T.ShapeError(f"mask {mask_high.shape} is not {s}x the prediction {pred_low.shape}")
        low = T.relu(self.low_stem(pred_low))
        for block in self.low_blocks:
            low = block(low)
        high = T.relu(self.high_stem(mask_high))
        for block in self.high_blocks:
            high = block(high)
        fused = self.fuse(T.concat_channels([self.cla(low, high), T.avg_pool(high, s)]))
        for block in self.fused_blocks:
            fused = block(fused)
        return self.head(fused)


class EvalNet(Module):
    """Construction backbone plus optional refiner."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg.in_channels, cfg.encoder_channels, rng)
        self.decoder = Decoder(cfg, rng)
        self.dfr = DualFeatureRefiner(cfg, rng) if cfg.dfr_enabled else None

    def construct(self, x: Tensor) -> Tensor:
        """Initial (construction-stage) prediction in log space."""
        return self.decoder(x, self.encoder(x))

    def refine(self, initial: Tensor, mask_high: Tensor) -> Tensor:
        if self.dfr is None:
            return initial
        return initial + self.dfr(initial, mask_high)

    def __call__(self, x: Tensor, mask_high: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        initial = self.construct(x)
        if self.dfr is None or mask_high is None:
            return initial, initial
        return initial, self.refine(initial, mask_high)

    def backbone_parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def dfr_parameters(self) -> list[Tensor]:
        return self.dfr.parameters() if self.dfr is not None else []

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise T.ShapeError(f"{name}: expected {p.data.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
