"""Two-stage progressive encoder-decoder deraining network.

Each stage is a U-Net: HIN-block encoder with stride-2 conv down-sampling,
SAR-block decoder with transposed-conv up-sampling and concat + 1x1 skip
merges. SAM joins the stages and CSFF injects stage-1 encoder/decoder maps
into the stage-2 encoder. Stage 2 predicts a correction on top of the rainy
input (global residual).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .nn.module import LINEAR_GAIN, OUTPUT_GAIN
from .nn import CSFF, SAM, Conv2d, ConvTranspose2d, HINBlock, Module, ModuleList, ResBlock, SARBlock, SARConfig


@dataclass(frozen=True)
class DerainConfig:
    depth: int = 3
    base_channels: int = 16
    cardinal: int = 2
    radix: int = 2
    reduction: int = 4
    decoder_block: str = "sar"  # "sar" | "res" (plain residual ablation)
    supervise_stage1: bool = True

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels % (self.cardinal * self.radix):
            raise ValueError(
                f"base channels {self.base_channels} not divisible by k*r = {self.cardinal * self.radix}"
            )
        if self.decoder_block not in ("sar", "res"):
            raise ValueError(f"decoder_block must be 'sar' or 'res', got {self.decoder_block!r}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def multiple(self) -> int:
        """Spatial extents must be divisible by this."""
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class UNetStage(Module):
    def __init__(self, rng: np.random.Generator, cfg: DerainConfig, fuse_input: bool):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_channels
        self.head = Conv2d(rng, 3, base, 3)
        # stage 2 merges its own shallow features with SAM-gated stage-1 features
        self.merge = Conv2d(rng, 2 * base, base, 1, gain=LINEAR_GAIN) if fuse_input else None
        self.encoders = ModuleList()
        self.downs = ModuleList()
        for level in range(cfg.depth):
            cin = base if level == 0 else cfg.channels(level - 1)
            self.encoders.append(HINBlock(rng, cin, cfg.channels(level)))
            if level < cfg.depth - 1:
                c = cfg.channels(level)
                self.downs.append(Conv2d(rng, c, c, 3, stride=2, pad=1, gain=LINEAR_GAIN))
        self.decoders = ModuleList()
        self.ups = ModuleList()
        self.skips = ModuleList()
        for level in range(cfg.depth):
            c = cfg.channels(level)
            if cfg.decoder_block == "sar":
                self.decoders.append(SARBlock(rng, SARConfig(c, cfg.cardinal, cfg.radix, cfg.reduction)))
            else:
                self.decoders.append(ResBlock(rng, c))
            if level < cfg.depth - 1:
                self.ups.append(ConvTranspose2d(rng, cfg.channels(level + 1), c))
                self.skips.append(Conv2d(rng, 2 * c, c, 1, gain=LINEAR_GAIN))

    def forward(self, image: Tensor, gated=None, injections=None) -> Tuple[List[Tensor], List[Tensor]]:
        x = self.head(image)
        if self.merge is not None:
            x = self.merge(ops.concat([x, gated], axis=1))
        enc = []
        for level, block in enumerate(self.encoders):
            e = block(x)
            if injections is not None:
                e = e + injections[level]
            enc.append(e)
            if level < self.cfg.depth - 1:
                x = self.downs[level](e)
        dec: List[Tensor] = [None] * self.cfg.depth
        d = self.decoders[-1](enc[-1])
        dec[-1] = d
        for level in range(self.cfg.depth - 2, -1, -1):
            up = self.ups[level](d)
            d = self.decoders[level](self.skips[level](ops.concat([up, enc[level]], axis=1)))
            dec[level] = d
        return enc, dec


class DerainNet(Module):
    def __init__(self, cfg: DerainConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.stage1 = UNetStage(rng, cfg, fuse_input=False)
        self.sam = SAM(rng, cfg.base_channels)
        self.csff = CSFF(rng, [cfg.channels(l) for l in range(cfg.depth)])
        self.stage2 = UNetStage(rng, cfg, fuse_input=True)
        self.tail = Conv2d(rng, cfg.base_channels, 3, 1, gain=OUTPUT_GAIN)

    def check_input(self, rainy: Tensor) -> None:
        m = self.cfg.multiple
        if rainy.ndim != 4 or rainy.shape[1] != 3:
            raise ShapeError(f"derain input must be (N, 3, H, W), got {rainy.shape}")
        h, w = rainy.shape[2:]
        if h % m or w % m:
            raise ShapeError(
                f"input {h}x{w} must be padded to a multiple of {m} (2^(depth-1)) in both axes"
            )

    def run_stage1(self, rainy: Tensor):
        enc1, dec1 = self.stage1(rainy)
        out1, gated = self.sam(dec1[0], rainy)
        return out1, gated, enc1, dec1

    def run_stage2(self, rainy: Tensor, gated: Tensor, enc1, dec1) -> Tensor:
        injections = self.csff(enc1, dec1)
        _, dec2 = self.stage2(rainy, gated=gated, injections=injections)
        return self.tail(dec2[0]) + rainy

    def forward(self, rainy: Tensor) -> Tuple[Tensor, Tensor]:
        self.check_input(rainy)
        out1, gated, enc1, dec1 = self.run_stage1(rainy)
        out2 = self.run_stage2(rainy, gated, enc1, dec1)
        if not self.training:
            out1, out2 = ops.clamp(out1, 0.0, 1.0), ops.clamp(out2, 0.0, 1.0)
        return out1, out2


def init_params(cfg: DerainConfig, seed: int) -> DerainNet:
    """Seeded construction: fan-in scaled normal conv kernels, zero biases.

    3x3 convs feeding a nonlinearity use std sqrt(2 / fan_in); 1x1 projection
    paths use the linear gain and residual-branch output convs a damped gain.
    """
    return DerainNet(cfg, seed)


def _conv(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * cout * k * k + (cout if bias else 0)


def derain_param_count(cfg: DerainConfig) -> int:
    """Closed-form parameter count for a :class:`DerainNet` built from ``cfg``."""
    base = cfg.base_channels

    def hin(cin, cout):
        return _conv(cin, cout, 3) + _conv(cout, cout, 3) + _conv(cin, cout, 1) + cout  # + half-width affine pair

    def decoder(c):
        if cfg.decoder_block == "res":
            return 2 * _conv(c, c, 3) + _conv(c, c, 1)
        sar = SARConfig(c, cfg.cardinal, cfg.radix, cfg.reduction)
        gw, h, r = sar.group_width, sar.hidden, cfg.radix
        fc = cfg.cardinal * ((gw * h + h) + (h * gw * r + gw * r))
        return _conv(c, c * r, 3) + fc + _conv(c, c, 1)

    def stage(fuse: bool):
        total = _conv(3, base, 3) + (_conv(2 * base, base, 1) if fuse else 0)
        for level in range(cfg.depth):
            c = cfg.channels(level)
            cin = base if level == 0 else cfg.channels(level - 1)
            total += hin(cin, c) + decoder(c)
            if level < cfg.depth - 1:
                total += _conv(c, c, 3)  # down-sampling conv
                total += cfg.channels(level + 1) * c * 4 + c  # transposed conv, kernel 2
                total += _conv(2 * c, c, 1)  # skip merge
        return total

    sam = _conv(base, 3, 1) + _conv(3, base, 1)
    csff = 2 * sum(cfg.channels(l) ** 2 for l in range(cfg.depth))
    return stage(False) + stage(True) + sam + csff + _conv(base, 3, 1)
