"""Multi-scale bitemporal feature fusion.

Per image: a small residual CNN with a two-level top-down pyramid supplies
low-level features; the ViT patch grid supplies high-level features; both are
resampled to the working grid, concatenated over channels, and reweighted by
channel attention. The two per-image features are then concatenated over
time, reweighted again, and squeezed through a two-layer 1x1-conv FFN block
into the fused map handed to the mask decoder.

A bypass variant (plain concatenation of the two ViT grids followed by the
FFN block) produces the same output type and feeds the ablation harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Linear, Module, Parameter
from .tensor import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class FusionConfig:
    image_size: int = 64
    grid: int = 16
    channels: int = 64          # fused output channels
    base_width: int = 32        # CNN stem width
    d_v: int = 64               # ViT feature width entering the high branch
    reduction: int = 4          # channel-attention MLP squeeze

    def __post_init__(self):
        if self.image_size % self.grid:
            raise ContractError("grid must divide image_size")
        if self.reduction < 1:
            raise ContractError("reduction must be >= 1")

    @property
    def fpn_width(self) -> int:
        return 2 * self.base_width

    @property
    def lowlevel_channels(self) -> int:
        return 2 * self.fpn_width  # two pyramid levels concatenated

    @property
    def per_image_channels(self) -> int:
        return self.lowlevel_channels + self.d_v


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, pad=1, bias=False)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, pad=1, bias=False)
        self.bn2 = BatchNorm2d(c_out)
        self.down = (Conv2d(c_in, c_out, 1, rng, stride=stride, bias=False)
                     if stride != 1 or c_in != c_out else None)

    def forward(self, x) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.down is None else self.down(x)
        return T.relu(T.add(h, skip))


class LowLevelExtractor(Module):
    """Six residual blocks over two scales, then a two-level lateral-sum
    pyramid whose levels are resampled to the working grid and concatenated."""

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        super().__init__()
        w = cfg.base_width
        self.cfg = cfg
        self.stem = Conv2d(3, w, 3, rng, stride=2, pad=1, bias=False)
        self.stem_bn = BatchNorm2d(w)
        self.b1 = ResBlock(w, w, 1, rng)
        self.b2 = ResBlock(w, w, 1, rng)
        self.b3 = ResBlock(w, w, 1, rng)
        self.b4 = ResBlock(w, 2 * w, 2, rng)
        self.b5 = ResBlock(2 * w, 2 * w, 1, rng)
        self.b6 = ResBlock(2 * w, 2 * w, 1, rng)
        f = cfg.fpn_width
        self.lat_hi = Conv2d(2 * w, f, 1, rng)
        self.lat_lo = Conv2d(w, f, 1, rng)
        self.out_hi = Conv2d(f, f, 3, rng, pad=1)
        self.out_lo = Conv2d(f, f, 3, rng, pad=1)

    def forward(self, img) -> Tensor:
        x = T.as_tensor(img)
        if x.ndim != 3 or x.shape[0] != 3:
            raise DimensionError(f"expected [3, S, S], got {x.shape}")
        x = T.reshape(x, (1,) + x.shape)
        c3 = self.b3(self.b2(self.b1(T.relu(self.stem_bn(self.stem(x))))))
        c4 = self.b6(self.b5(self.b4(c3)))
        p4 = self.lat_hi(c4)
        p3 = T.add(self.lat_lo(c3), T.bilinear_resize(p4, c3.shape[2:]))
        p4 = self.out_hi(p4)
        p3 = self.out_lo(p3)
        g = (self.cfg.grid, self.cfg.grid)
        levels = [T.bilinear_resize(p, g) for p in (p3, p4)]
        return T.reshape(T.concat(levels, axis=1),
                         (self.cfg.lowlevel_channels,) + g)


class ChannelAttention(Module):
    """Sigmoid gate per channel from summed average-pool and max-pool paths
    through one shared squeeze-excite MLP."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def scores(self, f) -> Tensor:
        f = T.as_tensor(f)
        c = f.shape[0]
        flat = T.reshape(f, (c, f.shape[1] * f.shape[2]))
        avg = T.reshape(T.mean_(flat, axis=1), (1, c))
        mx = T.reshape(T.max_(flat, axis=1), (1, c))
        shared = lambda v: self.fc2(T.relu(self.fc1(v)))
        return T.sigmoid(T.add(shared(avg), shared(mx)))

    def forward(self, f) -> Tensor:
        f = T.as_tensor(f)
        s = T.reshape(self.scores(f), (f.shape[0], 1, 1))
        return T.mul(f, s)


class FFNBlock(Module):
    """[1x1 conv -> batch norm -> GELU] twice; C_in to C_out."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 1, rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 1, rng)
        self.bn2 = BatchNorm2d(c_out)

    def forward(self, f) -> Tensor:
        f = T.as_tensor(f)
        x = T.reshape(f, (1,) + f.shape)
        x = T.gelu(self.bn1(self.conv1(x)))
        x = T.gelu(self.bn2(self.conv2(x)))
        return T.reshape(x, x.shape[1:])


class FusionModule(Module):
    """fu(img1, img2, vit1, vit2) -> fused [channels, grid, grid].

    The full path runs low+high concat and two attention stages; the bypass
    path (ablation) concatenates the two ViT grids and applies only the FFN
    block. Both paths share the output contract.
    """

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator,
                 bypass: bool = False):
        super().__init__()
        self.cfg = cfg
        self.bypass = bypass
        if bypass:
            self.ffn = FFNBlock(2 * cfg.d_v, cfg.channels, rng)
        else:
            self.lowlevel = LowLevelExtractor(cfg, rng)
            self.att_image = ChannelAttention(cfg.per_image_channels,
                                              cfg.reduction, rng)
            self.att_time = ChannelAttention(2 * cfg.per_image_channels,
                                             cfg.reduction, rng)
            self.ffn = FFNBlock(2 * cfg.per_image_channels, cfg.channels, rng)

    def _vit_grid(self, feats) -> Tensor:
        feats = T.as_tensor(feats)
        p, d = feats.shape
        g = int(round(np.sqrt(p)))
        if g * g != p:
            raise DimensionError(f"{p} patch tokens do not form a square grid")
        if d != self.cfg.d_v:
            raise DimensionError("ViT width disagrees with fusion config")
        grid = T.transpose(feats, (1, 0))
        grid = T.reshape(grid, (d, g, g))
        return T.bilinear_resize(grid, (self.cfg.grid, self.cfg.grid))

    def _check_image(self, img):
        img = T.as_tensor(img)
        s = self.cfg.image_size
        if img.shape != (3, s, s):
            raise DimensionError(f"expected [3, {s}, {s}], got {img.shape}")
        return img

    def forward(self, img1, img2, vit1, vit2) -> Tensor:
        h1, h2 = self._vit_grid(vit1), self._vit_grid(vit2)
        if self.bypass:
            return self.ffn(T.concat([h1, h2], axis=0))
        img1, img2 = self._check_image(img1), self._check_image(img2)
        feats = []
        for img, high in ((img1, h1), (img2, h2)):
            low = self.lowlevel(img)
            feats.append(self.att_image(T.concat([low, high], axis=0)))
        both = self.att_time(T.concat(feats, axis=0))
        return self.ffn(both)
