"""UDC-DMNet: a two-stage learned generator of under-display-camera degradation.

Stage I (RCAB encoder-decoder) models color filtering and brightness
attenuation, Stage II (RSAB encoder-decoder) models diffraction blur. A
degradation fusion block (DFB) joins the Stage-I image with the clean input,
and cross-stage spatial feature transforms (CSSFT) add 1x1-projected Stage-I
encoder/decoder features to every Stage-II decoder scale.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import LRELU_SLOPE, ResBlock, conv1x1, conv3x3, pad_to_multiple, zero_module


@dataclass
class DMNetConfig:
    base_channels: int = 16
    blocks_per_scale: int = 1
    levels: int = 4
    channel_cap: int = 8
    reduction: int = 4
    use_rcab: bool = True
    use_rsab: bool = True
    use_cssft: bool = True
    use_dfb: bool = True
    two_stage: bool = True

    def __post_init__(self):
        for name in ("base_channels", "blocks_per_scale", "levels", "channel_cap", "reduction"):
            if getattr(self, name) < 1:
                raise ValueError(f"DMNetConfig.{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DMNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown DMNet config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def multiple(self) -> int:
        return 2**self.levels


class RCAB(nn.Module):
    """Residual channel attention block: three convs, then a squeeze-excite style gate."""

    def __init__(self, channels: int, reduction: int = 4, zero_init: bool = True):
        super().__init__()
        mid = max(1, channels // reduction)
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)
        self.conv3 = conv3x3(channels, channels)
        self.ca_down = conv1x1(channels, mid)
        self.ca_up = conv1x1(mid, channels)
        if zero_init:
            zero_module(self.conv3)

    def attention_logits(self, r):
        return self.ca_up(F.leaky_relu(self.ca_down(r.mean((2, 3), keepdim=True)), LRELU_SLOPE))

    def forward(self, x):
        r = F.leaky_relu(self.conv1(x), LRELU_SLOPE)
        r = F.leaky_relu(self.conv2(r), LRELU_SLOPE)
        r = self.conv3(r)
        return x + r * torch.sigmoid(self.attention_logits(r))

    def residual_outputs(self):
        return [self.conv3]


class RSAB(nn.Module):
    """Residual spatial attention block: the gate is a per-pixel map from channel mean/max."""

    def __init__(self, channels: int, kernel_size: int = 7, zero_init: bool = True):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)
        self.conv3 = conv3x3(channels, channels)
        self.sa = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)
        if zero_init:
            zero_module(self.conv3)

    def attention_logits(self, r):
        pooled = torch.cat([r.mean(1, keepdim=True), r.amax(1, keepdim=True)], dim=1)
        return self.sa(pooled)

    def forward(self, x):
        r = F.leaky_relu(self.conv1(x), LRELU_SLOPE)
        r = F.leaky_relu(self.conv2(r), LRELU_SLOPE)
        r = self.conv3(r)
        return x + r * torch.sigmoid(self.attention_logits(r))

    def residual_outputs(self):
        return [self.conv3]


class CSSFT(nn.Module):
    """``f_in + conv_e(f_e) + conv_d(f_d)`` with 1x1 convolutions."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_e = conv1x1(channels, channels)
        self.conv_d = conv1x1(channels, channels)

    def forward(self, f_in, f_e, f_d):
        if not (f_in.shape == f_e.shape == f_d.shape):
            raise ValueError(f"CSSFT scale mismatch: {tuple(f_in.shape)}, {tuple(f_e.shape)}, {tuple(f_d.shape)}")
        return f_in + self.conv_e(f_e) + self.conv_d(f_d)

    def residual_outputs(self):
        return [self.conv_e, self.conv_d]


class DFB(nn.Module):
    """Concatenate the Stage-I image with the clean input, then conv-act-conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(6, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, stage1_out, image):
        if stage1_out.shape != image.shape:
            raise ValueError(f"DFB inputs differ: {tuple(stage1_out.shape)} vs {tuple(image.shape)}")
        x = torch.cat([stage1_out, image], dim=1)
        return self.conv2(F.leaky_relu(self.conv1(x), LRELU_SLOPE))


def _stack(block: Callable[[int], nn.Module], channels: int, n: int) -> nn.Sequential:
    return nn.Sequential(*[block(channels) for _ in range(n)])


class EncoderDecoder(nn.Module):
    """U-shaped stack: strided-conv down, transposed-conv up, additive skips.

    ``forward`` returns the decoder output plus the per-scale encoder and
    decoder features (index 0 is full resolution).
    """

    def __init__(self, block, channels: int, levels: int, blocks: int, cap: int, cssft: bool = False):
        super().__init__()
        chans = [channels * min(2**i, cap) for i in range(levels + 1)]
        self.chans = chans
        self.enc = nn.ModuleList(_stack(block, chans[i], blocks) for i in range(levels))
        self.down = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(levels))
        self.mid = _stack(block, chans[levels], blocks)
        self.up = nn.ModuleList(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2) for i in range(levels))
        self.dec = nn.ModuleList(_stack(block, chans[i], blocks) for i in range(levels))
        self.cssft = nn.ModuleList(CSSFT(chans[i]) for i in range(levels)) if cssft else None

    def forward(self, x, taps: Optional[list] = None):
        levels = len(self.enc)
        enc_feats = []
        for i in range(levels):
            x = self.enc[i](x)
            enc_feats.append(x)
            x = self.down[i](x)
        x = self.mid(x)
        dec_feats = [None] * levels
        for i in reversed(range(levels)):
            x = self.dec[i](self.up[i](x) + enc_feats[i])
            if self.cssft is not None:
                f_e, f_d = taps[i]
                x = self.cssft[i](x, f_e, f_d)
            dec_feats[i] = x
        return x, enc_feats, dec_feats


class DMNet(nn.Module):
    def __init__(self, config: DMNetConfig | None = None):
        super().__init__()
        cfg = config or DMNetConfig()
        self.config = cfg
        c = cfg.base_channels

        def stage1_block(ch):
            return RCAB(ch, cfg.reduction) if cfg.use_rcab else ResBlock(ch)

        def stage2_block(ch):
            return RSAB(ch) if cfg.use_rsab else ResBlock(ch)

        self.head1 = conv3x3(3, c)
        self.stage1 = EncoderDecoder(stage1_block, c, cfg.levels, cfg.blocks_per_scale, cfg.channel_cap)
        self.tail1 = conv3x3(c, 3)
        if cfg.two_stage:
            self.fuse = DFB(c) if cfg.use_dfb else conv3x3(3, c)
            self.stage2 = EncoderDecoder(
                stage2_block, c, cfg.levels, cfg.blocks_per_scale, cfg.channel_cap, cssft=cfg.use_cssft
            )
            self.tail2 = conv3x3(c, 3)

    def residual_outputs(self):
        return [self.tail1, self.tail2] if self.config.two_stage else [self.tail1]

    def forward(self, x, tap_hook: Optional[Callable] = None, return_stage1: bool = False):
        """Map clean images (N, 3, H, W) in [0, 1] to degraded images.

        ``tap_hook(i, f_e, f_d) -> (f_e, f_d)`` may rewrite the Stage-I
        features handed to CSSFT at scale index ``i``.
        """
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"DMNet expects (N, 3, H, W) input, got {tuple(x.shape)}")
        x, (h, w) = pad_to_multiple(x, self.config.multiple)
        f, enc1, dec1 = self.stage1(self.head1(x))
        stage1_out = x + self.tail1(f)
        out = stage1_out
        if self.config.two_stage:
            feat = self.fuse(stage1_out, x) if self.config.use_dfb else self.fuse(stage1_out)
            taps = list(zip(enc1, dec1))
            if tap_hook is not None:
                taps = [tap_hook(i, fe, fd) for i, (fe, fd) in enumerate(taps)]
            g, _, _ = self.stage2(feat, taps)
            out = stage1_out + self.tail2(g)
        out = out[:, :, :h, :w].clamp(0.0, 1.0)
        if return_stage1:
            return out, stage1_out[:, :, :h, :w]
        return out


# Ablation variants as config overrides.
ABLATIONS = {
    "full": {},
    "no_rsab": {"use_rsab": False},
    "no_rcab": {"use_rcab": False},
    "no_cssft": {"use_cssft": False},
    "no_dfb": {"use_dfb": False},
    "single_stage": {"two_stage": False},
}
