"""DGFormer: dictionary-guided transformer for UDC face restoration.

Layout: shallow 3x3 conv -> UDC restoration module (transformer blocks) ->
dictionary-guided encoder-decoder at scales (1, 2, 4, 2, 1) -> image
reconstruction module (transformer blocks + 3x3 conv) producing a residual
added to the degraded input.

The transformer block attends across channels: per head the attention map is
(C/heads x C/heads), computed from L2-normalised query/key rows taken over all
spatial positions, divided by a learnable per-head temperature.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import COMPONENTS, LandmarkSet
from .layers import LRELU_SLOPE, LayerNorm2d, ResBlock, conv1x1, conv3x3, pad_to_multiple
from .roi import roi_extract, roi_paste

DGRM_SCALES = (1, 2, 4, 2, 1)


@dataclass
class DGFormerConfig:
    base_channels: int = 16
    udcrm_blocks: int = 2
    irm_blocks: int = 2
    dgrm_blocks: tuple = (2, 2, 2, 2, 2)
    heads: tuple = (1, 2, 4, 2, 1)
    dict_entries: int = 8
    ffn_expansion: int = 2
    # dictionary side per component at full resolution (pixels)
    component_sizes: dict = field(
        default_factory=lambda: {"left_eye": 12, "right_eye": 12, "nose": 12, "mouth": 16}
    )
    use_resblock: bool = False
    use_udcrm: bool = True
    use_irm: bool = True
    use_dtb: bool = True
    dgma_self_attention: bool = False
    repeat_dgma: bool = False

    def __post_init__(self):
        self.dgrm_blocks = tuple(int(b) for b in self.dgrm_blocks)
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.dgrm_blocks) != 5 or len(self.heads) != 5:
            raise ValueError("dgrm_blocks and heads need exactly 5 entries")
        if min(self.dgrm_blocks) < 1 or min(self.heads) < 1:
            raise ValueError("dgrm_blocks and heads entries must be >= 1")
        if self.base_channels < 1 or self.dict_entries < 1 or self.udcrm_blocks < 0 or self.irm_blocks < 0:
            raise ValueError("invalid DGFormer counts")
        for level, s in enumerate(DGRM_SCALES):
            ch = self.base_channels * s
            if ch % self.heads[level]:
                raise ValueError(f"level {level}: {ch} channels not divisible by {self.heads[level]} heads")
        deepest = max(DGRM_SCALES)
        sizes = {}
        for name in COMPONENTS:
            if name not in self.component_sizes:
                raise KeyError(f"component size for {name!r} missing")
            sizes[name] = int(math.ceil(self.component_sizes[name] / deepest) * deepest)
        self.component_sizes = sizes

    @classmethod
    def paper(cls, **overrides) -> "DGFormerConfig":
        kw = dict(
            base_channels=32,
            udcrm_blocks=4,
            irm_blocks=4,
            dgrm_blocks=(6, 6, 8, 6, 6),
            heads=(2, 4, 8, 4, 2),
            component_sizes={"left_eye": 48, "right_eye": 48, "nose": 48, "mouth": 64},
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def tiny(cls, **overrides) -> "DGFormerConfig":
        kw = dict(
            base_channels=8,
            udcrm_blocks=1,
            irm_blocks=1,
            dgrm_blocks=(1, 1, 1, 1, 1),
            heads=(2, 4, 8, 4, 2),
            component_sizes={"left_eye": 8, "right_eye": 8, "nose": 8, "mouth": 8},
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dgrm_blocks"] = list(self.dgrm_blocks)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DGFormerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown DGFormer config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# attention primitives


def channel_attention(q, k, v, heads: int, beta):
    """Multi-head attention across channels.

    q, k, v: (N, C, H, W); beta: (heads, 1, 1) divisor. Returns the attended
    values (N, C, H, W) and the attention maps (N, heads, C/heads, C/heads),
    whose rows (softmax over key channels) sum to one.
    """
    n, c, h, w = q.shape
    if c % heads:
        raise ValueError(f"{c} channels not divisible by {heads} heads")
    q = F.normalize(q.reshape(n, heads, c // heads, h * w), dim=-1)
    k = F.normalize(k.reshape(n, heads, c // heads, h * w), dim=-1)
    v = v.reshape(n, heads, c // heads, h * w)
    attn = torch.softmax(q @ k.transpose(-2, -1) / beta, dim=-1)
    return (attn @ v).reshape(n, c, h, w), attn


def _dw(channels: int) -> nn.Conv2d:
    return nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False)


class _Recorder(nn.Module):
    record_attention = False
    last_attention = None

    def _keep(self, attn):
        if self.record_attention:
            self.last_attention = {k: v.detach() for k, v in attn.items()} if isinstance(attn, dict) else attn.detach()


class ChannelSelfAttention(_Recorder):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.qkv = conv1x1(channels, channels * 3, bias=False)
        self.qkv_dw = _dw(channels * 3)
        self.project_out = conv1x1(channels, channels, bias=False)
        self.beta = nn.Parameter(torch.ones(heads, 1, 1))

    def forward(self, x):
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        out, attn = channel_attention(q, k, v, self.heads, self.beta)
        self._keep(attn)
        return self.project_out(out)


class GFFN(nn.Module):
    """Gated feed-forward: pointwise(depthwise(pointwise(x)) * sigmoid(pointwise(x)))."""

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        hidden = channels * expansion
        self.project_in = conv1x1(channels, hidden, bias=False)
        self.dw = _dw(hidden)
        self.gate = conv1x1(channels, hidden, bias=True)
        self.project_out = conv1x1(hidden, channels, bias=False)

    def forward(self, x):
        return self.project_out(self.dw(self.project_in(x)) * torch.sigmoid(self.gate(x)))

    def residual_outputs(self):
        return [self.project_out]


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, heads: int, expansion: int = 2):
        super().__init__()
        self.norm1 = LayerNorm2d(channels)
        self.attn = ChannelSelfAttention(channels, heads)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = GFFN(channels, expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))

    def residual_outputs(self):
        return [self.attn.project_out]


# ---------------------------------------------------------------------------
# dictionary path


class ComponentDictionary(nn.Module):
    """``y`` learnable (key, value) feature grids for one component at one scale."""

    def __init__(self, entries: int, channels: int, side: int):
        super().__init__()
        self.keys = nn.Parameter(torch.randn(entries, channels, side, side) * 0.1)
        self.values = nn.Parameter(torch.randn(entries, channels, side, side) * 0.1)

    @property
    def side(self) -> int:
        return self.keys.shape[-1]


class DTB(_Recorder):
    """Crop each component, query its dictionary, fuse, paste back."""

    def __init__(self, channels: int, components: Sequence[str] = COMPONENTS):
        super().__init__()
        self.components = tuple(components)
        self.query = nn.ModuleDict(
            {
                c: nn.Sequential(
                    conv3x3(channels, channels), nn.LeakyReLU(LRELU_SLOPE), conv3x3(channels, channels)
                )
                for c in self.components
            }
        )
        self.fusion = nn.ModuleDict({c: conv1x1(channels * 2, channels) for c in self.components})
        with torch.no_grad():
            for conv in self.fusion.values():
                conv.weight[:, :channels, 0, 0] = torch.eye(channels)
                conv.bias.zero_()

    @staticmethod
    def lookup(q, dictionary: ComponentDictionary):
        """Softmax over dot products of ``q`` (N, C, a, a) with every key; returns (values, weights)."""
        keys, values = dictionary.keys, dictionary.values
        d = keys[0].numel()
        logits = torch.einsum("nchw,ychw->ny", q, keys) / math.sqrt(d)
        weights = torch.softmax(logits, dim=-1)
        return torch.einsum("ny,ychw->nchw", weights, values), weights

    def forward(self, f, landmarks: Sequence[LandmarkSet], dicts: dict, scale: int):
        if len(landmarks) != f.shape[0]:
            raise ValueError(f"{len(landmarks)} landmark sets for a batch of {f.shape[0]}")
        kept = {}
        outs = []
        for i, lm in enumerate(landmarks):
            fi = f[i : i + 1]
            out = fi
            for c in self.components:
                if c not in dicts:
                    raise KeyError(f"no dictionary for component {c!r}")
                box = lm[c]
                crop = roi_extract(fi, box, dicts[c].side, scale)
                queried, w = self.lookup(self.query[c](crop), dicts[c])
                kept.setdefault(c, []).append(w)
                fused = self.fusion[c](torch.cat([crop, queried], dim=1))
                out = roi_paste(out, fused, box, scale)
            outs.append(out)
        self._keep({c: torch.cat(ws) for c, ws in kept.items()})
        return torch.cat(outs)


class DGMA(_Recorder):
    """Cross-attention: queries from ``f``, keys/values from the dictionary-enhanced ``f_dic``."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm_q = LayerNorm2d(channels)
        self.norm_kv = LayerNorm2d(channels)
        self.q = conv1x1(channels, channels, bias=False)
        self.q_dw = _dw(channels)
        self.kv = conv1x1(channels, channels * 2, bias=False)
        self.kv_dw = _dw(channels * 2)
        self.project_out = conv1x1(channels, channels, bias=False)
        self.beta = nn.Parameter(torch.ones(heads, 1, 1))

    def forward(self, f, f_dic):
        if f.shape != f_dic.shape:
            raise ValueError(f"DGMA inputs differ: {tuple(f.shape)} vs {tuple(f_dic.shape)}")
        q = self.q_dw(self.q(self.norm_q(f)))
        k, v = self.kv_dw(self.kv(self.norm_kv(f_dic))).chunk(2, dim=1)
        out, attn = channel_attention(q, k, v, self.heads, self.beta)
        self._keep(attn)
        return f + self.project_out(out)

    def residual_outputs(self):
        return [self.project_out]


class DGTB(nn.Module):
    """One dictionary-guided step (DGMA + GFFN) followed by ``n - 1`` refinement blocks."""

    def __init__(self, channels: int, heads: int, n_blocks: int, cfg: DGFormerConfig):
        super().__init__()
        self.self_attention = cfg.dgma_self_attention
        self.repeat = cfg.repeat_dgma
        if self.self_attention:
            self.first = TransformerBlock(channels, heads, cfg.ffn_expansion)
            self.dtb = None
        else:
            self.dtb = DTB(channels) if cfg.use_dtb else None
            self.dgma = nn.ModuleList(DGMA(channels, heads) for _ in range(n_blocks if self.repeat else 1))
            self.norms = nn.ModuleList(LayerNorm2d(channels) for _ in self.dgma)
            self.ffns = nn.ModuleList(GFFN(channels, cfg.ffn_expansion) for _ in self.dgma)
        n_refine = 0 if (self.repeat and not self.self_attention) else n_blocks - 1
        if cfg.use_resblock:
            self.refine = nn.Sequential(*[ResBlock(channels, zero_init=False) for _ in range(n_refine)])
        else:
            self.refine = nn.Sequential(*[TransformerBlock(channels, heads, cfg.ffn_expansion) for _ in range(n_refine)])

    def forward(self, f, landmarks, dicts, scale):
        if self.self_attention:
            f = self.first(f)
        else:
            for dgma, norm, ffn in zip(self.dgma, self.norms, self.ffns):
                f_dic = self.dtb(f, landmarks, dicts, scale) if self.dtb is not None else f
                f = dgma(f, f_dic)
                f = f + ffn(norm(f))
        return self.refine(f)

    @property
    def n_blocks(self) -> int:
        first = 1 if self.self_attention else len(self.dgma)
        return first + len(self.refine)


def _blocks(n: int, channels: int, heads: int, cfg: DGFormerConfig) -> nn.Sequential:
    if cfg.use_resblock:
        return nn.Sequential(*[ResBlock(channels, zero_init=False) for _ in range(n)])
    return nn.Sequential(*[TransformerBlock(channels, heads, cfg.ffn_expansion) for _ in range(n)])


class DGFormer(nn.Module):
    def __init__(self, config: DGFormerConfig | None = None):
        super().__init__()
        cfg = config or DGFormerConfig()
        self.config = cfg
        c = cfg.base_channels
        chans = [c * s for s in DGRM_SCALES]
        self.sfe = conv3x3(3, c)
        self.udcrm = _blocks(cfg.udcrm_blocks if cfg.use_udcrm else 0, c, cfg.heads[0], cfg)
        self.levels = nn.ModuleList(
            DGTB(chans[i], cfg.heads[i], cfg.dgrm_blocks[i], cfg) for i in range(5)
        )
        self.down = nn.ModuleList(
            [nn.Conv2d(chans[0], chans[1], 3, stride=2, padding=1), nn.Conv2d(chans[1], chans[2], 3, stride=2, padding=1)]
        )
        self.up = nn.ModuleList(
            [nn.ConvTranspose2d(chans[2], chans[3], 2, stride=2), nn.ConvTranspose2d(chans[3], chans[4], 2, stride=2)]
        )
        self.skip = nn.ModuleList([conv1x1(chans[3] * 2, chans[3]), conv1x1(chans[4] * 2, chans[4])])
        self.irm = _blocks(cfg.irm_blocks if cfg.use_irm else 0, c, cfg.heads[-1], cfg)
        self.tail = conv3x3(c, 3)
        # near-identity start; kept nonzero so gradients reach every layer from step one
        with torch.no_grad():
            self.tail.weight.mul_(0.01)
            self.tail.bias.zero_()

        uses_dict = cfg.use_dtb and not cfg.dgma_self_attention
        self.dict = nn.ModuleDict()
        if uses_dict:
            for comp in COMPONENTS:
                side = cfg.component_sizes[comp]
                self.dict[comp] = nn.ModuleDict(
                    {
                        str(i): ComponentDictionary(cfg.dict_entries, chans[i], side // s)
                        for i, s in enumerate(DGRM_SCALES)
                    }
                )

    def residual_outputs(self):
        return [self.tail]

    def level_dicts(self, level: int) -> dict:
        return {comp: self.dict[comp][str(level)] for comp in self.dict}

    def forward(self, x, landmarks):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"DGFormer expects (N, 3, H, W) input, got {tuple(x.shape)}")
        if isinstance(landmarks, LandmarkSet):
            landmarks = [landmarks] * x.shape[0]
        landmarks = list(landmarks)
        h, w = x.shape[-2:]
        _check_landmarks(landmarks, x.shape[0], h, w)
        xp, _ = pad_to_multiple(x, max(DGRM_SCALES))

        f = self.udcrm(self.sfe(xp))
        f0 = self.levels[0](f, landmarks, self.level_dicts(0), DGRM_SCALES[0])
        f1 = self.levels[1](self.down[0](f0), landmarks, self.level_dicts(1), DGRM_SCALES[1])
        f2 = self.levels[2](self.down[1](f1), landmarks, self.level_dicts(2), DGRM_SCALES[2])
        f3 = self.skip[0](torch.cat([self.up[0](f2), f1], dim=1))
        f3 = self.levels[3](f3, landmarks, self.level_dicts(3), DGRM_SCALES[3])
        f4 = self.skip[1](torch.cat([self.up[1](f3), f0], dim=1))
        f4 = self.levels[4](f4, landmarks, self.level_dicts(4), DGRM_SCALES[4])
        out = xp + self.tail(self.irm(f4))
        return out[:, :, :h, :w].clamp(0.0, 1.0)


def _check_landmarks(landmarks, batch: int, h: int, w: int) -> None:
    if len(landmarks) != batch:
        raise ValueError(f"{len(landmarks)} landmark sets for a batch of {batch}")
    for lm in landmarks:
        if not isinstance(lm, LandmarkSet):
            raise TypeError("landmarks must be LandmarkSet instances")
        for name, b in lm.boxes.items():
            if b.x0 < -0.5 - 1e-6 or b.y0 < -0.5 - 1e-6 or b.x0 + b.size > w - 0.5 + 1e-6 or b.y0 + b.size > h - 0.5 + 1e-6:
                raise ValueError(f"{name} box {b} does not fit a {h}x{w} image")


def set_attention_recording(model: nn.Module, on: bool = True) -> None:
    for m in model.modules():
        if isinstance(m, _Recorder):
            m.record_attention = on
            m.last_attention = None


# Ablation variants as config overrides.
ABLATIONS = {
    "full": {},
    "use_resblock": {"use_resblock": True},
    "no_udcrm": {"use_udcrm": False},
    "no_irm": {"use_irm": False},
    "no_dtb": {"use_dtb": False},
    "self_attention": {"dgma_self_attention": True},
    "repeat_dgma": {"repeat_dgma": True},
}


class DGFormerTrainer:
    """L1 (+ weighted perceptual) training with AdamW and cosine annealing."""

    def __init__(self, model: DGFormer, train, perceptual_weight: float = 0.01, perceptual=None):
        from .gan import PerceptualLoss

        self.model = model
        self.train = train
        self.perceptual_weight = perceptual_weight
        self.perceptual = perceptual if perceptual is not None else PerceptualLoss()
        self.opt = torch.optim.AdamW(
            model.parameters(), lr=train.lr_init, betas=(train.beta1, train.beta2), weight_decay=train.weight_decay
        )
        self.step = 0

    def loss(self, degraded, clean, landmarks):
        restored = self.model(degraded, landmarks)
        l1 = (restored - clean).abs().mean()
        l_per = self.perceptual(restored, clean) if self.perceptual_weight else restored.new_zeros(())
        return l1 + self.perceptual_weight * l_per, {"l1": l1, "l_per": l_per}

    def train_step(self, degraded, clean, landmarks) -> dict:
        if degraded.shape[0] == 0:
            raise ValueError("empty batch")
        lr = self.train.lr(self.step)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.zero_grad(set_to_none=True)
        total, parts = self.loss(degraded, clean, landmarks)
        total.backward()
        self.opt.step()
        self.step += 1
        out = {k: v.item() for k, v in parts.items()}
        out.update(loss=total.item(), lr=lr)
        return out
