"""Losses, PatchGAN discriminator and the adversarial training step for UDC-DMNet."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import LRELU_SLOPE

PSNR_LOSS_EPS = 1e-12


def cosine_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_final`` at step ``total``."""
    t = min(max(step, 0), total) / max(total, 1)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * t))


@dataclass
class LossWeights:
    lambda_per: float = 1.0
    lambda_adv: float = 1.0

    def __post_init__(self):
        if self.lambda_per < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    lr_final: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    iterations: int = 2000
    batch_size: int = 4
    crop_size: int = 64
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        for name in ("iterations", "batch_size", "crop_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be >= 1")

    def lr(self, step: int) -> float:
        return cosine_lr(step, self.iterations, self.lr_init, self.lr_final)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class PatchGAN(nn.Module):
    """Three stride-2 4x4 convs and a valid 3x3 conv to a 1-channel logit map."""

    min_side = 32

    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        c1, c2, c3 = channels
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(3, c1, 4, stride=2, padding=1),
                nn.Conv2d(c1, c2, 4, stride=2, padding=1),
                nn.Conv2d(c2, c3, 4, stride=2, padding=1),
                nn.Conv2d(c3, 1, 3, stride=1, padding=0),
            ]
        )

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"discriminator expects (N, 3, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < self.min_side:
            raise ValueError(f"discriminator input side must be >= {self.min_side}, got {tuple(x.shape[-2:])}")
        for conv in self.convs[:-1]:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
        return self.convs[-1](x)


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr_loss(gen, target):
    """Negative PSNR (dB), averaged over the batch; data range 1."""
    _check_same(gen, target)
    mse = ((gen - target) ** 2).flatten(1).mean(1)
    return (10.0 * torch.log10(mse + PSNR_LOSS_EPS)).mean()


class RandomPyramid(nn.Module):
    """Fixed, untrained 5-stage conv pyramid used as a stand-in perceptual feature extractor."""

    def __init__(self, channels=(16, 32, 64, 64, 64), seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            with torch.no_grad():
                bound = math.sqrt(6.0 / (cin * 9))
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=g) * 2 - 1) * bound)
                conv.bias.zero_()
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
        return x


class PerceptualLoss(nn.Module):
    """Mean absolute difference of the deepest extractor features."""

    def __init__(self, extractor: nn.Module | None = None):
        super().__init__()
        self.extractor = extractor if extractor is not None else RandomPyramid()
        self.extractor.requires_grad_(False)

    def forward(self, gen, target):
        _check_same(gen, target)
        return (self.extractor(gen) - self.extractor(target)).abs().mean()


def adversarial_losses(d_real, d_fake):
    """(discriminator loss, non-saturating generator loss) from raw logits."""
    d_loss = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    return d_loss, generator_adv_loss(d_fake)


def generator_adv_loss(d_fake):
    # -log(sigmoid(x)) == softplus(-x)
    return F.softplus(-d_fake).mean()


class GANTrainer:
    """Owns generator, discriminator, both Adam optimizers and the loss modules."""

    def __init__(self, generator, discriminator, train: TrainConfig, weights: LossWeights = LossWeights(), perceptual=None):
        self.g = generator
        self.d = discriminator
        self.train = train
        self.weights = weights
        self.perceptual = perceptual if perceptual is not None else PerceptualLoss()
        betas = (train.beta1, train.beta2)
        self.opt_g = torch.optim.Adam(self.g.parameters(), lr=train.lr_init, betas=betas)
        self.opt_d = torch.optim.Adam(self.d.parameters(), lr=train.lr_init, betas=betas)
        self.step = 0

    def generator_loss(self, clean, target):
        gen = self.g(clean)
        l_psnr = psnr_loss(gen, target)
        l_per = self.perceptual(gen, target)
        l_adv = generator_adv_loss(self.d(gen))
        total = l_psnr + self.weights.lambda_per * l_per + self.weights.lambda_adv * l_adv
        return total, {"l_psnr": l_psnr, "l_per": l_per, "l_adv": l_adv}

    def train_step(self, clean, target) -> dict:
        if clean.shape[0] == 0:
            raise ValueError("empty batch")
        lr = self.train.lr(self.step)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

        # discriminator: real = target, fake = detached generation
        with torch.no_grad():
            fake = self.g(clean)
        self.d.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss, _ = adversarial_losses(self.d(target), self.d(fake))
        d_loss.backward()
        self.opt_d.step()

        # generator; discriminator frozen
        self.d.requires_grad_(False)
        self.opt_g.zero_grad(set_to_none=True)
        total, parts = self.generator_loss(clean, target)
        total.backward()
        self.opt_g.step()
        self.d.requires_grad_(True)

        self.step += 1
        out = {k: v.item() for k, v in parts.items()}
        out.update(l_d=d_loss.item(), loss=total.item(), lr=lr)
        return out
