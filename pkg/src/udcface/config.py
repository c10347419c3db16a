"""Flat, namespaced run configuration: built-in profile < config file < command line."""
from __future__ import annotations

from pathlib import Path

import yaml

from .dgformer import DGFormerConfig
from .dmnet import DMNetConfig
from .gan import LossWeights, TrainConfig
from .imaging import COMPONENTS
from .pipeline import ClassicalGenerator


class ConfigError(ValueError):
    pass


def _desk_defaults() -> dict:
    d = {f"dmnet.{k}": v for k, v in DMNetConfig().to_dict().items()}
    dg = DGFormerConfig().to_dict()
    sizes = dg.pop("component_sizes")
    d.update({f"dgformer.{k}": v for k, v in dg.items()})
    d.update({f"dgformer.component_sizes.{c}": sizes[c] for c in COMPONENTS})
    d.update(
        {
            "train.seed": 0,
            "train.dmnet.lr_init": 5e-4,
            "train.dmnet.lr_final": 5e-7,
            "train.dmnet.beta1": 0.9,
            "train.dmnet.beta2": 0.99,
            "train.dmnet.iterations": 2000,
            "train.dmnet.batch_size": 4,
            "train.dmnet.crop_size": 64,
            "train.dmnet.checkpoint_every": 500,
            "train.dmnet.lambda_per": 1.0,
            "train.dmnet.lambda_adv": 1.0,
            "train.dgformer.lr_init": 1e-3,
            "train.dgformer.lr_final": 1e-5,
            "train.dgformer.beta1": 0.9,
            "train.dgformer.beta2": 0.999,
            "train.dgformer.weight_decay": 0.01,
            "train.dgformer.iterations": 2000,
            "train.dgformer.batch_size": 4,
            "train.dgformer.crop_size": 64,
            "train.dgformer.checkpoint_every": 500,
            "train.dgformer.perceptual_weight": 0.01,
        }
    )
    d.update({f"data.{k}": v for k, v in ClassicalGenerator().__dict__.items()})
    d.update({"data.generator": "classical", "data.checkpoint": "", "data.workers": 1})
    return d


# Values reported for the full-scale runs; everything else stays at the desk default.
_PAPER_OVERRIDES = {
    "dgformer.udcrm_blocks": 4,
    "dgformer.irm_blocks": 4,
    "dgformer.dgrm_blocks": [6, 6, 8, 6, 6],
    "dgformer.heads": [2, 4, 8, 4, 2],
    "dgformer.base_channels": 32,
    "dgformer.component_sizes.left_eye": 48,
    "dgformer.component_sizes.right_eye": 48,
    "dgformer.component_sizes.nose": 48,
    "dgformer.component_sizes.mouth": 64,
    "train.dmnet.lr_init": 1e-4,
    "train.dmnet.lr_final": 1e-7,
    "train.dmnet.iterations": 80000,
    "train.dmnet.batch_size": 8,
    "train.dmnet.crop_size": 512,
    "train.dmnet.checkpoint_every": 5000,
    "train.dgformer.lr_init": 2e-4,
    "train.dgformer.lr_final": 2e-6,
    # 40 epochs over 70k images at batch 10
    "train.dgformer.iterations": 280000,
    "train.dgformer.batch_size": 10,
    "train.dgformer.crop_size": 512,
    "train.dgformer.checkpoint_every": 5000,
}

PROFILES = ("desk", "paper")


def defaults(profile: str = "desk") -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    d = _desk_defaults()
    if profile == "paper":
        d.update(_PAPER_OVERRIDES)
    return d


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, like):
    if isinstance(value, str) and not isinstance(like, str):
        text = value.strip()
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if isinstance(like, (list, tuple)):
            value = [p for p in text.strip("[]()").split(",") if p.strip()]
        else:
            value = yaml.safe_load(text)
    try:
        if isinstance(like, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(like, int):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, (list, tuple)):
            return [int(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(like).__name__}") from None


class RunConfig(dict):
    """Flat mapping of namespaced keys; unknown keys are rejected."""

    @classmethod
    def build(cls, profile: str = "desk", path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls(defaults(profile))
        if path is not None:
            try:
                tree = yaml.safe_load(Path(path).read_text()) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            if not isinstance(tree, dict):
                raise ConfigError(f"{path}: expected a mapping at top level")
            cfg.merge(_flatten(tree))
        if overrides:
            cfg.merge(overrides)
        return cfg

    def merge(self, updates: dict) -> None:
        unknown = sorted(set(updates) - set(self))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in updates.items():
            if v is not None:
                self[k] = _coerce(k, v, self[k])

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.items() if k.startswith(p) and "." not in k[len(p) :]}

    def dmnet(self) -> DMNetConfig:
        return DMNetConfig.from_dict(self.section("dmnet"))

    def dgformer(self) -> DGFormerConfig:
        d = self.section("dgformer")
        d["component_sizes"] = self.section("dgformer.component_sizes")
        return DGFormerConfig.from_dict(d)

    def train(self, family: str) -> TrainConfig:
        t = self.section(f"train.{family}")
        for k in ("lambda_per", "lambda_adv", "perceptual_weight"):
            t.pop(k, None)
        return TrainConfig.from_dict({**t, "seed": self["train.seed"]})

    def loss_weights(self) -> LossWeights:
        return LossWeights(self["train.dmnet.lambda_per"], self["train.dmnet.lambda_adv"])

    def classical(self) -> ClassicalGenerator:
        return ClassicalGenerator(
            self["data.alpha"], self["data.kernel"], self["data.kernel_size"], self["data.kernel_sigma"], self["data.noise_sigma"]
        )
