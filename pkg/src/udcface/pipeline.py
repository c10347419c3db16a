"""Dataset synthesis, augmentation and train/evaluate orchestration."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .dgformer import DGRM_SCALES, DGFormer, DGFormerConfig, DGFormerTrainer
from .dmnet import DMNet, DMNetConfig
from .gan import GANTrainer, LossWeights, PatchGAN, TrainConfig
from .imaging import (
    LandmarkSet,
    NoiseSpec,
    PSFKernel,
    apply_classical_udc,
    landmark_distance,
    load_image,
    load_landmarks,
    psnr,
    save_image,
    ssim,
)
from .layers import image_to_tensor, tensor_to_image

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "udcface-manifest"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data types


@dataclass
class PairedSample:
    degraded: np.ndarray
    clean: np.ndarray
    landmarks: Optional[LandmarkSet]
    id: str

    def __post_init__(self):
        if self.degraded.shape != self.clean.shape:
            raise ValueError(f"{self.id}: degraded {self.degraded.shape} and clean {self.clean.shape} differ")


@dataclass
class ManifestEntry:
    id: str
    clean_path: Path
    degraded_path: Path
    landmark_path: Optional[Path]


@dataclass
class DatasetManifest:
    entries: list
    generator: dict
    seed: int
    root: Path = Path(".")

    def to_json(self) -> dict:
        def rel(p):
            return None if p is None else os.path.relpath(p, self.root)

        return {
            "format": MANIFEST_FORMAT,
            "version": 1,
            "seed": self.seed,
            "generator": self.generator,
            "entries": [
                {
                    "id": e.id,
                    "clean_path": rel(e.clean_path),
                    "degraded_path": rel(e.degraded_path),
                    "landmark_path": rel(e.landmark_path),
                }
                for e in self.entries
            ],
        }

    def save(self, path) -> Path:
        path = Path(path)
        self.root = path.parent
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if data.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} file")
    root = path.parent
    entries, seen = [], set()
    for raw in data.get("entries", []):
        eid = raw["id"]
        if eid in seen:
            raise ManifestError(f"{path}: duplicate id {eid!r}")
        seen.add(eid)
        paths = {}
        for key in ("clean_path", "degraded_path", "landmark_path"):
            p = raw.get(key)
            if p is None:
                if key != "landmark_path":
                    raise ManifestError(f"{path}: entry {eid!r} lacks {key}")
                paths[key] = None
                continue
            full = (root / p).resolve()
            if not full.exists():
                raise ManifestError(f"{path}: entry {eid!r}: {key} {full} does not exist")
            paths[key] = full
        entries.append(ManifestEntry(eid, **paths))
    return DatasetManifest(entries, data.get("generator", {}), int(data.get("seed", 0)), root)


def load_samples(manifest: DatasetManifest, require_landmarks: bool = False) -> list:
    samples = []
    for e in manifest.entries:
        clean, degraded = load_image(e.clean_path), load_image(e.degraded_path)
        lm = None
        if e.landmark_path is not None:
            lm = load_landmarks(e.landmark_path, multiple=max(DGRM_SCALES)).clamped(*clean.shape[:2])
        elif require_landmarks:
            raise ManifestError(f"entry {e.id!r} has no landmark file")
        samples.append(PairedSample(degraded, clean, lm, e.id))
    if not samples:
        raise ManifestError("manifest has no entries")
    return samples


# ---------------------------------------------------------------------------
# synthesis


def _stable_seed(seed: int, key: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(key.encode())]).generate_state(1)[0])


@dataclass(frozen=True)
class ClassicalGenerator:
    alpha: float = 0.7
    kernel: str = "gaussian"
    kernel_size: int = 5
    kernel_sigma: float = 1.0
    noise_sigma: float = 0.0

    def psf(self) -> PSFKernel:
        return PSFKernel.from_name(self.kernel, self.kernel_size, self.kernel_sigma)

    def __call__(self, image: np.ndarray, seed: int) -> np.ndarray:
        kind = "gaussian" if self.noise_sigma > 0 else "none"
        return apply_classical_udc(image, self.alpha, self.psf(), NoiseSpec(kind, self.noise_sigma, seed))

    def describe(self) -> dict:
        return {"kind": "classical", **self.__dict__}


class DMNetGenerator:
    def __init__(self, checkpoint_path):
        self.path = Path(checkpoint_path)
        ck = ckpt_io.load(self.path)
        if ck.family != "dmnet":
            raise ckpt_io.CheckpointError(f"{self.path}: expected a dmnet checkpoint, got {ck.family}")
        self.model = ckpt_io.build_model(ck)

    def __call__(self, image: np.ndarray, seed: int) -> np.ndarray:
        with torch.no_grad():
            return tensor_to_image(self.model(image_to_tensor(image)))

    def describe(self) -> dict:
        return {"kind": "dmnet", "checkpoint": str(self.path)}


def list_images(directory) -> list:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def synthesize_dataset(clean_dir, generator, out_dir, seed: int = 0, workers: int = 1) -> DatasetManifest:
    """Degrade every clean image in ``clean_dir``; write PNGs and ``manifest.json``."""
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    deg_dir = out_dir / "degraded"
    deg_dir.mkdir(parents=True, exist_ok=True)

    def work(path: Path):
        try:
            img = load_image(path)
        except Exception as exc:  # noqa: BLE001 - any decoder failure
            log.warning("skipping unreadable image %s: %s", path, exc)
            return None
        out = generator(img, _stable_seed(seed, path.stem))
        dst = deg_dir / f"{path.stem}.png"
        save_image(out, dst)
        lm = path.with_suffix(".json")
        return ManifestEntry(path.stem, path.resolve(), dst.resolve(), lm.resolve() if lm.exists() else None)

    entries = [e for e in _map(work, list_images(clean_dir), workers) if e is not None]
    if not entries:
        raise ManifestError(f"no readable images in {clean_dir}")
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError("clean images with identical stems produce duplicate ids")
    manifest = DatasetManifest(entries, generator.describe(), seed, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class GeometricTransform:
    hflip: bool = False
    rot90: int = 0
    crop: Optional[tuple] = None  # (top, left, size), applied after flip/rotation


def _transform_image(img: np.ndarray, t: GeometricTransform) -> np.ndarray:
    if t.hflip:
        img = img[:, ::-1]
    img = np.rot90(img, t.rot90 % 4, axes=(0, 1))
    if t.crop is not None:
        top, left, size = t.crop
        img = img[top : top + size, left : left + size]
    return np.ascontiguousarray(img)


def _transform_landmarks(lm: LandmarkSet, t: GeometricTransform, h: int, w: int) -> LandmarkSet:
    if t.hflip:
        lm = lm.map(lambda x, y, w=w: (w - 1 - x, y))
    for _ in range(t.rot90 % 4):
        # one counter-clockwise quarter turn of an (h, w) image
        lm = lm.map(lambda x, y, w=w: (y, w - 1 - x))
        h, w = w, h
    if t.crop is not None:
        top, left, size = t.crop
        lm = lm.map(lambda x, y: (x - left, y - top))
        h = w = size
    return lm.clamped(h, w)


def apply_transform(sample: PairedSample, t: GeometricTransform) -> PairedSample:
    h, w = sample.clean.shape[:2]
    if t.crop is not None:
        top, left, size = t.crop
        hh, ww = (w, h) if t.rot90 % 2 else (h, w)
        if size > min(hh, ww) or top < 0 or left < 0 or top + size > hh or left + size > ww:
            raise ValueError(f"crop {t.crop} does not fit a {hh}x{ww} image")
    lm = _transform_landmarks(sample.landmarks, t, h, w) if sample.landmarks is not None else None
    return PairedSample(_transform_image(sample.degraded, t), _transform_image(sample.clean, t), lm, sample.id)


def random_transform(rng: np.random.Generator, h: int, w: int, crop_size: Optional[int] = None) -> GeometricTransform:
    hflip = bool(rng.integers(2))
    k = int(rng.integers(4))
    crop = None
    if crop_size is not None:
        hh, ww = (w, h) if k % 2 else (h, w)
        if crop_size > min(hh, ww):
            raise ValueError(f"crop size {crop_size} exceeds image size {h}x{w}")
        crop = (int(rng.integers(hh - crop_size + 1)), int(rng.integers(ww - crop_size + 1)), crop_size)
    return GeometricTransform(hflip, k, crop)


def augment(sample: PairedSample, seed: int, crop_size: Optional[int] = None) -> PairedSample:
    """Random flip, quarter-turn rotation and crop, applied identically to the whole sample."""
    h, w = sample.clean.shape[:2]
    return apply_transform(sample, random_transform(np.random.default_rng(seed), h, w, crop_size))


def make_batch(samples: Sequence[PairedSample], seed: int, step: int, batch_size: int, crop_size: int):
    """Deterministic batch for ``step``: depends only on (seed, step)."""
    rng = np.random.default_rng([seed, step])
    idx = rng.choice(len(samples), size=batch_size, replace=len(samples) < batch_size)
    batch = [augment(samples[i], int(rng.integers(2**31)), crop_size) for i in idx]
    degraded = torch.cat([image_to_tensor(s.degraded) for s in batch])
    clean = torch.cat([image_to_tensor(s.clean) for s in batch])
    return degraded, clean, [s.landmarks for s in batch]


# ---------------------------------------------------------------------------
# training


class JsonlLog:
    """Append-only JSON-lines log; on resume keeps records up to ``keep_until``.

    Earlier records come from ``path`` itself or, when resuming into a fresh
    directory, from ``source`` (the log beside the resumed checkpoint).
    """

    def __init__(self, path, keep_until: int = 0, source=None):
        self.path = Path(path)
        lines = []
        src = self.path if self.path.exists() or source is None else Path(source)
        if keep_until and src.exists():
            for line in src.read_text().splitlines():
                if line.strip() and json.loads(line)["iter"] <= keep_until:
                    lines.append(line)
        self.path.write_text("".join(l + "\n" for l in lines))

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def _ckpt_name(step: int) -> str:
    return f"ckpt_{step:06d}.npz"


def train_dmnet(
    manifest,
    model_cfg: DMNetConfig,
    train_cfg: TrainConfig,
    out_dir,
    weights: LossWeights = LossWeights(),
    resume=None,
    plot: bool = True,
) -> Path:
    """Adversarial training of the degradation generator on (clean -> degraded) pairs."""
    samples = load_samples(manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    gen, disc = DMNet(model_cfg), PatchGAN()
    trainer = GANTrainer(gen, disc, train_cfg, weights)
    start = 0
    if resume is not None:
        ck = ckpt_io.load(resume)
        if ck.family != "dmnet" or not ck.section("optim/g"):
            raise ckpt_io.CheckpointError(f"{resume}: not a resumable dmnet training checkpoint")
        if DMNetConfig.from_dict(ck.config) != model_cfg:
            raise ckpt_io.CheckpointError(f"{resume}: model config differs from the requested one")
        ckpt_io.load_module_arrays(gen, ck.section("model"))
        ckpt_io.load_module_arrays(disc, ck.section("disc"))
        ckpt_io.load_optimizer_arrays(trainer.opt_g, ck.section("optim/g"), ck.extra["optim_g"])
        ckpt_io.load_optimizer_arrays(trainer.opt_d, ck.section("optim/d"), ck.extra["optim_d"])
        start = trainer.step = ck.step
    logger = JsonlLog(out_dir / "train_log.jsonl", start, Path(resume).parent / "train_log.jsonl" if resume else None)
    last = None
    for step in range(start, train_cfg.iterations):
        target, clean, _ = make_batch(samples, train_cfg.seed, step, train_cfg.batch_size, train_cfg.crop_size)
        r = trainer.train_step(clean, target)
        logger.write({"iter": step + 1, "l_psnr": r["l_psnr"], "l_per": r["l_per"], "l_adv": r["l_adv"], "lr": r["lr"]})
        if (step + 1) % train_cfg.checkpoint_every == 0 or step + 1 == train_cfg.iterations:
            arrays = {**ckpt_io.module_arrays(gen, "model"), **ckpt_io.module_arrays(disc, "disc")}
            a_g, m_g = ckpt_io.optimizer_arrays(trainer.opt_g, "optim/g")
            a_d, m_d = ckpt_io.optimizer_arrays(trainer.opt_d, "optim/d")
            arrays.update(a_g)
            arrays.update(a_d)
            extra = {"optim_g": m_g, "optim_d": m_d, "train": train_cfg.to_dict(), "weights": weights.__dict__}
            last = ckpt_io.save(
                ckpt_io.Checkpoint("dmnet", model_cfg.to_dict(), arrays, step + 1, extra), out_dir / _ckpt_name(step + 1)
            )
    if plot:
        from .plotting import plot_training_log

        plot_training_log(out_dir / "train_log.jsonl", out_dir / "train_log.png")
    return last if last is not None else Path(resume)


def train_dgformer(
    manifest,
    model_cfg: DGFormerConfig,
    train_cfg: TrainConfig,
    out_dir,
    perceptual_weight: float = 0.01,
    resume=None,
    plot: bool = True,
) -> Path:
    """L1 (+ perceptual) training of the restorer on (degraded -> clean, landmarks) samples."""
    samples = load_samples(
        manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest), require_landmarks=True
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    model = DGFormer(model_cfg)
    trainer = DGFormerTrainer(model, train_cfg, perceptual_weight)
    start = 0
    if resume is not None:
        ck = ckpt_io.load(resume)
        if ck.family != "dgformer" or not ck.section("optim/opt"):
            raise ckpt_io.CheckpointError(f"{resume}: not a resumable dgformer training checkpoint")
        if DGFormerConfig.from_dict(ck.config) != model_cfg:
            raise ckpt_io.CheckpointError(f"{resume}: model config differs from the requested one")
        ckpt_io.load_module_arrays(model, ck.section("model"))
        ckpt_io.load_optimizer_arrays(trainer.opt, ck.section("optim/opt"), ck.extra["optim"])
        start = trainer.step = ck.step
    logger = JsonlLog(out_dir / "train_log.jsonl", start, Path(resume).parent / "train_log.jsonl" if resume else None)
    last = None
    for step in range(start, train_cfg.iterations):
        degraded, clean, lms = make_batch(samples, train_cfg.seed, step, train_cfg.batch_size, train_cfg.crop_size)
        r = trainer.train_step(degraded, clean, lms)
        logger.write({"iter": step + 1, "l1": r["l1"], "l_per": r["l_per"], "loss": r["loss"], "lr": r["lr"]})
        if (step + 1) % train_cfg.checkpoint_every == 0 or step + 1 == train_cfg.iterations:
            arrays = ckpt_io.module_arrays(model, "model")
            a_o, m_o = ckpt_io.optimizer_arrays(trainer.opt, "optim/opt")
            arrays.update(a_o)
            extra = {"optim": m_o, "train": train_cfg.to_dict(), "perceptual_weight": perceptual_weight}
            last = ckpt_io.save(
                ckpt_io.Checkpoint("dgformer", model_cfg.to_dict(), arrays, step + 1, extra),
                out_dir / _ckpt_name(step + 1),
            )
    if plot:
        from .plotting import plot_training_log

        plot_training_log(out_dir / "train_log.jsonl", out_dir / "train_log.png")
    return last if last is not None else Path(resume)


# ---------------------------------------------------------------------------
# restoration and evaluation


class IdentityRestorer:
    family = "dgformer"

    def __call__(self, image, landmarks=None):
        return image


class ModelRunner:
    """Wraps a checkpointed model as ``(H, W, 3) array -> (H, W, 3) array``."""

    def __init__(self, path):
        ck = ckpt_io.load(path)
        self.family = ck.family
        self.model = ckpt_io.build_model(ck)

    def __call__(self, image, landmarks=None):
        x = image_to_tensor(image)
        with torch.no_grad():
            if self.family == "dgformer":
                if landmarks is None:
                    raise ManifestError("the restorer needs landmarks for every image")
                y = self.model(x, landmarks)
            else:
                y = self.model(x)
        return tensor_to_image(y)


def load_runner(checkpoint):
    return IdentityRestorer() if checkpoint is None else ModelRunner(checkpoint)


def restore_directory(checkpoint, input_dir, landmark_dir, out_dir, workers: int = 1) -> list:
    runner = load_runner(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = list_images(input_dir)
    if not images:
        raise ManifestError(f"no images in {input_dir}")

    def work(path):
        img = load_image(path)
        lm_path = Path(landmark_dir) / f"{path.stem}.json"
        if not lm_path.exists():
            raise ManifestError(f"missing landmark file {lm_path}")
        lm = load_landmarks(lm_path, multiple=max(DGRM_SCALES)).clamped(*img.shape[:2])
        dst = out_dir / f"{path.stem}.png"
        save_image(runner(img, lm), dst)
        return dst

    return _map(work, images, workers)


def _points(path) -> Optional[list]:
    if path is None or not Path(path).exists():
        return None
    pts = json.loads(Path(path).read_text()).get("points")
    return pts


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def evaluate(
    checkpoint,
    manifest,
    out_dir,
    save_images: bool = False,
    points_dir=None,
    detector: Optional[Callable] = None,
    workers: int = 1,
    plot: bool = True,
) -> dict:
    """Per-image and mean PSNR / SSIM / LMD of a restorer (or generator) on a manifest.

    A dgformer checkpoint (or ``None``, the identity restorer) maps degraded to
    clean; a dmnet checkpoint maps clean to degraded. LMD compares the
    reference ``points`` of each landmark file with points found on the output
    by ``detector`` or read from ``points_dir/<id>.json``; it is left empty
    when neither is available.
    """
    manifest = manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest)
    runner = load_runner(checkpoint)
    restorer = runner.family == "dgformer"
    samples = load_samples(manifest, require_landmarks=restorer and checkpoint is not None)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if save_images:
        (out_dir / "images").mkdir(exist_ok=True)

    def work(item):
        entry, s = item
        src, ref = (s.degraded, s.clean) if restorer else (s.clean, s.degraded)
        out = runner(src, s.landmarks)
        if save_images:
            save_image(out, out_dir / "images" / f"{s.id}.png")
        lmd = float("nan")
        ref_pts = _points(entry.landmark_path)
        pred_pts = None
        if ref_pts is not None:
            if detector is not None:
                pred_pts = detector(out)
            elif points_dir is not None:
                pred_pts = _points(Path(points_dir) / f"{s.id}.json")
        if ref_pts is not None and pred_pts is not None:
            lmd = landmark_distance(ref_pts, pred_pts)
        return {"id": s.id, "psnr": psnr(out, ref), "ssim": ssim(out, ref), "lmd": lmd}

    rows = _map(work, list(zip(manifest.entries, samples)), workers)

    def mean(key):
        vals = [r[key] for r in rows if not math.isnan(r[key])]
        return float(np.mean(vals)) if vals else None

    report = {
        "checkpoint": None if checkpoint is None else str(checkpoint),
        "family": runner.family,
        "count": len(rows),
        "mean": {k: mean(k) for k in ("psnr", "ssim", "lmd")},
        "rows": [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in rows],
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    with (out_dir / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "psnr", "ssim", "lmd"])
        for r in rows:
            w.writerow([r["id"], _fmt(r["psnr"]), _fmt(r["ssim"]), _fmt(r["lmd"])])
    if plot:
        from .plotting import plot_report

        plot_report(rows, out_dir / "report.png")
    return report
