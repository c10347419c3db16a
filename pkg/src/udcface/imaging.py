"""Classical UDC degradation, PSF convolution and image-quality metrics.

Images are ``numpy`` arrays of shape ``(H, W, C)`` holding real values,
nominally in ``[0, 1]``. Everything here is a pure function.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

COMPONENTS = ("left_eye", "right_eye", "nose", "mouth")
PSNR_CAP = 99.0


class ImageShapeError(ValueError):
    pass


def as_image(data) -> np.ndarray:
    """Validate and return ``data`` as a float64 ``(H, W, C)`` array."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or min(img.shape) < 1:
        raise ImageShapeError(f"expected an (H, W, C) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


# ---------------------------------------------------------------------------
# kernels and noise


@dataclass(frozen=True)
class PSFKernel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"PSF must be a square grid with odd side, got {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("PSF weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise ValueError("PSF weights sum to zero")
        object.__setattr__(self, "weights", w / total)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def delta(cls, size: int = 1) -> "PSFKernel":
        w = np.zeros((size, size))
        w[size // 2, size // 2] = 1.0
        return cls(w)

    @classmethod
    def box(cls, size: int) -> "PSFKernel":
        return cls(np.ones((size, size)))

    @classmethod
    def gaussian(cls, size: int, sigma: float) -> "PSFKernel":
        ax = np.arange(size) - size // 2
        g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * max(sigma, 1e-12) ** 2))
        return cls(g)

    @classmethod
    def from_name(cls, name: str, size: int = 5, sigma: float = 1.0) -> "PSFKernel":
        if name == "delta":
            return cls.delta(1)
        if name == "box":
            return cls.box(size)
        if name == "gaussian":
            return cls.gaussian(size, sigma)
        raise ValueError(f"unknown kernel {name!r}; expected delta, box or gaussian")

    def is_centered_delta(self) -> bool:
        c = self.size // 2
        return self.weights[c, c] == 1.0


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("noise sigma must be >= 0")

    def sample(self, shape) -> np.ndarray:
        if self.kind == "none" or self.sigma == 0:
            return np.zeros(shape)
        return np.random.default_rng(self.seed).normal(0.0, self.sigma, size=shape)


# ---------------------------------------------------------------------------
# convolution


def convolve_psf(image, kernel: PSFKernel) -> np.ndarray:
    """Convolve every channel with ``kernel`` using FFTs and reflect padding."""
    img = as_image(image)
    h, w, _ = img.shape
    k = kernel.size
    if k > min(h, w):
        raise ImageShapeError(f"kernel side {k} exceeds image size {h}x{w}")
    if kernel.is_centered_delta():
        return img.copy()
    r = k // 2
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")
    ph, pw = padded.shape[:2]
    # Linear convolution of the padded image, keep the 'valid' window.
    fh, fw = ph + k - 1, pw + k - 1
    spec_img = np.fft.rfft2(padded, s=(fh, fw), axes=(0, 1))
    spec_k = np.fft.rfft2(kernel.weights, s=(fh, fw))
    full = np.fft.irfft2(spec_img * spec_k[:, :, None], s=(fh, fw), axes=(0, 1))
    return full[k - 1 : k - 1 + h, k - 1 : k - 1 + w, :]


def convolve_psf_direct(image, kernel: PSFKernel) -> np.ndarray:
    """Reference spatial convolution by explicit summation (slow)."""
    img = as_image(image)
    h, w, c = img.shape
    k = kernel.size
    if k > min(h, w):
        raise ImageShapeError(f"kernel side {k} exceeds image size {h}x{w}")
    r = k // 2
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")
    wts = kernel.weights
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            acc = np.zeros(c)
            for u in range(k):
                for v in range(k):
                    # flipped kernel: true convolution, not correlation
                    acc += wts[u, v] * padded[i + 2 * r - u, j + 2 * r - v]
            out[i, j] = acc
    return out


# ---------------------------------------------------------------------------
# degradation model


def apply_classical_udc(image, alpha: float, kernel: PSFKernel, noise: NoiseSpec = NoiseSpec()) -> np.ndarray:
    """``clamp((alpha * x) * k + n, 0, 1)``."""
    img = as_image(image)
    if img.shape[2] != 3:
        raise ImageShapeError("classical degradation expects a 3-channel image")
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    y = convolve_psf(alpha * img, kernel) + noise.sample(img.shape)
    return np.clip(y, 0.0, 1.0)


def compose_two_stage(image, stage1: Callable, stage2: Callable) -> np.ndarray:
    """Apply ``stage2(stage1(x))``, checking that neither stage changes shape."""
    img = as_image(image)
    mid = np.asarray(stage1(img))
    if mid.shape != img.shape:
        raise ImageShapeError(f"stage 1 changed shape {img.shape} -> {mid.shape}")
    out = np.asarray(stage2(mid))
    if out.shape != img.shape:
        raise ImageShapeError(f"stage 2 changed shape {img.shape} -> {out.shape}")
    return out


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b) -> float:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ImageShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _valid_filter(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view

    return np.einsum("ijkl,kl->ij", sliding_window_view(x, win.shape), win)


def ssim(a, b, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over valid windows of the channel-mean grayscale images."""
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ImageShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < win_size:
        raise ImageShapeError(f"image {a.shape[:2]} smaller than the {win_size}x{win_size} window")
    x, y = a.mean(axis=2), b.mean(axis=2)
    win = _gaussian_window(win_size, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mx, my = _valid_filter(x, win), _valid_filter(y, win)
    sxx = _valid_filter(x * x, win) - mx * mx
    syy = _valid_filter(y * y, win) - my * my
    sxy = _valid_filter(x * y, win) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def landmark_distance(a: Sequence, b: Sequence) -> float:
    """Mean Euclidean distance between corresponding points."""
    pa, pb = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if pa.shape != pb.shape or pa.ndim != 2 or pa.shape[1] != 2:
        raise ValueError(f"point lists differ or are malformed: {pa.shape} vs {pb.shape}")
    if len(pa) == 0:
        raise ValueError("empty point lists")
    return float(np.mean(np.hypot(*(pa - pb).T)))


# ---------------------------------------------------------------------------
# landmarks


@dataclass(frozen=True)
class Box:
    """Square component box in pixel-index coordinates (pixel centers at integers)."""

    cx: float
    cy: float
    size: float

    @property
    def x0(self) -> float:
        return self.cx - self.size / 2

    @property
    def y0(self) -> float:
        return self.cy - self.size / 2


@dataclass(frozen=True)
class LandmarkSet:
    boxes: dict
    points: tuple | None = field(default=None)

    def __post_init__(self):
        missing = [c for c in COMPONENTS if c not in self.boxes]
        if missing:
            raise KeyError(f"landmark set is missing components: {missing}")
        for name, box in self.boxes.items():
            if box.size <= 0:
                raise ValueError(f"{name}: box size must be positive")

    def __getitem__(self, name: str) -> Box:
        return self.boxes[name]

    @classmethod
    def from_dict(cls, d: dict, multiple: int = 1) -> "LandmarkSet":
        boxes = {}
        for name in COMPONENTS:
            if name not in d:
                raise KeyError(f"landmark entry {name!r} missing")
            cx, cy, size = (float(v) for v in d[name])
            # deepest feature scale must divide the box side
            size = float(math.ceil(size / multiple) * multiple)
            boxes[name] = Box(cx, cy, size)
        pts = d.get("points")
        return cls(boxes, tuple(tuple(map(float, p)) for p in pts) if pts is not None else None)

    def to_dict(self) -> dict:
        d = {name: [b.cx, b.cy, b.size] for name, b in self.boxes.items()}
        if self.points is not None:
            d["points"] = [list(p) for p in self.points]
        return d

    def clamped(self, height: int, width: int) -> "LandmarkSet":
        """Shift (and if needed shrink) boxes so they lie inside the image."""
        out = {}
        for name, b in self.boxes.items():
            size = min(b.size, float(height), float(width))
            lo_x, hi_x = -0.5 + size / 2, width - 0.5 - size / 2
            lo_y, hi_y = -0.5 + size / 2, height - 0.5 - size / 2
            out[name] = Box(min(max(b.cx, lo_x), hi_x), min(max(b.cy, lo_y), hi_y), size)
        return LandmarkSet(out, self.points)

    def map(self, fn: Callable[[float, float], tuple]) -> "LandmarkSet":
        """Apply a point transform to box centers and landmark points."""
        boxes = {n: Box(*fn(b.cx, b.cy), b.size) for n, b in self.boxes.items()}
        pts = tuple(tuple(fn(x, y)) for x, y in self.points) if self.points is not None else None
        return LandmarkSet(boxes, pts)


def load_landmarks(path, multiple: int = 1) -> LandmarkSet:
    with open(path) as fh:
        return LandmarkSet.from_dict(json.load(fh), multiple=multiple)


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    Path(path).write_text(json.dumps(landmarks.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# image files


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(image) -> np.ndarray:
    # round half up
    return np.floor(np.clip(as_image(image), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(image, path) -> None:
    arr = to_uint8(image)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")
