"""Bilinear RoIAlign crop and its transpose ("reverse RoIAlign") paste.

Both operate on ``(N, C, H, W)`` feature maps holding features at stride
``scale`` relative to the image the box was drawn on. Extraction is a
separable linear map ``E`` (rows: output cells, one bilinear sample at each
cell center); pasting writes ``f + E^T (patch - E f)``, which replaces the
box content exactly for grid-aligned boxes and leaves cells the box does not
touch bit-for-bit unchanged.
"""
from __future__ import annotations

import math

import numpy as np
import torch

from .imaging import Box


def _axis_matrix(start: float, length: float, out_size: int, n: int) -> np.ndarray:
    """(out_size, n) bilinear sampling weights along one axis."""
    m = np.zeros((out_size, n))
    for j in range(out_size):
        p = start + (j + 0.5) * length / out_size
        p = min(max(p, 0.0), n - 1.0)
        i0 = int(math.floor(p))
        frac = p - i0
        m[j, i0] += 1.0 - frac
        if frac > 0:
            m[j, i0 + 1] += frac
    return m


def box_at_scale(box: Box, scale: int) -> tuple[float, float, float]:
    """Box edges in feature-index coordinates at stride ``scale``: (x0, y0, side)."""
    x0 = (box.x0 + 0.5) / scale - 0.5
    y0 = (box.y0 + 0.5) / scale - 0.5
    return x0, y0, box.size / scale


def roi_matrices(box: Box, scale: int, out_size: int, height: int, width: int):
    x0, y0, side = box_at_scale(box, scale)
    if side < 1.0:
        raise ValueError(f"box of side {box.size} is degenerate at scale {scale}")
    if x0 < -0.5 - 1e-9 or y0 < -0.5 - 1e-9 or x0 + side > width - 0.5 + 1e-9 or y0 + side > height - 0.5 + 1e-9:
        raise ValueError(f"box {box} lies outside the {height}x{width} feature map at scale {scale}")
    ry = _axis_matrix(y0, side, out_size, height)
    rx = _axis_matrix(x0, side, out_size, width)
    return ry, rx


def _as_torch(m: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(m, dtype=like.dtype, device=like.device)


def roi_extract(f: torch.Tensor, box: Box, out_size: int, scale: int = 1) -> torch.Tensor:
    ry, rx = roi_matrices(box, scale, out_size, f.shape[-2], f.shape[-1])
    return torch.einsum("oh,nchw,pw->ncop", _as_torch(ry, f), f, _as_torch(rx, f))


def roi_paste(f: torch.Tensor, patch: torch.Tensor, box: Box, scale: int = 1) -> torch.Tensor:
    out_size = patch.shape[-1]
    if patch.shape[-2] != out_size or patch.shape[:2] != f.shape[:2]:
        raise ValueError(f"patch {tuple(patch.shape)} does not fit feature map {tuple(f.shape)}")
    ry, rx = roi_matrices(box, scale, out_size, f.shape[-2], f.shape[-1])
    ry, rx = _as_torch(ry, f), _as_torch(rx, f)
    delta = patch - torch.einsum("oh,nchw,pw->ncop", ry, f, rx)
    return f + torch.einsum("oh,ncop,pw->nchw", ry, delta, rx)
