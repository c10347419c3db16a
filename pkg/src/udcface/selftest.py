"""Quick oracle-equivalence and invariant checks runnable from the command line."""
from __future__ import annotations

import sys
from typing import Callable

import numpy as np
import torch

from . import dgformer as dgf
from . import dmnet as dmn
from .imaging import (
    Box,
    LandmarkSet,
    NoiseSpec,
    PSFKernel,
    apply_classical_udc,
    compose_two_stage,
    convolve_psf,
    convolve_psf_direct,
    landmark_distance,
    psnr,
    ssim,
)
from .layers import zero_residual_outputs
from .roi import roi_extract, roi_matrices, roi_paste

_LM32 = LandmarkSet(
    {
        "left_eye": Box(11.5, 11.5, 8),
        "right_eye": Box(20.5, 11.5, 8),
        "nose": Box(15.5, 17.5, 8),
        "mouth": Box(15.5, 24.5, 8),
    }
)


def _convolution():
    rng = np.random.default_rng(0)
    for _ in range(20):
        img = rng.random((16, 16, 3))
        k = PSFKernel(rng.random((5, 5)))
        yield np.abs(convolve_psf(img, k) - convolve_psf_direct(img, k)).max() < 1e-5


def _metrics():
    a = np.full((8, 8, 3), 0.5)
    yield abs(psnr(a, a + 0.1) - 20.0) < 1e-6
    img = np.random.default_rng(1).random((24, 24, 3))
    yield abs(ssim(img, img) - 1.0) < 1e-9
    yield landmark_distance([(0.0, 0.0)], [(3.0, 4.0)]) == 5.0
    yield psnr(img, img) == 99.0


def _classical():
    img = np.random.default_rng(2).random((16, 16, 3))
    yield np.abs(apply_classical_udc(img, 1.0, PSFKernel.delta(5)) - img).max() < 1e-7
    k, noise = PSFKernel.gaussian(5, 1.0), NoiseSpec("gaussian", 0.02, 7)
    direct = apply_classical_udc(img, 0.6, k, noise)
    staged = compose_two_stage(img, lambda x: apply_classical_udc(x, 0.6, k), lambda x: np.clip(x + noise.sample(x.shape), 0, 1))
    yield np.abs(direct - staged).max() < 1e-6


def _roi():
    g = torch.Generator().manual_seed(3)
    f = torch.rand(1, 2, 12, 12, generator=g, dtype=torch.float64)
    box = Box(5.5, 6.5, 6)
    patch = torch.rand(1, 2, 6, 6, generator=g, dtype=torch.float64)
    pasted = roi_paste(f, patch, box)
    yield torch.allclose(roi_extract(pasted, box, 6), patch, atol=1e-6)
    mask = torch.ones(12, 12, dtype=torch.bool)
    mask[4:10, 3:9] = False
    yield torch.equal(pasted[..., mask], f[..., mask])
    frac = Box(5.3, 6.1, 5.0)
    ry, rx = roi_matrices(frac, 1, 4, 12, 12)
    full = torch.as_tensor(np.kron(ry, rx))
    ref = (full @ f.reshape(1, 2, -1).transpose(1, 2)).transpose(1, 2).reshape(1, 2, 4, 4)
    yield torch.allclose(roi_extract(f, frac, 4), ref, atol=1e-5)


def _softmax():
    torch.manual_seed(4)
    model = dgf.DGFormer(dgf.DGFormerConfig.tiny())
    dgf.set_attention_recording(model)
    with torch.no_grad():
        model(torch.rand(2, 3, 32, 32), _LM32)
    for m in model.modules():
        if isinstance(m, dgf._Recorder) and m.last_attention is not None:
            att = m.last_attention
            for a in att.values() if isinstance(att, dict) else [att]:
                yield bool(((a.sum(-1) - 1).abs() < 1e-5).all())


def _residual_identity():
    x = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(5))
    for name, over in dmn.ABLATIONS.items():
        torch.manual_seed(0)
        m = zero_residual_outputs(dmn.DMNet(dmn.DMNetConfig(base_channels=8, **over)))
        with torch.no_grad():
            yield torch.equal(m(x), x)
    for name, over in dgf.ABLATIONS.items():
        torch.manual_seed(0)
        m = zero_residual_outputs(dgf.DGFormer(dgf.DGFormerConfig.tiny(**over)))
        with torch.no_grad():
            yield torch.equal(m(x, _LM32), x)


SUITES: dict[str, Callable] = {
    "convolution": _convolution,
    "metrics": _metrics,
    "classical": _classical,
    "roi": _roi,
    "softmax": _softmax,
    "residual_identity": _residual_identity,
}


def run(out=sys.stdout) -> bool:
    ok = True
    for name, suite in SUITES.items():
        try:
            results = [bool(r) for r in suite()]
            err = ""
        except Exception as exc:  # noqa: BLE001 - a crash counts as a failure
            results, err = [False], f" ({type(exc).__name__}: {exc})"
        passed = sum(results)
        ok &= passed == len(results)
        status = "ok" if passed == len(results) else "FAIL"
        print(f"{name:18s} {passed}/{len(results)} passed  {status}{err}", file=out)
    return ok
