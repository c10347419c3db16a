import json

import numpy as np
import pytest
import torch

from udcface.imaging import Box, LandmarkSet, save_image

torch.set_num_threads(1)


def landmarks_for(size: int) -> LandmarkSet:
    """Four component boxes laid out for a ``size`` x ``size`` face (integer-aligned at 32)."""
    s = size / 32
    side = max(4, 4 * round(8 * s / 4))
    return LandmarkSet(
        {
            "left_eye": Box(11.5 * s, 11.5 * s, side),
            "right_eye": Box(20.5 * s, 11.5 * s, side),
            "nose": Box(15.5 * s, 17.5 * s, side),
            "mouth": Box(15.5 * s, 24.5 * s, side),
        },
        points=((11.5 * s, 11.5 * s), (20.5 * s, 11.5 * s), (15.5 * s, 17.5 * s), (15.5 * s, 24.5 * s)),
    )


@pytest.fixture
def lm32():
    return landmarks_for(32)


def smooth_face(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency random image standing in for a face crop."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    chans = []
    for _ in range(3):
        a, b, c, d = rng.uniform(1, 6, 4)
        chans.append(0.5 + 0.25 * np.sin(a * xx + b) * np.cos(c * yy + d))
    img = np.stack(chans, -1) + rng.normal(0, 0.01, (size, size, 3))
    return np.clip(img, 0, 1)


def make_face_dir(path, n: int = 4, size: int = 40, seed: int = 0, landmarks: bool = True):
    path.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lm = landmarks_for(32)
    off = (size - 32) / 2
    d = {k: [b.cx + off, b.cy + off, b.size] for k, b in lm.boxes.items()}
    d["points"] = [[x + off, y + off] for x, y in lm.points]
    for i in range(n):
        save_image(smooth_face(rng, size), path / f"face{i:02d}.png")
        if landmarks:
            (path / f"face{i:02d}.json").write_text(json.dumps(d))
    return path


@pytest.fixture
def face_dir(tmp_path):
    return make_face_dir(tmp_path / "clean")


def randomize(module: torch.nn.Module, seed: int = 0, scale: float = 0.1) -> torch.nn.Module:
    """Replace every all-zero parameter (zero-init projections, biases) by small noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if not p.any():
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def pick_parameters(model: torch.nn.Module, n: int, seed: int, must_include=()):
    """``n`` random (name, flat index) pairs; names containing each ``must_include`` string come first."""
    rng = np.random.default_rng(seed)
    named = [(k, p) for k, p in model.named_parameters() if p.requires_grad]
    picks = []
    for key in must_include:
        cands = [k for k, _ in named if key in k]
        k = cands[rng.integers(len(cands))]
        picks.append((k, int(rng.integers(dict(named)[k].numel()))))
    while len(picks) < n:
        k, p = named[rng.integers(len(named))]
        picks.append((k, int(rng.integers(p.numel()))))
    return picks


def finite_difference_errors(loss32, loss64, model32, model64, picks, eps: float = 1e-5, floor: float = 1e-8):
    """Relative errors between float32 autograd and float64 central differences.

    ``loss32()`` / ``loss64()`` evaluate the same loss with ``model32`` /
    ``model64`` (a float64 copy). The denominator is floored at ``floor`` so
    parameters whose true gradient is ~0 do not divide float32 rounding noise
    by ~0.
    """
    model32.zero_grad(set_to_none=True)
    loss32().backward()
    grads = dict(model32.named_parameters())
    params64 = dict(model64.named_parameters())
    errs = []
    for name, idx in picks:
        analytic = grads[name].grad.flatten()[idx].item()
        p = params64[name]
        with torch.no_grad():
            orig = p.flatten()[idx].item()
            p.view(-1)[idx] = orig + eps
            up = loss64().item()
            p.view(-1)[idx] = orig - eps
            down = loss64().item()
            p.view(-1)[idx] = orig
        numeric = (up - down) / (2 * eps)
        errs.append((name, analytic, numeric, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)))
    return errs


_CRITERIA: dict = {}


@pytest.fixture
def criterion(capsys):
    """``report(n, ok, detail)`` records and prints one PASS/FAIL line for criterion ``n``."""

    def report(n: int, ok: bool, detail: str = "") -> bool:
        prev = _CRITERIA.get(n)
        ok = bool(ok) and (prev is None or prev[0])
        _CRITERIA[n] = (ok, detail if prev is None else f"{prev[1]}; {detail}")
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
