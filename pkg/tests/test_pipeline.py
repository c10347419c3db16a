import csv
import json
import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from udcface import checkpoint as ck
from udcface.dgformer import DGFormer, DGFormerConfig
from udcface.dmnet import DMNetConfig
from udcface.gan import TrainConfig, cosine_lr
from udcface.imaging import Box, LandmarkSet, load_image, psnr
from udcface.pipeline import (
    ClassicalGenerator,
    GeometricTransform,
    ManifestError,
    PairedSample,
    apply_transform,
    augment,
    evaluate,
    load_manifest,
    load_samples,
    make_batch,
    restore_directory,
    synthesize_dataset,
    train_dgformer,
    train_dmnet,
)

from conftest import make_face_dir, smooth_face

IDENTITY = ClassicalGenerator(alpha=1.0, kernel="delta", noise_sigma=0.0)
TINY_DG = DGFormerConfig.tiny()
TINY_DM = DMNetConfig(base_channels=4)


def tiny_train(**kw):
    base = dict(lr_init=1e-3, lr_final=1e-5, iterations=6, batch_size=2, crop_size=32, checkpoint_every=3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# synthesis


def test_identity_generator_reproduces_clean_files(face_dir, tmp_path):
    m = synthesize_dataset(face_dir, IDENTITY, tmp_path / "out")
    for e in m.entries:
        assert e.degraded_path.read_bytes() == e.clean_path.read_bytes()


def test_ten_images_give_ten_unique_entries(tmp_path):
    src = make_face_dir(tmp_path / "clean", n=10, size=24)
    m = synthesize_dataset(src, ClassicalGenerator(), tmp_path / "out")
    assert len(m.entries) == 10 == len({e.id for e in m.entries})
    assert len(load_manifest(tmp_path / "out" / "manifest.json").entries) == 10


def test_synthesis_is_deterministic_per_seed(face_dir, tmp_path):
    synthesize_dataset(face_dir, ClassicalGenerator(noise_sigma=0.05), tmp_path / "a", seed=1)
    synthesize_dataset(face_dir, ClassicalGenerator(noise_sigma=0.05), tmp_path / "b", seed=1, workers=3)
    synthesize_dataset(face_dir, ClassicalGenerator(noise_sigma=0.05), tmp_path / "c", seed=2)
    a, b, c = (tree_bytes(tmp_path / k / "degraded") for k in "abc")
    assert a == b and a != c
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_unreadable_images_skipped_and_empty_is_error(face_dir, tmp_path, caplog):
    (face_dir / "broken.png").write_bytes(b"nope")
    with caplog.at_level(logging.WARNING):
        m = synthesize_dataset(face_dir, IDENTITY, tmp_path / "out")
    assert "broken" in caplog.text and len(m.entries) == 4
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ManifestError):
        synthesize_dataset(empty, IDENTITY, tmp_path / "out2")


def test_manifest_validation(face_dir, tmp_path):
    synthesize_dataset(face_dir, IDENTITY, tmp_path / "out")
    path = tmp_path / "out" / "manifest.json"
    data = json.loads(path.read_text())
    data["entries"].append(dict(data["entries"][0]))
    path.write_text(json.dumps(data))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(path)
    data["entries"].pop()
    data["entries"][0]["clean_path"] = "nowhere.png"
    path.write_text(json.dumps(data))
    with pytest.raises(ManifestError, match="does not exist"):
        load_manifest(path)
    path.write_text("{")
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_manifest_is_relocatable(face_dir, tmp_path):
    synthesize_dataset(face_dir, IDENTITY, tmp_path / "out")
    data = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert not any(str(v).startswith("/") for e in data["entries"] for v in e.values() if v)


# ---------------------------------------------------------------------------
# augmentation


def _sample(seed=0, h=20, w=26):
    rng = np.random.default_rng(seed)
    clean = smooth_face(rng, 32)[:h, :w]
    degraded = np.clip(clean * 0.7 + rng.normal(0, 0.02, clean.shape), 0, 1)
    lm = LandmarkSet(
        {
            "left_eye": Box(5.5, 5.5, 4),
            "right_eye": Box(15.5, 5.5, 4),
            "nose": Box(10.5, 9.5, 4),
            "mouth": Box(10.5, 14.5, 4),
        },
        points=((5.5, 5.5), (15.5, 5.5)),
    )
    return PairedSample(degraded, clean, lm, "s")


def test_flip_twice_is_identity():
    s = _sample()
    t = GeometricTransform(hflip=True)
    back = apply_transform(apply_transform(s, t), t)
    assert np.array_equal(back.clean, s.clean) and np.array_equal(back.degraded, s.degraded)
    assert back.landmarks == s.landmarks


def test_flip_mirrors_box_centers():
    s = _sample()
    out = apply_transform(s, GeometricTransform(hflip=True))
    w = s.clean.shape[1]
    for c, b in s.landmarks.boxes.items():
        assert out.landmarks[c].cx == w - 1 - b.cx and out.landmarks[c].cy == b.cy


@pytest.mark.parametrize("k", [0, 1, 2, 3])
@pytest.mark.parametrize("flip", [False, True])
def test_landmarks_follow_pixels(k, flip):
    s = _sample()
    marker = np.zeros_like(s.clean)
    marker[3, 17] = 1.0
    s = PairedSample(marker, marker, LandmarkSet(s.landmarks.boxes, ((17.0, 3.0),)), "m")
    out = apply_transform(s, GeometricTransform(flip, k))
    r, c = np.argwhere(out.clean[..., 0] == 1.0)[0]
    assert out.landmarks.points[0] == (c, r)


@settings(max_examples=30, deadline=None)
@given(st.booleans(), st.integers(0, 3), st.integers(0, 10_000))
def test_psnr_invariant_under_isometries(flip, k, seed):
    s = _sample(seed % 7)
    out = apply_transform(s, GeometricTransform(flip, k))
    assert psnr(out.degraded, out.clean) == pytest.approx(psnr(s.degraded, s.clean), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_augment_pairs_stay_aligned(seed):
    s = _sample()
    s = PairedSample(s.clean, s.clean.copy(), s.landmarks, "same")
    out = augment(s, seed, crop_size=12)
    assert out.clean.shape == (12, 12, 3)
    assert np.array_equal(out.clean, out.degraded)
    for b in out.landmarks.boxes.values():
        assert -0.5 <= b.x0 and b.x0 + b.size <= 11.5


def test_crop_too_large_rejected():
    with pytest.raises(ValueError):
        augment(_sample(), 0, crop_size=21)
    with pytest.raises(ValueError):
        apply_transform(_sample(), GeometricTransform(crop=(0, 0, 30)))


def test_batches_depend_only_on_seed_and_step(face_dir, tmp_path):
    m = synthesize_dataset(face_dir, ClassicalGenerator(), tmp_path / "out")
    samples = load_samples(m, require_landmarks=True)
    a = make_batch(samples, 1, 5, 3, 32)
    b = make_batch(samples, 1, 5, 3, 32)
    c = make_batch(samples, 1, 6, 3, 32)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) and a[2] == b[2]
    assert not torch.equal(a[0], c[0])
    assert a[0].shape == (3, 3, 32, 32)


# ---------------------------------------------------------------------------
# training


@pytest.fixture
def dataset(face_dir, tmp_path):
    synthesize_dataset(face_dir, ClassicalGenerator(), tmp_path / "data", seed=0)
    return tmp_path / "data" / "manifest.json"


def _log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_dgformer_training_log_and_schedule(dataset, tmp_path):
    cfg = tiny_train()
    last = train_dgformer(dataset, TINY_DG, cfg, tmp_path / "run", plot=False)
    rows = _log(tmp_path / "run" / "train_log.jsonl")
    assert [r["iter"] for r in rows] == list(range(1, cfg.iterations + 1))
    for r in rows:
        assert abs(r["lr"] - cosine_lr(r["iter"] - 1, cfg.iterations, cfg.lr_init, cfg.lr_final)) < 1e-9
    assert last.name == "ckpt_000006.npz" and (tmp_path / "run" / "ckpt_000003.npz").exists()
    assert ck.load(last).step == 6


@pytest.mark.parametrize("family", ["dgformer", "dmnet"])
def test_resume_matches_uninterrupted_run(family, dataset, tmp_path):
    train = train_dgformer if family == "dgformer" else train_dmnet
    model = TINY_DG if family == "dgformer" else TINY_DM
    cfg = tiny_train()
    train(dataset, model, cfg, tmp_path / "full", plot=True)
    train(dataset, model, tiny_train(iterations=6), tmp_path / "part", plot=False)
    # interrupted: drop everything after step 3 and resume in place
    (tmp_path / "part" / "ckpt_000006.npz").unlink()
    train(dataset, model, cfg, tmp_path / "part", resume=tmp_path / "part" / "ckpt_000003.npz", plot=True)
    full, part = tree_bytes(tmp_path / "full"), tree_bytes(tmp_path / "part")
    assert full == part
    # resuming into a fresh directory reproduces the log prefix too
    train(dataset, model, cfg, tmp_path / "fresh", resume=tmp_path / "full" / "ckpt_000003.npz", plot=False)
    assert (tmp_path / "fresh" / "train_log.jsonl").read_bytes() == full["train_log.jsonl"]


def test_training_rerun_is_byte_identical(dataset, tmp_path):
    for name in ("a", "b"):
        train_dmnet(dataset, TINY_DM, tiny_train(iterations=2, checkpoint_every=1), tmp_path / name)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_resume_refuses_bad_checkpoints(dataset, tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"garbage")
    with pytest.raises(ck.CheckpointError, match="version"):
        train_dgformer(dataset, TINY_DG, tiny_train(), tmp_path / "r", resume=bad, plot=False)
    weights_only = ck.save_model(DGFormer(TINY_DG), "dgformer", tmp_path / "w.npz")
    with pytest.raises(ck.CheckpointError, match="resumable"):
        train_dgformer(dataset, TINY_DG, tiny_train(), tmp_path / "r", resume=weights_only, plot=False)
    last = train_dgformer(dataset, TINY_DG, tiny_train(iterations=3), tmp_path / "ok", plot=False)
    with pytest.raises(ck.CheckpointError, match="config"):
        train_dgformer(dataset, DGFormerConfig.tiny(dict_entries=3), tiny_train(), tmp_path / "r", resume=last, plot=False)


def test_training_needs_landmarks(face_dir, tmp_path):
    src = make_face_dir(tmp_path / "nolm", n=2, landmarks=False)
    synthesize_dataset(src, IDENTITY, tmp_path / "d")
    with pytest.raises(ManifestError):
        train_dgformer(tmp_path / "d" / "manifest.json", TINY_DG, tiny_train(), tmp_path / "r", plot=False)


# ---------------------------------------------------------------------------
# evaluation and restoration


def test_identity_fixture_report(face_dir, tmp_path):
    synthesize_dataset(face_dir, IDENTITY, tmp_path / "d")
    report = evaluate(None, tmp_path / "d" / "manifest.json", tmp_path / "ev", points_dir=face_dir)
    assert report["count"] == 4 == len(report["rows"])
    for r in report["rows"]:
        assert (r["psnr"], r["ssim"], r["lmd"]) == (99.0, 1.0, 0.0)
    assert report["mean"] == {"psnr": 99.0, "ssim": 1.0, "lmd": 0.0}
    assert (tmp_path / "ev" / "report.png").exists()


def test_report_mean_equals_csv_mean(dataset, tmp_path):
    report = evaluate(None, dataset, tmp_path / "ev", save_images=True, plot=False)
    with (tmp_path / "ev" / "report.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["id", "psnr", "ssim", "lmd"]
    assert len(rows) == len(load_manifest(dataset).entries)
    for key in ("psnr", "ssim"):
        assert report["mean"][key] == pytest.approx(sum(float(r[key]) for r in rows) / len(rows), rel=1e-12)
    assert all(r["lmd"] == "" for r in rows) and report["mean"]["lmd"] is None
    assert len(list((tmp_path / "ev" / "images").glob("*.png"))) == len(rows)


def test_lmd_uses_detector_points(face_dir, tmp_path):
    synthesize_dataset(face_dir, IDENTITY, tmp_path / "d")
    shifted = lambda img: [[x + 3.0, y + 4.0] for x, y in json.loads((face_dir / "face00.json").read_text())["points"]]  # noqa: E731
    report = evaluate(None, tmp_path / "d" / "manifest.json", tmp_path / "ev", detector=shifted, plot=False)
    assert report["rows"][0]["lmd"] == 5.0


def test_evaluate_and_restore_with_checkpoint(dataset, face_dir, tmp_path):
    last = train_dgformer(dataset, TINY_DG, tiny_train(iterations=2), tmp_path / "run", plot=False)
    r1 = evaluate(last, dataset, tmp_path / "e1", workers=2, plot=False)
    r2 = evaluate(last, dataset, tmp_path / "e2", workers=1, plot=False)
    assert r1["rows"] == r2["rows"] and r1["family"] == "dgformer"
    deg = tmp_path / "data" / "degraded"
    restore_directory(last, deg, face_dir, tmp_path / "ra")
    restore_directory(last, deg, face_dir, tmp_path / "rb", workers=2)
    assert tree_bytes(tmp_path / "ra") == tree_bytes(tmp_path / "rb")
    assert load_image(tmp_path / "ra" / "face00.png").shape == load_image(deg / "face00.png").shape
    with pytest.raises(ManifestError):
        restore_directory(last, deg, tmp_path / "nowhere", tmp_path / "rc")


def test_evaluate_generator_checkpoint(dataset, tmp_path):
    last = train_dmnet(dataset, TINY_DM, tiny_train(iterations=1), tmp_path / "run", plot=False)
    report = evaluate(last, dataset, tmp_path / "ev", plot=False)
    assert report["family"] == "dmnet" and report["count"] == 4
    assert all(math.isfinite(r["psnr"]) for r in report["rows"])


def test_restorer_needs_landmarks_in_manifest(tmp_path, dataset):
    last = train_dgformer(dataset, TINY_DG, tiny_train(iterations=1), tmp_path / "run", plot=False)
    src = make_face_dir(tmp_path / "nolm", n=2, landmarks=False)
    synthesize_dataset(src, IDENTITY, tmp_path / "d")
    with pytest.raises(ManifestError):
        evaluate(last, tmp_path / "d" / "manifest.json", tmp_path / "ev", plot=False)
