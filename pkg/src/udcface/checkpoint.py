"""Versioned checkpoint container.

A checkpoint is a zip archive (readable with ``numpy.load``) holding one
``.npy`` member per array plus ``__meta__.json``. Array members are keyed by
canonical parameter paths, i.e. ``state_dict`` names with ``.`` replaced by
``/`` and a section prefix (``model/``, ``disc/``, ``optim/<name>/``).
Archives are written with fixed timestamps so identical states give
byte-identical files. See docs/checkpoint.md.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT = "udcface-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def to_path(name: str) -> str:
    return name.replace(".", "/")


def from_path(path: str) -> str:
    return path.replace("/", ".")


@dataclass
class Checkpoint:
    family: str
    config: dict
    arrays: dict = field(default_factory=dict)
    step: int = 0
    extra: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict:
        p = prefix.rstrip("/") + "/"
        return {k[len(p) :]: v for k, v in self.arrays.items() if k.startswith(p)}


def module_arrays(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}/{to_path(k)}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict) -> None:
    expected = module.state_dict()
    state = {}
    for name, ref in expected.items():
        key = to_path(name)
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"parameter {key!r} has shape {arr.shape}, model expects {tuple(ref.shape)}")
        state[name] = torch.from_numpy(np.array(arr, copy=True))
    extra = set(arrays) - {to_path(n) for n in expected}
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameters: {sorted(extra)[:5]}")
    module.load_state_dict(state)


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict, dict]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{prefix}/{idx}/{key}"] = torch.as_tensor(val).cpu().numpy()
    return arrays, {"param_groups": sd["param_groups"]}


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: dict, meta: dict) -> None:
    state: dict = {}
    for key, arr in arrays.items():
        idx, name = key.split("/", 1)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(arr, copy=True))
    # JSON turns tuples (Adam betas) into lists
    groups = [
        {k: (tuple(v) if isinstance(v, list) and k != "params" else v) for k, v in g.items()} for g in meta["param_groups"]
    ]
    opt.load_state_dict({"state": state, "param_groups": groups})


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "family": ckpt.family,
        "config": ckpt.config,
        "step": ckpt.step,
        "extra": ckpt.extra,
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in sorted(ckpt.arrays.items())},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("__meta__.json", _EPOCH), json.dumps(meta, indent=1, sort_keys=True))
        for key in sorted(ckpt.arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(ckpt.arrays[key], order="C"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", _EPOCH), buf.getvalue())
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("__meta__.json"))
            if meta.get("format") != FORMAT:
                raise CheckpointError(f"{path}: not a {FORMAT} file")
            if meta.get("version") != VERSION:
                raise CheckpointError(
                    f"{path}: checkpoint version {meta.get('version')} is not supported (expected {VERSION})"
                )
            arrays = {}
            for key, info in meta["arrays"].items():
                arr = np.lib.format.read_array(io.BytesIO(zf.read(key + ".npy")), allow_pickle=False)
                if list(arr.shape) != info["shape"]:
                    raise CheckpointError(f"{path}: array {key!r} shape disagrees with its tag")
                arrays[key] = arr
    except CheckpointError:
        raise
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc}); expected {FORMAT} version {VERSION}") from exc
    return Checkpoint(meta["family"], meta["config"], arrays, int(meta.get("step", 0)), meta.get("extra", {}))


def build_model(ckpt: Checkpoint):
    """Instantiate the generator/restorer stored in ``ckpt`` with its weights."""
    from .dgformer import DGFormer, DGFormerConfig
    from .dmnet import DMNet, DMNetConfig

    if ckpt.family == "dmnet":
        model = DMNet(DMNetConfig.from_dict(ckpt.config))
    elif ckpt.family == "dgformer":
        model = DGFormer(DGFormerConfig.from_dict(ckpt.config))
    else:
        raise CheckpointError(f"unknown model family {ckpt.family!r}")
    load_module_arrays(model, ckpt.section("model"))
    model.eval()
    return model


def save_model(model, family: str, path, step: int = 0) -> Path:
    return save(Checkpoint(family, model.config.to_dict(), module_arrays(model, "model"), step), path)
