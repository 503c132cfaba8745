"""Checkpoint archive: a zip holding ``manifest.json`` and one ``.npy`` per tensor.

Entries carry a fixed timestamp so identical states give identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .net import ESPNet, ModelConfig

FORMAT = "espvie-checkpoint"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


def _add(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path: str | os.PathLike, model: ESPNet, *, step: int, epoch: int,
                    train_config: dict | None = None, optimizer: torch.optim.Optimizer | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "step": int(step),
        "epoch": int(epoch),
        "model_config": model.cfg.to_dict(),
        "train_config": train_config or {},
        "tensors": sorted(state),
    }
    entries = [(f"tensors/{k}.npy", _npy(v)) for k, v in sorted(state.items())]
    if optimizer is not None:
        osd = optimizer.state_dict()
        manifest["optimizer"] = {"param_groups": osd["param_groups"],
                                 "state": {str(i): sorted(s) for i, s in osd["state"].items()}}
        for i, s in sorted(osd["state"].items()):
            for key, val in sorted(s.items()):
                entries.append((f"optimizer/{i}/{key}.npy", _npy(torch.as_tensor(val))))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _add(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8"))
        for name, data in entries:
            _add(zf, name, data)
    os.replace(tmp, path)
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an {FORMAT} archive")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} has checkpoint version {manifest.get('version')}, "
                              f"this build reads version {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path: str | os.PathLike, model: ESPNet | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> tuple[ESPNet, dict]:
    """Restore a model (built from the stored config unless given) and, optionally, optimizer state."""
    manifest = read_manifest(path)
    cfg = ModelConfig(**manifest["model_config"])
    if model is None:
        model = ESPNet(cfg)
    elif model.cfg.to_dict() != cfg.to_dict():
        raise CheckpointError(f"{path}: model config differs from the checkpoint's")
    with zipfile.ZipFile(path) as zf:
        state = {k: torch.from_numpy(np.load(io.BytesIO(zf.read(f"tensors/{k}.npy"))))
                 for k in manifest["tensors"]}
        model.load_state_dict(state)
        if optimizer is not None:
            if "optimizer" not in manifest:
                raise CheckpointError(f"{path} holds no optimizer state")
            meta = manifest["optimizer"]
            ostate = {}
            for i, keys in meta["state"].items():
                ostate[int(i)] = {k: torch.from_numpy(np.load(io.BytesIO(zf.read(f"optimizer/{i}/{k}.npy"))))
                                  for k in keys}
            optimizer.load_state_dict({"state": ostate, "param_groups": meta["param_groups"]})
    return model, manifest


def cache_dir() -> Path | None:
    """``$ESP_CACHE_DIR`` if set; holds text-encoder weights and a ``checkpoints/`` folder."""
    env = os.environ.get("ESP_CACHE_DIR")
    return Path(env).expanduser() if env else None


def resolve_checkpoint(name: str | os.PathLike) -> Path:
    """A path as given if it exists, else ``$ESP_CACHE_DIR/checkpoints/<name>``."""
    p = Path(name)
    if p.exists():
        return p
    root = cache_dir()
    if root is not None and (root / "checkpoints" / p).exists():
        return root / "checkpoints" / p
    raise FileNotFoundError(f"checkpoint {name} not found"
                            + ("" if root is None else f" (also looked in {root / 'checkpoints'})"))
