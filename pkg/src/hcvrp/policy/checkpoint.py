"""Versioned checkpoint container for policy weights and training state."""
from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

import torch

from ..errors import ConfigurationError, SchemaError
from .model import ArchConfig, HCVRPPolicy

CHECKPOINT_VERSION = 1


def atomic_save(obj, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(obj, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str | Path) -> dict:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise SchemaError(f"{path}: not a readable checkpoint ({exc})") from None
    if not isinstance(blob, dict) or blob.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version "
                          f"{blob.get('version') if isinstance(blob, dict) else None!r}")
    return blob


def save_policy(path: str | Path, model: HCVRPPolicy, **metadata) -> None:
    atomic_save({
        "version": CHECKPOINT_VERSION,
        "arch": model.cfg.to_dict(),
        "m": model.m,
        "policy": model.state_dict(),
        "metadata": metadata,
    }, path)


def load_policy(path: str | Path, expected_arch: ArchConfig | None = None,
                expected_m: int | None = None) -> tuple[HCVRPPolicy, dict]:
    """Rebuild the policy stored in ``path``; returns (model in eval mode, checkpoint dict)."""
    blob = read_checkpoint(path)
    arch = ArchConfig.from_dict(blob["arch"])
    if expected_arch is not None and arch != expected_arch:
        raise ConfigurationError(f"checkpoint architecture {arch} does not match {expected_arch}")
    if expected_m is not None and blob["m"] != expected_m:
        raise ConfigurationError(
            f"checkpoint was trained for {blob['m']} vehicles, instances have {expected_m}")
    model = HCVRPPolicy(arch, blob["m"])
    model.load_state_dict(blob["policy"])
    return model.eval(), blob


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
