"""Versioned checkpoint container for all networks (segmenter, generator, discriminator, encoder)."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import torch

CHECKPOINT_FORMAT_VERSION = 1
ROLES = ("segmenter", "generator", "discriminator", "encoder")


@dataclass
class ModelParams:
    """Named, shaped parameter collection for one network.

    `state` is a plain name -> tensor mapping (a state_dict); `meta` carries
    constructor hyperparameters and a metrics snapshot.
    """

    role: str
    arch_id: str
    state: dict
    version: int = CHECKPOINT_FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}, expected one of {ROLES}")
        for name, tensor in self.state.items():
            if tensor.is_floating_point() and not torch.isfinite(tensor).all():
                raise ValueError(f"non-finite values in tensor {name!r}")


def params_from_module(module: torch.nn.Module, role: str, arch_id: str, meta: dict | None = None) -> ModelParams:
    state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    return ModelParams(role=role, arch_id=arch_id, state=state, meta=dict(meta or {}))


def params_hash(params: ModelParams) -> str:
    """Stable content hash over role, architecture and named tensors."""
    h = hashlib.sha256()
    h.update(f"{params.version}|{params.role}|{params.arch_id}".encode())
    for name in sorted(params.state):
        tensor = params.state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(params: ModelParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": params.version,
            "role": params.role,
            "arch_id": params.arch_id,
            "state": params.state,
            "meta": params.meta,
        },
        path,
    )


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format {blob.get('format_version')} in {path}"
        )
    return ModelParams(
        role=blob["role"],
        arch_id=blob["arch_id"],
        state=blob["state"],
        version=blob["format_version"],
        meta=blob.get("meta", {}),
    )


__all__ = [
    "CHECKPOINT_FORMAT_VERSION",
    "ROLES",
    "ModelParams",
    "params_from_module",
    "params_hash",
    "save_checkpoint",
    "load_checkpoint",
]
