import hashlib
import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file
from torch import nn

from .diffusion import ShapeMismatchError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CONTROL_PREFIX = "control."
MANIFEST_KEY = "controllab.manifest"


class ChecksumError(ValueError):
    """The archive manifest does not match its tensor payloads."""


@dataclass
class Archive:
    version: int
    config: Dict[str, Any]
    tensors: "OrderedDict[str, torch.Tensor]"
    checksum: str
    extra: Dict[str, str]


def manifest_checksum(tensors: Mapping[str, torch.Tensor], order: Iterable[str]) -> str:
    """sha256 over (name, shape, little-endian float32 bytes) of every entry, in order."""
    digest = hashlib.sha256()
    for name in order:
        tensor = tensors[name].detach().to("cpu", torch.float32).contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(json.dumps(list(tensor.shape)).encode("utf-8"))
        digest.update(tensor.numpy().astype("<f4", copy=False).tobytes())
    return digest.hexdigest()


def save_archive(
    path: str,
    tensors: Mapping[str, torch.Tensor],
    config: Optional[Dict[str, Any]] = None,
    order: Optional[List[str]] = None,
    extra: Optional[Dict[str, str]] = None,
) -> str:
    """Writes tensors plus a versioned manifest; returns the manifest checksum."""
    order = list(order) if order is not None else list(tensors)
    if set(order) != set(tensors):
        raise ValueError("Archive order must list every tensor exactly once.")
    payload = {
        name: tensors[name].detach().to("cpu", torch.float32).contiguous() for name in order
    }
    checksum = manifest_checksum(payload, order)
    # One sorted JSON value: safetensors does not keep metadata key order.
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "order": order,
        "checksum": checksum,
        "extra": dict(extra or {}),
    }
    metadata = {MANIFEST_KEY: json.dumps(manifest, sort_keys=True)}
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    save_file(payload, path, metadata=metadata)
    logger.info(f"Saved archive with {len(order)} tensors to {path} (checksum {checksum[:12]}).")
    return checksum


def load_archive(path: str) -> Archive:
    """Reads an archive and verifies its version and manifest checksum."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No archive at {path}.")
    try:
        with safe_open(path, framework="pt") as handle:
            metadata = handle.metadata() or {}
            if MANIFEST_KEY not in metadata:
                raise ValueError(f"{path} has no controllab manifest.")
            manifest = json.loads(metadata[MANIFEST_KEY])
            version = int(manifest.get("format_version", -1))
            if version != FORMAT_VERSION:
                raise ValueError(
                    f"Unsupported archive format version {version} in {path}; "
                    f"expected {FORMAT_VERSION}."
                )
            order = manifest["order"]
            tensors = OrderedDict((name, handle.get_tensor(name)) for name in order)
    except SafetensorError as e:
        raise ValueError(f"{path} is not a readable archive: {e}") from e
    checksum = manifest_checksum(tensors, order)
    if checksum != manifest.get("checksum"):
        raise ChecksumError(
            f"Checksum mismatch in {path}: manifest {manifest.get('checksum')}, computed {checksum}."
        )
    return Archive(
        version=version,
        config=manifest.get("config", {}),
        tensors=tensors,
        checksum=checksum,
        extra=manifest.get("extra", {}),
    )


def collect(modules: Mapping[str, nn.Module]) -> "OrderedDict[str, torch.Tensor]":
    """Named parameters of several modules, each under its own name prefix."""
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for prefix, module in modules.items():
        for name, param in module.named_parameters():
            out[f"{prefix}{name}"] = param
    return out


def save_checkpoint(path: str, modules: Mapping[str, nn.Module], config: Dict[str, Any]) -> str:
    return save_archive(path, collect(modules), config=config)


def load_into(module: nn.Module, archive: Archive, prefix: str = "") -> None:
    """Copies archive entries under `prefix` into the module, checking names and shapes."""
    params = dict(module.named_parameters())
    expected = {f"{prefix}{name}" for name in params}
    if prefix:
        present = {name for name in archive.tensors if name.startswith(prefix)}
    else:
        # Unprefixed entries belong to the backbone; control parts are namespaced.
        present = {name for name in archive.tensors if not name.startswith(CONTROL_PREFIX)}
    missing = sorted(expected - set(archive.tensors))
    if missing:
        raise ShapeMismatchError(
            f"Checkpoint is missing {len(missing)} entries for this model, e.g. '{missing[0]}'."
        )
    unexpected = sorted(present - expected)
    if unexpected:
        raise ShapeMismatchError(
            f"Checkpoint has {len(unexpected)} entries the model does not define, e.g. '{unexpected[0]}'."
        )
    for name, param in params.items():
        stored = archive.tensors[f"{prefix}{name}"]
        if tuple(stored.shape) != tuple(param.shape):
            raise ShapeMismatchError(
                f"Checkpoint entry '{prefix}{name}' has shape {tuple(stored.shape)}, "
                f"model expects {tuple(param.shape)}."
            )
    # All shapes are checked before any copy.
    with torch.no_grad():
        for name, param in params.items():
            param.copy_(archive.tensors[f"{prefix}{name}"].to(param.dtype))


def load_checkpoint(path: str, module: nn.Module, prefix: str = "") -> Archive:
    archive = load_archive(path)
    load_into(module, archive, prefix)
    logger.info(f"Restored {len(list(module.parameters()))} parameters from {path}")
    return archive
