import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Tuple

import torch
from torch import nn

from .checkpoint import load_archive, save_archive
from .diffusion import ShapeMismatchError
from .registry import ParamRegistry

logger = logging.getLogger(__name__)

LORA_PREFIX = "lora."


@dataclass
class LoraAdapter:
    """
    Low-rank update per target parameter: delta W = (alpha / rank) * B @ A,
    with A of shape (rank, k) and B of shape (d, rank). Convolution kernels
    are viewed as (out, in * kh * kw) matrices.
    """

    rank: int
    alpha: float
    factors: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def targets(self) -> List[str]:
        return list(self.factors)

    def validate(self) -> None:
        if self.rank < 1:
            raise ValueError(f"LoRA rank must be at least 1, got {self.rank}.")
        for name, (a, b) in self.factors.items():
            if a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise ShapeMismatchError(
                    f"LoRA factors for '{name}' do not have rank {self.rank}: "
                    f"A {tuple(a.shape)}, B {tuple(b.shape)}."
                )


def matrix_shape(shape: Tuple[int, ...]) -> Tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        return shape[0], shape[1] * shape[2] * shape[3]
    raise ShapeMismatchError(
        f"LoRA targets must be 2-axis weights or 4-axis convolution kernels, got shape {shape}."
    )


def lora_delta(adapter: LoraAdapter, name: str, shape: Tuple[int, ...]) -> torch.Tensor:
    a, b = adapter.factors[name]
    d, k = matrix_shape(shape)
    if tuple(a.shape) != (adapter.rank, k) or tuple(b.shape) != (d, adapter.rank):
        raise ShapeMismatchError(
            f"LoRA factors for '{name}' expect a ({d}, {k}) weight; "
            f"got A {tuple(a.shape)} and B {tuple(b.shape)}."
        )
    return (adapter.scale * (b @ a)).reshape(shape)


class LoraHandle:
    """Keeps the original weights of an attached adapter until detach()."""

    def __init__(self, params: Dict[str, nn.Parameter], originals: Dict[str, torch.Tensor]):
        self.params = params
        self.originals = originals
        self.attached = True

    def detach(self) -> None:
        if not self.attached:
            return
        with torch.no_grad():
            for name, param in self.params.items():
                param.copy_(self.originals[name])
        self.attached = False
        logger.info(f"Detached LoRA adapter from {len(self.params)} parameters.")

    def __enter__(self) -> "LoraHandle":
        return self

    def __exit__(self, *exc: object) -> None:
        self.detach()


def lora_attach(
    adapter: LoraAdapter, registry: ParamRegistry, params: Mapping[str, nn.Parameter]
) -> LoraHandle:
    """Adds the low-rank update to every target in place and returns a restore handle."""
    adapter.validate()
    missing = [name for name in adapter.targets if name not in registry or name not in params]
    if missing:
        raise KeyError(f"LoRA targets not found in the model: {missing[:5]}")
    deltas = {
        name: lora_delta(adapter, name, tuple(params[name].shape)) for name in adapter.targets
    }
    originals: Dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, delta in deltas.items():
            originals[name] = params[name].detach().clone()
            params[name].add_(delta.to(params[name].dtype))
    logger.info(
        f"Attached LoRA adapter (rank {adapter.rank}, alpha {adapter.alpha}) to {len(deltas)} parameters."
    )
    return LoraHandle({name: params[name] for name in deltas}, originals)


def _check_targets(targets: Iterable[str], registry: ParamRegistry) -> List[str]:
    targets = list(targets)
    unknown = [name for name in targets if name not in registry]
    if unknown:
        raise KeyError(f"LoRA targets not in registry: {unknown[:5]}")
    return targets


def _down_factor(shape: Tuple[int, ...], rank: int, generator: torch.Generator) -> torch.Tensor:
    _, k = matrix_shape(shape)
    bound = 1.0 / math.sqrt(k)
    return (torch.rand((rank, k), generator=generator) * 2.0 - 1.0) * bound


def zero_adapter(
    targets: Iterable[str], registry: ParamRegistry, rank: int, alpha: float, seed: int = 0
) -> LoraAdapter:
    """Adapter with B = 0, an exact no-op at attach time."""
    generator = torch.Generator().manual_seed(seed)
    factors = {}
    for name in _check_targets(targets, registry):
        shape = registry[name].shape
        d, _ = matrix_shape(shape)
        factors[name] = (_down_factor(shape, rank, generator), torch.zeros(d, rank))
    return LoraAdapter(rank=rank, alpha=alpha, factors=factors)


def random_adapter(
    targets: Iterable[str],
    registry: ParamRegistry,
    rank: int,
    alpha: float,
    seed: int,
    init_scale: float = 0.1,
) -> LoraAdapter:
    """Nonzero adapter standing in for a trained style LoRA."""
    generator = torch.Generator().manual_seed(seed)
    factors = {}
    for name in _check_targets(targets, registry):
        shape = registry[name].shape
        d, _ = matrix_shape(shape)
        up = torch.randn((d, rank), generator=generator) * init_scale
        factors[name] = (_down_factor(shape, rank, generator), up)
    return LoraAdapter(rank=rank, alpha=alpha, factors=factors)


def save_adapter(path: str, adapter: LoraAdapter) -> str:
    adapter.validate()
    tensors: Dict[str, torch.Tensor] = {}
    for name, (a, b) in adapter.factors.items():
        tensors[f"{LORA_PREFIX}{name}.A"] = a
        tensors[f"{LORA_PREFIX}{name}.B"] = b
    config = {"rank": adapter.rank, "alpha": adapter.alpha, "targets": adapter.targets}
    return save_archive(path, tensors, config=config)


def load_adapter(path: str) -> LoraAdapter:
    archive = load_archive(path)
    try:
        rank, alpha, targets = (
            int(archive.config["rank"]),
            float(archive.config["alpha"]),
            archive.config["targets"],
        )
        factors = {
            name: (
                archive.tensors[f"{LORA_PREFIX}{name}.A"],
                archive.tensors[f"{LORA_PREFIX}{name}.B"],
            )
            for name in targets
        }
    except KeyError as e:
        raise ValueError(f"{path} is not a LoRA adapter archive: missing {e}") from e
    adapter = LoraAdapter(rank=rank, alpha=alpha, factors=factors)
    adapter.validate()
    return adapter
