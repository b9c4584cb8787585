import logging
from abc import ABC, abstractmethod
from collections import OrderedDict
from typing import Dict, Iterable, List, Optional, Set, Tuple

import torch
from torch import nn

from .backbone import Backbone
from .checkpoint import CONTROL_PREFIX, Archive, collect, load_into
from .config import ConfigError
from .control import (
    ControlExtractorConfig,
    ControlNetBranchConfig,
    ControlNetConfig,
    CrossNormConfig,
    CrossNormState,
    ZeroConv,
    build_controlnet_branch,
    build_extractor,
    controlnet_forward,
    controlnext_forward,
)
from .diffusion import ShapeMismatchError, Timestep
from .registry import ParamRegistry

logger = logging.getLogger(__name__)


class BaseConditioner(ABC):
    """
    Abstract base class for every way of wiring a control map into the
    backbone. Subclasses own the control-side modules; the backbone starts
    fully frozen and only the names passed to unfreeze_backbone train.
    """

    architecture = "abstract"

    def __init__(self, backbone: Backbone):
        self.backbone = backbone
        self.backbone.requires_grad_(False)

    @abstractmethod
    def control_modules(self) -> Dict[str, nn.Module]:
        """Control-side modules keyed by their checkpoint name prefix."""
        raise NotImplementedError

    @abstractmethod
    def denoise(self, x_t: torch.Tensor, t: Timestep, control: Optional[torch.Tensor]) -> torch.Tensor:
        raise NotImplementedError

    def __call__(self, x_t: torch.Tensor, t: Timestep, control: Optional[torch.Tensor]) -> torch.Tensor:
        return self.denoise(x_t, t, control)

    def unfreeze_backbone(self, names: Iterable[str]) -> None:
        chosen = set(names)
        params = dict(self.backbone.named_parameters())
        unknown = chosen - set(params)
        if unknown:
            raise KeyError(f"Unknown backbone parameters: {sorted(unknown)[:5]}")
        for name, param in params.items():
            param.requires_grad_(name in chosen)
        if chosen:
            logger.info(f"Unfroze {len(chosen)} backbone tensors for {self.architecture}.")

    def modules(self) -> Dict[str, nn.Module]:
        return {"": self.backbone, **self.control_modules()}

    def registry(self) -> ParamRegistry:
        registry = ParamRegistry([])
        for prefix, module in self.modules().items():
            registry = registry.merged(ParamRegistry.from_module(module, prefix=prefix))
        return registry

    def named_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return [
            (f"{prefix}{name}", param)
            for prefix, module in self.modules().items()
            for name, param in module.named_parameters()
        ]

    def trainable_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return [(name, p) for name, p in self.named_parameters() if p.requires_grad]

    def trainable_names(self) -> Set[str]:
        return {name for name, _ in self.trainable_parameters()}

    def state_tensors(self) -> "OrderedDict[str, torch.Tensor]":
        """Every parameter under its checkpoint name, backbone first."""
        return collect(self.modules())

    def load_state(self, archive: Archive) -> None:
        """Restores backbone and control parts; the archive must hold nothing else."""
        prefixes = [prefix for prefix in self.control_modules()]
        foreign = [
            name
            for name in archive.tensors
            if name.startswith(CONTROL_PREFIX) and not any(name.startswith(p) for p in prefixes)
        ]
        if foreign:
            raise ShapeMismatchError(
                f"Checkpoint holds control entries {self.architecture} does not define, e.g. '{foreign[0]}'."
            )
        for prefix, module in self.modules().items():
            load_into(module, archive, prefix=prefix)


class PlainConditioner(BaseConditioner):
    """The bare backbone. Ignores any control map; used for pretraining and as the base row."""

    architecture = "base"

    def control_modules(self) -> Dict[str, nn.Module]:
        return {}

    def denoise(self, x_t: torch.Tensor, t: Timestep, control: Optional[torch.Tensor]) -> torch.Tensor:
        return self.backbone(x_t, t)


class ControlNetConditioner(BaseConditioner):
    """Trainable encoder+mid copy bridged by zero convolutions; the backbone stays frozen."""

    architecture = "controlnet"

    def __init__(self, backbone: Backbone, cfg: ControlNetConfig, seed: int):
        super().__init__(backbone)
        branch_cfg = ControlNetBranchConfig(backbone=backbone.cfg, hint_channels=list(cfg.hint_channels))
        self.branch, _ = build_controlnet_branch(backbone, branch_cfg, seed)

    def control_modules(self) -> Dict[str, nn.Module]:
        return {f"{CONTROL_PREFIX}branch.": self.branch}

    def unfreeze_backbone(self, names: Iterable[str]) -> None:
        if set(names):
            raise ValueError("The ControlNet baseline keeps the backbone fully frozen.")

    def denoise(self, x_t: torch.Tensor, t: Timestep, control: Optional[torch.Tensor]) -> torch.Tensor:
        if control is None:
            return self.backbone(x_t, t)
        return controlnet_forward(self.backbone, self.branch, x_t, t, control)


class ControlNeXtConditioner(BaseConditioner):
    """Lightweight extractor injected at the port through Cross Normalization."""

    architecture = "controlnext"

    def __init__(
        self,
        backbone: Backbone,
        extractor_cfg: ControlExtractorConfig,
        cross_norm_cfg: CrossNormConfig,
        seed: int,
    ):
        super().__init__(backbone)
        cross_norm_cfg.validate()
        port = backbone.port
        if (extractor_cfg.out_channels, extractor_cfg.downsample_to) != (port.channels, port.size):
            raise ValueError(
                f"Extractor output ({extractor_cfg.out_channels} ch, {extractor_cfg.downsample_to}px) "
                f"does not match the injection port ({port.channels} ch, {port.size}px)."
            )
        self.extractor, _ = build_extractor(extractor_cfg, seed)
        self.injection = cross_norm_cfg.injection
        self.cn: nn.Module
        if self.injection == "zero_conv":
            self.cn = ZeroConv(port.channels, port.channels)
        else:
            self.cn = CrossNormState(port.channels, cross_norm_cfg.epsilon, cross_norm_cfg.axes)

    def control_modules(self) -> Dict[str, nn.Module]:
        cn_prefix = "bridge." if self.injection == "zero_conv" else "cross_norm."
        return {
            f"{CONTROL_PREFIX}extractor.": self.extractor,
            f"{CONTROL_PREFIX}{cn_prefix}": self.cn,
        }

    def denoise(self, x_t: torch.Tensor, t: Timestep, control: Optional[torch.Tensor]) -> torch.Tensor:
        if control is None:
            return self.backbone(x_t, t)
        return controlnext_forward(self.backbone, self.extractor, self.cn, x_t, t, control)  # type: ignore[arg-type]


CONDITIONERS = {
    "base": PlainConditioner,
    "controlnet": ControlNetConditioner,
    "controlnext": ControlNeXtConditioner,
}


def get_conditioner(
    architecture: str,
    backbone: Backbone,
    seed: int,
    extractor_cfg: Optional[ControlExtractorConfig] = None,
    cross_norm_cfg: Optional[CrossNormConfig] = None,
    controlnet_cfg: Optional[ControlNetConfig] = None,
) -> BaseConditioner:
    """
    Factory for the conditioning architectures. This is the single entry point
    training, sampling and benchmarking use to wire control into a backbone.
    """
    conditioner_class = CONDITIONERS.get(architecture)
    if conditioner_class is None:
        raise ConfigError(
            f"Unknown architecture '{architecture}', expected one of {sorted(CONDITIONERS)}."
        )
    logger.info(f"Using {architecture} conditioner.")
    if conditioner_class is ControlNetConditioner:
        return ControlNetConditioner(backbone, controlnet_cfg or ControlNetConfig(), seed)
    if conditioner_class is ControlNeXtConditioner:
        if extractor_cfg is None:
            raise ConfigError("The controlnext architecture needs an extractor config.")
        return ControlNeXtConditioner(backbone, extractor_cfg, cross_norm_cfg or CrossNormConfig(), seed)
    return PlainConditioner(backbone)
