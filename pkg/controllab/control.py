import copy
import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, BackboneConfig, ResBlock, initialize_, timestep_embedding
from .diffusion import ShapeMismatchError, Timestep
from .registry import ParamRegistry

logger = logging.getLogger(__name__)

CROSS_NORM_AXES = ("channel", "sample")
INJECTIONS = ("cross_norm", "zero_conv")


@dataclass
class CrossNormConfig:
    epsilon: float = 1e-5
    axes: str = "channel"
    injection: str = "cross_norm"

    def validate(self) -> None:
        if self.epsilon < 0:
            raise ValueError(f"cross_norm epsilon must be non-negative, got {self.epsilon}.")
        if self.axes not in CROSS_NORM_AXES:
            raise ValueError(f"Unknown statistics axes '{self.axes}', expected one of {CROSS_NORM_AXES}.")
        if self.injection not in INJECTIONS:
            raise ValueError(f"Unknown injection '{self.injection}', expected one of {INJECTIONS}.")


@dataclass
class ControlNetConfig:
    hint_channels: List[int] = field(default_factory=lambda: [16, 16])


class ZeroConv(nn.Conv2d):
    """1x1 convolution whose weight and bias start at exactly zero."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(in_channels, out_channels, kernel_size=1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


def zero_conv_forward(z: ZeroConv, x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] != z.in_channels:
        raise ShapeMismatchError(
            f"Zero convolution expects {z.in_channels} input channels, got {x.shape[1]}."
        )
    return z(x)


class CrossNormState(nn.Module):
    """
    Learnable per-channel scale for Cross Normalization. `axes` selects the
    statistics: per sample and channel over space ("channel") or per sample
    over channels and space ("sample").
    """

    def __init__(self, channels: int, epsilon: float = 1e-5, axes: str = "channel"):
        super().__init__()
        if epsilon < 0:
            raise ValueError(f"Cross Normalization epsilon must be non-negative, got {epsilon}.")
        if axes not in CROSS_NORM_AXES:
            raise ValueError(f"Unknown statistics axes '{axes}', expected one of {CROSS_NORM_AXES}.")
        self.gamma = nn.Parameter(torch.ones(channels))
        self.epsilon = epsilon
        self.axes = axes


def cross_normalize(x_c: torch.Tensor, x_m: torch.Tensor, state: CrossNormState) -> torch.Tensor:
    """
    Normalizes control features with the mean and (biased) variance of the
    main-branch features, then scales by gamma. x_m is only read.
    """
    if x_c.shape[1] != x_m.shape[1]:
        raise ShapeMismatchError(
            f"Cross Normalization needs matching channels: control has {x_c.shape[1]}, "
            f"main branch has {x_m.shape[1]}."
        )
    if x_c.shape[1] != state.gamma.shape[0]:
        raise ShapeMismatchError(
            f"gamma has {state.gamma.shape[0]} channels, features have {x_c.shape[1]}."
        )
    dims: Tuple[int, ...] = (2, 3) if state.axes == "channel" else (1, 2, 3)
    # Statistics and the normalized map are computed in float64, then cast back.
    main = x_m.to(torch.float64)
    mean = main.mean(dim=dims, keepdim=True)
    var = main.var(dim=dims, unbiased=False, keepdim=True)
    denom = torch.sqrt(var + state.epsilon)
    if not (torch.isfinite(mean).all() and (denom > 0).all() and torch.isfinite(denom).all()):
        raise ValueError("Main-branch statistics are not finite; cannot cross-normalize.")
    gamma = state.gamma.to(torch.float64).view(1, -1, 1, 1)
    return (gamma * (x_c.to(torch.float64) - mean) / denom).to(x_c.dtype)


@dataclass
class ControlExtractorConfig:
    in_channels: int = 1
    num_blocks: int = 1
    channels_per_stage: List[int] = field(default_factory=lambda: [16, 32, 32])
    downsample_to: int = 16
    out_channels: int = 128
    input_size: int = 64

    @property
    def halvings(self) -> int:
        return len(self.channels_per_stage) - 1

    def validate(self) -> None:
        for key in ("in_channels", "num_blocks", "downsample_to", "out_channels", "input_size"):
            if getattr(self, key) < 1:
                raise ValueError(f"Extractor '{key}' must be positive, got {getattr(self, key)}.")
        if not self.channels_per_stage or any(c < 1 for c in self.channels_per_stage):
            raise ValueError(
                f"channels_per_stage must list positive integers, got {self.channels_per_stage}."
            )
        ratio = self.input_size / self.downsample_to
        needed = math.log2(ratio) if ratio >= 1 else -1.0
        if needed != int(needed) or int(needed) != self.halvings:
            raise ValueError(
                f"Extractor cannot reach {self.downsample_to}x{self.downsample_to} from "
                f"{self.input_size}x{self.input_size} with {self.halvings} halvings "
                f"({len(self.channels_per_stage)} stages)."
            )


class ExtractorStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, num_blocks: int, downsample: bool):
        super().__init__()
        self.blocks = nn.ModuleList(
            ResBlock(in_channels if i == 0 else out_channels, out_channels, None)
            for i in range(num_blocks)
        )
        self.downsample = (
            nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1) if downsample else None
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            h = block(h)
        return self.downsample(h) if self.downsample is not None else h


class ControlExtractor(nn.Module):
    """Lightweight ResNet-block network mapping a control map to port features."""

    def __init__(self, cfg: ControlExtractorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = cfg.channels_per_stage
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.stages = nn.ModuleList(
            ExtractorStage(
                chans[i - 1] if i else chans[0], chans[i], cfg.num_blocks, downsample=i < cfg.halvings
            )
            for i in range(len(chans))
        )
        self.proj_out = nn.Conv2d(chans[-1], cfg.out_channels, 1)

    def forward(self, control: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size)
        if control.ndim != 4 or tuple(control.shape[1:]) != expected:
            raise ShapeMismatchError(
                f"Extractor expects control of shape (b, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(control.shape)}."
            )
        h = self.conv_in(control)
        for stage in self.stages:
            h = stage(h)
        return self.proj_out(h)


def build_extractor(cfg: ControlExtractorConfig, seed: int) -> Tuple[ControlExtractor, ParamRegistry]:
    extractor = ControlExtractor(cfg)
    initialize_(extractor, torch.Generator().manual_seed(seed))
    registry = ParamRegistry.from_module(extractor, prefix="control.extractor.")
    logger.info(f"Built control extractor with {registry.total():,} parameters.")
    return extractor, registry


@dataclass
class ControlNetBranchConfig:
    backbone: BackboneConfig
    hint_channels: List[int] = field(default_factory=lambda: [16, 16])
    control_channels: int = 1

    @property
    def bridges(self) -> List[str]:
        return [f"down.{i}" for i in range(self.backbone.levels)] + ["mid"]


class ControlNetBranch(nn.Module):
    """
    Trainable copy of the backbone encoder and mid block. A small hint encoder
    maps the control to input space, and every bridge is a ZeroConv whose
    output is added to the matching backbone feature.
    """

    def __init__(self, backbone: Backbone, cfg: ControlNetBranchConfig):
        super().__init__()
        self.cfg = cfg
        layers: List[nn.Module] = []
        prev = cfg.control_channels
        for ch in cfg.hint_channels:
            layers += [nn.Conv2d(prev, ch, 3, padding=1), nn.SiLU()]
            prev = ch
        layers.append(nn.Conv2d(prev, backbone.cfg.in_channels, 3, padding=1))
        self.hint = nn.Sequential(*layers)

        self.time_embed = copy.deepcopy(backbone.time_embed)
        self.conv_in = copy.deepcopy(backbone.conv_in)
        self.down = copy.deepcopy(backbone.down)
        self.mid = copy.deepcopy(backbone.mid)
        self.bridges = nn.ModuleList(
            ZeroConv(ch, ch) for ch in backbone.cfg.level_channels
        )
        self.mid_bridge = ZeroConv(backbone.cfg.mid_channels, backbone.cfg.mid_channels)
        self.time_embed_dim = backbone.cfg.time_embed_dim
        for module in (self.time_embed, self.conv_in, self.down, self.mid):
            module.requires_grad_(True)

    def forward(
        self, x_t: torch.Tensor, t: Timestep, control: torch.Tensor
    ) -> Tuple[List[torch.Tensor], torch.Tensor]:
        """Returns the bridged residuals for every encoder level and the mid block."""
        batch = x_t.shape[0]
        if isinstance(t, torch.Tensor):
            t_vec = t.reshape(-1).expand(batch) if t.numel() == 1 else t
        else:
            t_vec = torch.full((batch,), int(t), device=x_t.device)
        dtype = self.time_embed[0].weight.dtype
        temb = self.time_embed(timestep_embedding(t_vec.to(x_t.device), self.time_embed_dim, dtype=dtype))

        hint = self.hint(control)
        if hint.shape != x_t.shape:
            raise ShapeMismatchError(
                f"Bridge 'hint' produced {tuple(hint.shape)} but x_t is {tuple(x_t.shape)}."
            )
        h = self.conv_in(x_t + hint)
        residuals = []
        for level, bridge in zip(self.down, self.bridges):
            for block in level.blocks:
                h = block(h, temb)
            residuals.append(zero_conv_forward(bridge, h))
            if level.downsample is not None:
                h = level.downsample(h)
        h = self.mid(h, temb)
        return residuals, zero_conv_forward(self.mid_bridge, h)


def build_controlnet_branch(
    backbone: Backbone, cfg: ControlNetBranchConfig, seed: int
) -> Tuple[ControlNetBranch, ParamRegistry]:
    branch = ControlNetBranch(backbone, cfg)
    generator = torch.Generator().manual_seed(seed)
    initialize_(branch.hint, generator)
    registry = ParamRegistry.from_module(branch, prefix="control.branch.")
    logger.info(
        f"Built ControlNet branch with {registry.total():,} parameters and "
        f"{len(cfg.bridges)} zero-convolution bridges."
    )
    return branch, registry


def controlnet_forward(
    backbone: Backbone,
    branch: ControlNetBranch,
    x_t: torch.Tensor,
    t: Timestep,
    control: torch.Tensor,
) -> torch.Tensor:
    state = backbone.encode(x_t, t)
    residuals, mid_residual = branch(x_t, t, control)
    skips = []
    for name, skip, residual in zip(branch.cfg.bridges, state.skips, residuals):
        if skip.shape != residual.shape:
            raise ShapeMismatchError(
                f"Bridge '{name}' produced {tuple(residual.shape)}, backbone feature is {tuple(skip.shape)}."
            )
        skips.append(skip + residual)
    h = backbone.middle(state.h, state.temb)
    if h.shape != mid_residual.shape:
        raise ShapeMismatchError(
            f"Bridge 'mid' produced {tuple(mid_residual.shape)}, backbone feature is {tuple(h.shape)}."
        )
    return backbone.decode(h + mid_residual, skips, state.temb)


def controlnext_forward(
    backbone: Backbone,
    extractor: ControlExtractor,
    cn: Union[CrossNormState, ZeroConv],
    x_t: torch.Tensor,
    t: Timestep,
    control: torch.Tensor,
) -> torch.Tensor:
    """
    Extracts control features, normalizes them against the port features of
    the same pass and adds them at the port. The port features come from the
    same encoder evaluation read_mid_features performs, so one pass suffices.
    `cn` may be a ZeroConv to run the zero-initialized bridge ablation.
    """
    x_c = extractor(control)
    state = backbone.encode(x_t, t)
    backbone.port.check(x_c, x_t.shape[0])
    if isinstance(cn, ZeroConv):
        injected = zero_conv_forward(cn, x_c)
    else:
        injected = cross_normalize(x_c, state.h, cn)
    h = backbone.middle(state.h + injected, state.temb)
    return backbone.decode(h, state.skips, state.temb)
