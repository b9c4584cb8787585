import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import ShapeMismatchError, Timestep
from .registry import ParamRegistry

logger = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    in_channels: int = 1
    base_channels: int = 32
    channel_multipliers: List[int] = field(default_factory=lambda: [1, 2, 4])
    mid_channels: int = 128
    num_res_blocks_per_level: int = 1
    time_embed_dim: int = 128
    image_size: int = 64

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def level_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def port_size(self) -> int:
        return self.image_size // 2 ** (self.levels - 1)

    def validate(self) -> None:
        counts = {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "mid_channels": self.mid_channels,
            "num_res_blocks_per_level": self.num_res_blocks_per_level,
            "time_embed_dim": self.time_embed_dim,
            "image_size": self.image_size,
        }
        for key, value in counts.items():
            if value < 1:
                raise ValueError(f"Backbone '{key}' must be positive, got {value}.")
        if not self.channel_multipliers or any(m < 1 for m in self.channel_multipliers):
            raise ValueError(
                f"channel_multipliers must be a non-empty list of positive integers, "
                f"got {self.channel_multipliers}."
            )
        if self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}.")
        if self.image_size % 2 ** (self.levels - 1):
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2^{self.levels - 1} "
                f"required by {self.levels} resolution levels."
            )


@dataclass(frozen=True)
class InjectionPort:
    """The single site where control features are added: the mid-block input."""

    site: str
    channels: int
    size: int

    def check(self, injected: torch.Tensor, batch: int) -> None:
        expected = (batch, self.channels, self.size, self.size)
        if tuple(injected.shape) != expected:
            raise ShapeMismatchError(
                f"Injection at '{self.site}' expects shape {expected}, "
                f"got {tuple(injected.shape)}."
            )


@dataclass
class EncoderState:
    h: torch.Tensor
    skips: List[torch.Tensor]
    temb: torch.Tensor


def group_count(channels: int, max_groups: int = 8) -> int:
    """Largest divisor up to max_groups that keeps at least two channels per group."""
    for groups in range(min(max_groups, channels // 2), 0, -1):
        if channels % groups == 0:
            return groups
    return 1


def timestep_embedding(
    t: torch.Tensor, dim: int, max_period: float = 10000.0, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps, shape (b, dim), in `dtype`."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype, device=t.device) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    """GroupNorm/SiLU/conv residual block with an optional timestep projection."""

    def __init__(self, in_channels: int, out_channels: int, time_embed_dim: Optional[int]):
        super().__init__()
        self.norm1 = nn.GroupNorm(group_count(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_embed_dim, out_channels) if time_embed_dim else None
        self.norm2 = nn.GroupNorm(group_count(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1)
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class DownLevel(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, num_blocks: int, temb: int, downsample: bool):
        super().__init__()
        self.blocks = nn.ModuleList(
            ResBlock(in_channels if i == 0 else out_channels, out_channels, temb)
            for i in range(num_blocks)
        )
        self.downsample = (
            nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1) if downsample else None
        )


class UpLevel(nn.Module):
    def __init__(
        self, in_channels: int, skip_channels: int, out_channels: int, num_blocks: int, temb: int, upsample: bool
    ):
        super().__init__()
        self.blocks = nn.ModuleList(
            ResBlock(in_channels + skip_channels if i == 0 else out_channels, out_channels, temb)
            for i in range(num_blocks)
        )
        self.upsample = nn.Conv2d(out_channels, out_channels, 3, padding=1) if upsample else None


class MidBlock(nn.Module):
    def __init__(self, in_channels: int, mid_channels: int, temb: int):
        super().__init__()
        self.proj_in = nn.Conv2d(in_channels, mid_channels, 1)
        self.block1 = ResBlock(mid_channels, mid_channels, temb)
        self.block2 = ResBlock(mid_channels, mid_channels, temb)

    def forward(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.proj_in(h)
        h = self.block1(h, temb)
        return self.block2(h, temb)


class Backbone(nn.Module):
    """
    Encoder / mid / decoder denoising UNet. The forward is split into encode,
    middle and decode so callers can read and modify the features at the
    injection port within a single pass.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = cfg.level_channels
        temb = cfg.time_embed_dim

        self.time_embed = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.down.append(
                DownLevel(prev, ch, cfg.num_res_blocks_per_level, temb, downsample=i < cfg.levels - 1)
            )
            prev = ch
        self.mid = MidBlock(chans[-1], cfg.mid_channels, temb)

        # up[i] mirrors down[i]; evaluated from the deepest level outwards.
        ups = []
        prev = cfg.mid_channels
        for i in reversed(range(cfg.levels)):
            ups.append(
                UpLevel(prev, chans[i], chans[i], cfg.num_res_blocks_per_level, temb, upsample=i > 0)
            )
            prev = chans[i]
        self.up = nn.ModuleList(reversed(ups))
        self.norm_out = nn.GroupNorm(group_count(chans[0]), chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.in_channels, 3, padding=1)

        self.port = InjectionPort(site="mid.proj_in", channels=chans[-1], size=cfg.port_size)

    def _check_input(self, x_t: torch.Tensor) -> None:
        expected = (self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size)
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != expected:
            raise ShapeMismatchError(
                f"Backbone expects input of shape (b, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(x_t.shape)}."
            )

    def embed_time(self, t: Timestep, batch: int, device: torch.device) -> torch.Tensor:
        if isinstance(t, torch.Tensor):
            t_vec = t.to(device).reshape(-1).expand(batch) if t.numel() == 1 else t.to(device)
        else:
            t_vec = torch.full((batch,), int(t), device=device)
        dtype = self.time_embed[0].weight.dtype
        return self.time_embed(timestep_embedding(t_vec, self.cfg.time_embed_dim, dtype=dtype))

    def encode(self, x_t: torch.Tensor, t: Timestep) -> EncoderState:
        self._check_input(x_t)
        temb = self.embed_time(t, x_t.shape[0], x_t.device)
        h = self.conv_in(x_t)
        skips = []
        for level in self.down:
            for block in level.blocks:
                h = block(h, temb)
            skips.append(h)
            if level.downsample is not None:
                h = level.downsample(h)
        return EncoderState(h=h, skips=skips, temb=temb)

    def middle(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        return self.mid(h, temb)

    def decode(self, h: torch.Tensor, skips: List[torch.Tensor], temb: torch.Tensor) -> torch.Tensor:
        for i in reversed(range(self.cfg.levels)):
            level = self.up[i]
            h = torch.cat([h, skips[i]], dim=1)
            for block in level.blocks:
                h = block(h, temb)
            if level.upsample is not None:
                h = level.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))

    def forward(
        self, x_t: torch.Tensor, t: Timestep, injected: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        state = self.encode(x_t, t)
        h = state.h
        if injected is not None:
            self.port.check(injected, x_t.shape[0])
            h = h + injected
        return self.decode(self.middle(h, state.temb), state.skips, state.temb)

    def read_mid_features(self, x_t: torch.Tensor, t: Timestep) -> torch.Tensor:
        """Features arriving at the injection port, before any injection."""
        return self.encode(x_t, t).h


def initialize_(module: nn.Module, generator: torch.Generator) -> None:
    """
    Fan-in scaled normal weights, unit normalization scales, zero biases.
    Draws happen in registry order so a seed fully determines the values.
    """
    with torch.no_grad():
        for name, param in module.named_parameters():
            if param.ndim >= 2:
                fan_in = math.prod(param.shape[1:])
                param.copy_(torch.randn(param.shape, generator=generator) / math.sqrt(fan_in))
            elif name.endswith("bias"):
                param.zero_()
            else:
                param.fill_(1.0)


def build_backbone(cfg: BackboneConfig, seed: int) -> Tuple[Backbone, ParamRegistry, InjectionPort]:
    model = Backbone(cfg)
    initialize_(model, torch.Generator().manual_seed(seed))
    model.eval()
    registry = ParamRegistry.from_module(model)
    logger.info(
        f"Built backbone with {registry.total():,} parameters across {len(registry)} tensors; "
        f"port {model.port.channels}x{model.port.size}x{model.port.size}."
    )
    return model, registry, model.port
