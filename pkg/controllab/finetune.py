import logging
import math
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from typing import TYPE_CHECKING, Callable, Dict, Iterable, List, Optional, Set

import numpy as np
import pandas as pd
import torch
from tqdm import trange

from .diffusion import (
    NoiseSchedule,
    PredictionKind,
    ancestral_sample,
    diffusion_loss,
    respace,
)
from .registry import ParamRegistry

if TYPE_CHECKING:
    from .conditioners import BaseConditioner

logger = logging.getLogger(__name__)

ARCHITECTURES = ("base", "controlnet", "controlnext")
TRACE_COLUMNS = ["step", "loss", "adherence"]

SELECTOR_PRESETS: Dict[str, List[str]] = {
    "minimal": ["*norm*"],
    "default": ["*norm*", "mid.proj_in.*", "mid.*.time_proj.*"],
    "full": ["*"],
}


class TrainingDivergedError(ValueError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"Training diverged at step {step}: loss is {loss}.")
        self.step = step
        self.loss = loss


@dataclass
class ParamSelector:
    patterns: List[str] = field(default_factory=list)
    mode: str = "include"

    @classmethod
    def preset(cls, name: str) -> "ParamSelector":
        if name not in SELECTOR_PRESETS:
            raise ValueError(f"Unknown selector preset '{name}', expected one of {sorted(SELECTOR_PRESETS)}.")
        return cls(list(SELECTOR_PRESETS[name]))


def resolve_selector(sel: ParamSelector, reg: ParamRegistry) -> Set[str]:
    """Registry names matched by any pattern. Unmatched patterns only warn."""
    if sel.mode != "include":
        raise ValueError(f"Unsupported selector mode '{sel.mode}'.")
    chosen: Set[str] = set()
    names = reg.names()
    for pattern in sel.patterns:
        matched = {name for name in names if fnmatchcase(name, pattern)}
        if not matched:
            logger.warning(f"Selector pattern '{pattern}' matches no parameters.")
        chosen |= matched
    return chosen


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 0.05
    seed: int = 0
    prediction_kind: str = "eps"
    architecture: str = "controlnext"
    selector: List[str] = field(default_factory=lambda: list(SELECTOR_PRESETS["default"]))
    eval_every: int = 100
    adherence_threshold: float = 0.6
    optimizer: str = "sgd"
    eval_count: int = 32
    eval_seed: int = 1234
    sample_steps: int = 20
    progress: bool = False

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}.")
        for key in ("batch_size", "eval_every", "eval_count", "sample_steps"):
            if getattr(self, key) < 1:
                raise ValueError(f"'{key}' must be positive, got {getattr(self, key)}.")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}.")
        if not 0.0 < self.adherence_threshold < 1.0:
            raise ValueError(
                f"adherence_threshold must lie in (0, 1), got {self.adherence_threshold}."
            )
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"Unknown architecture '{self.architecture}', expected one of {ARCHITECTURES}.")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"Unknown optimizer '{self.optimizer}', expected one of {sorted(OPTIMIZERS)}.")
        PredictionKind(self.prediction_kind)


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    adherence: float


@dataclass
class ConvergenceTrace:
    threshold: float
    records: List[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(
                f"Trace records must be sorted by step: {record.step} after {self.records[-1].step}."
            )
        self.records.append(record)

    @property
    def steps(self) -> List[int]:
        return [r.step for r in self.records]

    @property
    def steps_to_threshold(self) -> Optional[int]:
        """First eval step whose adherence reaches the threshold; None means never."""
        for record in self.records:
            if not math.isnan(record.adherence) and record.adherence >= self.threshold:
                return record.step
        return None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.step, r.loss, r.adherence) for r in self.records], columns=TRACE_COLUMNS
        )

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.9g")

    @classmethod
    def read_csv(cls, path: str, threshold: float) -> "ConvergenceTrace":
        frame = pd.read_csv(path)
        if list(frame.columns) != TRACE_COLUMNS:
            raise ValueError(f"{path} is not a trace file: columns {list(frame.columns)}.")
        trace = cls(threshold=threshold)
        for row in frame.itertuples(index=False):
            trace.append(TraceRecord(int(row.step), float(row.loss), float(row.adherence)))
        return trace


def format_threshold_step(step: Optional[int]) -> str:
    return "never" if step is None else str(step)


def _sgd(params: Iterable[torch.nn.Parameter], lr: float) -> torch.optim.Optimizer:
    return torch.optim.SGD(params, lr=lr, momentum=0.0)


def _adam(params: Iterable[torch.nn.Parameter], lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=lr)


OPTIMIZERS: Dict[str, Callable[[Iterable[torch.nn.Parameter], float], torch.optim.Optimizer]] = {
    "sgd": _sgd,
    "adam": _adam,
}


def get_optimizer(name: str, params: Iterable[torch.nn.Parameter], lr: float) -> torch.optim.Optimizer:
    factory = OPTIMIZERS.get(name)
    if factory is None:
        raise ValueError(f"Unknown optimizer '{name}', expected one of {sorted(OPTIMIZERS)}.")
    return factory(params, lr)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Global threshold maximizing between-class variance; foreground is >= the result."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    low, high = float(flat.min()), float(flat.max())
    if high <= low:
        # Constant image: split at the midpoint of the [-1, 1] data range.
        return 0.0
    hist, edges = np.histogram(flat, bins=bins, range=(low, high))
    centres = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(np.float64)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centres)
    mu0 = s0 / np.maximum(w0, 1.0)
    mu1 = (s0[-1] - s0) / np.maximum(w1, 1.0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


def binarize(generated: torch.Tensor) -> np.ndarray:
    values = generated.detach().to("cpu", torch.float64).numpy()
    return values >= otsu_threshold(values)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"Masks differ in shape: {a.shape} and {b.shape}.")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def adherence(generated: torch.Tensor, control: torch.Tensor) -> float:
    """IoU between the Otsu-binarized sample and a binary control mask."""
    mask = control.detach().cpu().numpy()
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("adherence expects a binary {0, 1} control mask.")
    return mask_iou(binarize(generated), mask)


def evaluate_adherence(
    conditioner: "BaseConditioner",
    controls: torch.Tensor,
    masks: torch.Tensor,
    sched: NoiseSchedule,
    kind: PredictionKind,
    sample_steps: int,
    eval_seed: int,
) -> float:
    """Mean adherence of samples drawn for each held-out control, fixed noise seed."""
    eval_sched, timesteps = respace(sched, sample_steps)
    generator = torch.Generator().manual_seed(eval_seed)
    backbone_cfg = conditioner.backbone.cfg
    shape = (controls.shape[0], backbone_cfg.in_channels, backbone_cfg.image_size, backbone_cfg.image_size)
    samples = ancestral_sample(
        conditioner, shape, eval_sched, timesteps, kind, generator, control=controls
    )
    scores = [adherence(samples[i], masks[i]) for i in range(samples.shape[0])]
    return float(np.mean(scores))


@dataclass
class TrainData:
    images: torch.Tensor
    controls: torch.Tensor
    heldout_controls: torch.Tensor
    heldout_masks: torch.Tensor


def select_trainable(cfg: TrainConfig, conditioner: "BaseConditioner") -> Set[str]:
    """Unfreezes the backbone subset the architecture trains and returns every trained name."""
    if cfg.architecture != "controlnet":
        backbone_registry = ParamRegistry.from_module(conditioner.backbone)
        conditioner.unfreeze_backbone(resolve_selector(ParamSelector(cfg.selector), backbone_registry))
    return conditioner.trainable_names()


def train(
    cfg: TrainConfig,
    conditioner: "BaseConditioner",
    data: TrainData,
    sched: NoiseSchedule,
) -> ConvergenceTrace:
    """
    Minimizes the weighted x-space diffusion loss over the trainable subset of
    `conditioner`, in place. Every batch, timestep and noise draw comes from one
    generator seeded with cfg.seed, so identical configs give identical runs.
    """
    cfg.validate()
    if conditioner.architecture != cfg.architecture:
        raise ValueError(
            f"Config asks for '{cfg.architecture}' but the conditioner is '{conditioner.architecture}'."
        )
    kind = PredictionKind(cfg.prediction_kind)
    trained = select_trainable(cfg, conditioner)
    registry = conditioner.registry()
    logger.info(
        f"Training {cfg.architecture}: {registry.count(trained):,} of {registry.total():,} "
        f"parameters ({registry.count(trained) / max(registry.total(), 1):.2%}) for {cfg.steps} steps."
    )
    trace = ConvergenceTrace(threshold=cfg.adherence_threshold)
    if cfg.steps == 0:
        return trace
    params = [p for _, p in conditioner.trainable_parameters()]
    if not params:
        raise ValueError(f"Nothing to train for architecture '{cfg.architecture}'.")
    optimizer = get_optimizer(cfg.optimizer, params, cfg.learning_rate)
    conditional = cfg.architecture != "base"
    generator = torch.Generator().manual_seed(cfg.seed)
    count = data.images.shape[0]
    eval_controls = data.heldout_controls[: cfg.eval_count]
    eval_masks = data.heldout_masks[: cfg.eval_count]

    for step in trange(1, cfg.steps + 1, disable=not cfg.progress, desc=cfg.architecture):
        index = torch.randint(0, count, (cfg.batch_size,), generator=generator)
        t = torch.randint(1, sched.T + 1, (cfg.batch_size,), generator=generator)
        x0 = data.images[index]
        eps = torch.randn(x0.shape, generator=generator)
        control = data.controls[index] if conditional else None

        loss = diffusion_loss(x0, t, control, conditioner, kind, sched, eps)
        value = float(loss.detach())
        if not math.isfinite(value):
            logger.error(f"Non-finite loss at step {step}; aborting {cfg.architecture} run.")
            raise TrainingDivergedError(step, value)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        if step % cfg.eval_every == 0 or step == cfg.steps:
            score = float("nan")
            if conditional:
                score = evaluate_adherence(
                    conditioner, eval_controls, eval_masks, sched, kind, cfg.sample_steps, cfg.eval_seed
                )
            trace.append(TraceRecord(step=step, loss=value, adherence=score))
            logger.info(f"[{cfg.architecture}] step {step}: loss {value:.4f}, adherence {score:.3f}")

    logger.info(
        f"Finished {cfg.architecture}; steps to threshold: "
        f"{format_threshold_step(trace.steps_to_threshold)}."
    )
    return trace
