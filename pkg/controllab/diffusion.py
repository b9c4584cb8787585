import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import torch

logger = logging.getLogger(__name__)

# An integer timestep or a per-sample tensor of integer timesteps, 1-based.
Timestep = Union[int, torch.Tensor]

# model(x_t, t, control) -> native prediction
DenoiseFn = Callable[[torch.Tensor, Timestep, Optional[torch.Tensor]], torch.Tensor]


class ShapeMismatchError(ValueError):
    """Raised when two feature maps that must agree in shape do not."""


class PredictionKind(str, Enum):
    X = "x"
    EPS = "eps"
    V = "v"


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Per-timestep diffusion coefficients, stored 0-indexed as float64 tensors.
    Timestep t (1..T) lives at index t - 1; alpha_bar at t = 0 is taken as 1.
    """

    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    posterior_var: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def alpha_bar_prev(self) -> torch.Tensor:
        one = torch.ones(1, dtype=self.alpha_bar.dtype)
        return torch.cat([one, self.alpha_bar[:-1]])


def _posterior_var(beta: torch.Tensor, alpha_bar: torch.Tensor) -> torch.Tensor:
    one = torch.ones(1, dtype=alpha_bar.dtype)
    alpha_bar_prev = torch.cat([one, alpha_bar[:-1]])
    return (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta


def make_schedule(
    T: int, beta_start: float, beta_end: float, kind: str = "linear"
) -> NoiseSchedule:
    """Builds the standard DDPM schedule with beta linearly spaced over T steps."""
    if kind != "linear":
        raise ValueError(f"Unsupported schedule kind '{kind}'. Only 'linear' is available.")
    if T < 1:
        raise ValueError(f"Schedule needs at least one step, got T={T}.")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"Beta bounds must satisfy 0 < beta_start <= beta_end < 1, "
            f"got beta_start={beta_start}, beta_end={beta_end}."
        )

    if T == 1:
        beta = torch.tensor([beta_start], dtype=torch.float64)
    else:
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=_posterior_var(beta, alpha_bar),
    )


def schedule_from_alpha_bar(alpha_bar: torch.Tensor) -> NoiseSchedule:
    """Rebuilds beta, alpha and the posterior variance from a cumulative product."""
    alpha_bar = alpha_bar.to(torch.float64)
    if alpha_bar.ndim != 1 or alpha_bar.numel() < 1:
        raise ValueError("alpha_bar must be a non-empty 1-D sequence.")
    one = torch.ones(1, dtype=torch.float64)
    alpha_bar_prev = torch.cat([one, alpha_bar[:-1]])
    alpha = alpha_bar / alpha_bar_prev
    beta = 1.0 - alpha
    if bool(((beta <= 0) | (beta >= 1)).any()):
        raise ValueError("alpha_bar must be strictly decreasing inside (0, 1).")
    return NoiseSchedule(
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=_posterior_var(beta, alpha_bar),
    )


def respace(sched: NoiseSchedule, num_steps: int) -> Tuple[NoiseSchedule, List[int]]:
    """
    Strided sub-schedule for cheap sampling. Returns the respaced schedule and
    the original timesteps (1-based) the model must be queried with.
    """
    if not 1 <= num_steps <= sched.T:
        raise ValueError(f"num_steps must be in [1, {sched.T}], got {num_steps}.")
    if num_steps == 1:
        timesteps = [sched.T]
    else:
        # Spacing is >= 1, so rounding keeps the timesteps distinct.
        positions = torch.linspace(1, sched.T, num_steps, dtype=torch.float64)
        timesteps = [int(round(p)) for p in positions.tolist()]
    index = torch.tensor([t - 1 for t in timesteps])
    return schedule_from_alpha_bar(sched.alpha_bar[index]), timesteps


def _check_t(t: Timestep, sched: NoiseSchedule) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() == 0:
            raise ValueError("Empty timestep tensor.")
        low, high = int(t.min()), int(t.max())
    else:
        low = high = int(t)
    if low < 1 or high > sched.T:
        raise ValueError(f"Timestep out of range: expected 1 <= t <= {sched.T}, got {t}.")


def _coef(values: torch.Tensor, t: Timestep, like: torch.Tensor) -> Union[float, torch.Tensor]:
    """Looks up a per-timestep coefficient, broadcastable against `like`."""
    if isinstance(t, torch.Tensor):
        picked = values[t.long().cpu() - 1].to(dtype=like.dtype, device=like.device)
        return picked.view(-1, *([1] * (like.ndim - 1)))
    return float(values[int(t) - 1])


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"{what}: expected matching shapes, got {tuple(a.shape)} and {tuple(b.shape)}."
        )


def q_sample(
    x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward noising: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    _check_same_shape(x0, eps, "q_sample x0/eps")
    _check_t(t, sched)
    sqrt_ab = _coef(sched.alpha_bar.sqrt(), t, x0)
    sqrt_one_minus_ab = _coef((1.0 - sched.alpha_bar).sqrt(), t, x0)
    return sqrt_ab * x0 + sqrt_one_minus_ab * eps


def loss_weight(t: Timestep, kind: PredictionKind, sched: NoiseSchedule) -> Union[float, torch.Tensor]:
    """Weight that turns an x-space MSE into the x, eps or v objective."""
    _check_t(t, sched)
    kind = PredictionKind(kind)
    if isinstance(t, torch.Tensor):
        ab = sched.alpha_bar[t.long().cpu() - 1]
        snr = ab / (1.0 - ab)
        if kind is PredictionKind.X:
            return torch.ones_like(snr)
        return snr if kind is PredictionKind.EPS else 1.0 + snr
    ab = float(sched.alpha_bar[int(t) - 1])
    if kind is PredictionKind.X:
        return 1.0
    snr = ab / (1.0 - ab)
    return snr if kind is PredictionKind.EPS else 1.0 + snr


def predict_x0(
    native: torch.Tensor,
    x_t: torch.Tensor,
    t: Timestep,
    kind: PredictionKind,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Converts a model's native output into an estimate of x0."""
    _check_same_shape(native, x_t, "model output/x_t")
    kind = PredictionKind(kind)
    if kind is PredictionKind.X:
        return native
    sqrt_ab = _coef(sched.alpha_bar.sqrt(), t, x_t)
    sqrt_one_minus_ab = _coef((1.0 - sched.alpha_bar).sqrt(), t, x_t)
    if kind is PredictionKind.EPS:
        return (x_t - sqrt_one_minus_ab * native) / sqrt_ab
    return sqrt_ab * x_t - sqrt_one_minus_ab * native


def diffusion_loss(
    x0: torch.Tensor,
    t: Timestep,
    control: Optional[torch.Tensor],
    model: DenoiseFn,
    kind: PredictionKind,
    sched: NoiseSchedule,
    eps: torch.Tensor,
) -> torch.Tensor:
    """
    Weighted x-space MSE of the conditional denoiser. All prediction kinds
    share the x0 target; the kind only selects the weight and the conversion
    of the model output.
    """
    x_t = q_sample(x0, t, eps, sched)
    native = model(x_t, t, control)
    x0_hat = predict_x0(native, x_t, t, kind, sched)
    weight = loss_weight(t, kind, sched)
    if isinstance(weight, torch.Tensor):
        per_sample = ((x0 - x0_hat) ** 2).flatten(1).mean(dim=1)
        return (weight.to(per_sample.dtype).to(per_sample.device) * per_sample).mean()
    return weight * torch.mean((x0 - x0_hat) ** 2)


def ddpm_step(
    x_t: torch.Tensor,
    t: Timestep,
    x0_hat: torch.Tensor,
    noise: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} using the x0-parameterised posterior mean."""
    _check_t(t, sched)
    _check_same_shape(x_t, x0_hat, "ddpm_step x_t/x0_hat")
    _check_same_shape(x_t, noise, "ddpm_step x_t/noise")

    ab_prev = sched.alpha_bar_prev()
    one_minus_ab = 1.0 - sched.alpha_bar
    c_x0 = _coef(ab_prev.sqrt() * sched.beta / one_minus_ab, t, x_t)
    c_xt = _coef(sched.alpha.sqrt() * (1.0 - ab_prev) / one_minus_ab, t, x_t)
    sigma = _coef(sched.posterior_var.sqrt(), t, x_t)

    mean = c_x0 * x0_hat + c_xt * x_t
    if isinstance(sigma, float) and sigma == 0.0:
        return mean
    return mean + sigma * noise


@torch.no_grad()
def ancestral_sample(
    model: DenoiseFn,
    shape: Sequence[int],
    sched: NoiseSchedule,
    timesteps: Sequence[int],
    kind: PredictionKind,
    generator: torch.Generator,
    control: Optional[torch.Tensor] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """
    Runs the reverse chain over a (possibly respaced) schedule. `sched` has one
    entry per element of `timesteps`; the model is queried with the original
    timestep while the update uses the respaced coefficients.
    """
    if len(timesteps) != sched.T:
        raise ValueError(
            f"Schedule has {sched.T} steps but {len(timesteps)} model timesteps were given."
        )
    x = torch.randn(tuple(shape), generator=generator, dtype=dtype)
    for k in range(sched.T, 0, -1):
        model_t = int(timesteps[k - 1])
        native = model(x, model_t, control)
        # predict_x0 works in the respaced index k: alpha_bar'_k == alpha_bar_{tau_k}.
        x0_hat = predict_x0(native, x, k, kind, sched).clamp(-1.0, 1.0)
        noise = torch.randn(tuple(shape), generator=generator, dtype=dtype)
        x = ddpm_step(x, k, x0_hat, noise, sched)
    logger.debug(f"Sampled batch of shape {tuple(shape)} over {sched.T} steps.")
    return x


def snr(sched: NoiseSchedule) -> torch.Tensor:
    """Signal-to-noise ratio alpha_bar / (1 - alpha_bar) per timestep."""
    return sched.alpha_bar / (1.0 - sched.alpha_bar)


def log_summary(sched: NoiseSchedule) -> None:
    logger.info(
        f"Noise schedule: T={sched.T}, alpha_bar[T]={float(sched.alpha_bar[-1]):.3e}, "
        f"log10 snr range=({math.log10(float(snr(sched)[-1])):.2f}, "
        f"{math.log10(float(snr(sched)[0])):.2f})"
    )
