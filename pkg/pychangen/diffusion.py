"""
Diffusion core for pychangen.

Noise schedules, the forward perturbation, the simplified noise-prediction
objective, the variational covariance term and deterministic DDIM stepping.

Step indices run 1..N for noisy states; step 0 means clean data, with the
boundary convention alpha_bar(0) = 1. Tables are float64 numpy arrays of
length N + 1 indexed directly by step.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Union

import numpy as np
import torch
import torch.nn.functional as F

from .constants import (
    COSINE_MAX_BETA,
    COSINE_OFFSET,
    DECODER_BIN_HALF_WIDTH,
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_NUM_TRAIN_STEPS,
    DEFAULT_SCHEDULE_KIND,
)
from .errors import DimensionError, ParameterError

logger = logging.getLogger("ChangenDiffusion")

Step = Union[int, torch.Tensor]

SCHEDULE_KINDS = ("linear", "cosine")


def _linear_betas(num_steps: int, beta_start: float, beta_end: float) -> np.ndarray:
    return np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)


def _cosine_betas(num_steps: int) -> np.ndarray:
    def f(t):
        return math.cos((t + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

    betas = [
        min(1 - f((i + 1) / num_steps) / f(i / num_steps), COSINE_MAX_BETA)
        for i in range(num_steps)
    ]
    return np.array(betas, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    Immutable beta / alpha / alpha_bar tables.

    ``betas``, ``alphas`` and ``alpha_bars`` have length N and hold the values
    for steps 1..N. Use ``alpha_bar(i)`` for the boundary-aware lookup.
    """
    kind: str = DEFAULT_SCHEDULE_KIND
    num_train_steps: int = DEFAULT_NUM_TRAIN_STEPS
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ParameterError(f"unknown schedule kind '{self.kind}'", "diffusion")
        if self.num_train_steps < 1:
            raise ParameterError("num_train_steps must be >= 1", "diffusion")
        if self.kind == "linear":
            if not 0 < self.beta_start <= self.beta_end < 1:
                raise ParameterError(
                    f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}",
                    "diffusion",
                )
            betas = _linear_betas(self.num_train_steps, self.beta_start, self.beta_end)
        else:
            betas = _cosine_betas(self.num_train_steps)
        if not ((betas > 0).all() and (betas < 1).all()):
            raise ParameterError("betas must lie in (0, 1)", "diffusion")

        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        bar_table = np.concatenate([[1.0], alpha_bars])
        beta_table = np.concatenate([[0.0], betas])

        # posterior q(x^(i-1) | x^(i), x^(0)), valid for i >= 1
        prev = bar_table[:-1]
        post_var = np.zeros_like(bar_table)
        post_var[1:] = betas * (1.0 - prev) / (1.0 - alpha_bars)
        clipped = np.zeros_like(bar_table)
        clipped[1:] = np.log(np.append(post_var[2] if self.num_train_steps > 1 else betas[0],
                                       post_var[2:]))
        coef_x0 = np.zeros_like(bar_table)
        coef_xi = np.zeros_like(bar_table)
        coef_x0[1:] = betas * np.sqrt(prev) / (1.0 - alpha_bars)
        coef_xi[1:] = (1.0 - prev) * np.sqrt(alphas) / (1.0 - alpha_bars)

        for name, value in (
            ("betas", betas),
            ("alphas", alphas),
            ("alpha_bars", alpha_bars),
            ("_bar_table", bar_table),
            ("_beta_table", beta_table),
            ("_post_var", post_var),
            ("_post_logvar_clipped", clipped),
            ("_post_coef_x0", coef_x0),
            ("_post_coef_xi", coef_xi),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def linear(cls, num_train_steps: int = DEFAULT_NUM_TRAIN_STEPS,
               beta_start: float = DEFAULT_BETA_START,
               beta_end: float = DEFAULT_BETA_END) -> "NoiseSchedule":
        return cls("linear", num_train_steps, beta_start, beta_end)

    @classmethod
    def cosine(cls, num_train_steps: int = DEFAULT_NUM_TRAIN_STEPS) -> "NoiseSchedule":
        return cls("cosine", num_train_steps)

    def check_step(self, step: Step, allow_zero: bool = True):
        low = 0 if allow_zero else 1
        steps = step if isinstance(step, torch.Tensor) else torch.tensor(step)
        if steps.numel() and (steps.min() < low or steps.max() > self.num_train_steps):
            raise ParameterError(
                f"step must lie in [{low}, {self.num_train_steps}], got {step}", "diffusion"
            )

    def alpha_bar(self, step: int) -> float:
        self.check_step(step)
        return float(self._bar_table[step])

    def beta(self, step: int) -> float:
        self.check_step(step, allow_zero=False)
        return float(self._beta_table[step])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_train_steps": self.num_train_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NoiseSchedule":
        return cls(
            kind=data.get("kind", DEFAULT_SCHEDULE_KIND),
            num_train_steps=int(data.get("num_train_steps", DEFAULT_NUM_TRAIN_STEPS)),
            beta_start=float(data.get("beta_start", DEFAULT_BETA_START)),
            beta_end=float(data.get("beta_end", DEFAULT_BETA_END)),
        )


def _extract(table: np.ndarray, step: Step, like: torch.Tensor) -> torch.Tensor:
    """Look up per-step values and broadcast them against `like`."""
    if isinstance(step, torch.Tensor) and step.ndim > 0:
        values = torch.tensor(np.array(table), dtype=like.dtype)[step.long().cpu()]
        values = values.to(like.device)
        return values.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(table[int(step)]), dtype=like.dtype, device=like.device)


# ========================================================================
# FORWARD PROCESS AND OBJECTIVES
# ========================================================================

def perturb(x0: torch.Tensor, step: Step, noise: torch.Tensor,
            schedule: NoiseSchedule) -> torch.Tensor:
    """
    Sample q(x^(i) | x^(0)) with the given noise.

    Args:
        x0: Clean data
        step: Step index (int or per-batch LongTensor) in [0, N]
        noise: Standard normal noise of x0's shape
        schedule: Noise schedule

    Returns:
        sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * noise
    """
    if noise.shape != x0.shape:
        raise DimensionError(f"noise {tuple(noise.shape)} != x0 {tuple(x0.shape)}", "diffusion")
    schedule.check_step(step)
    bar = _extract(schedule._bar_table, step, x0)
    return torch.sqrt(bar) * x0 + torch.sqrt(1.0 - bar) * noise


def simple_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if eps_pred.shape != eps_true.shape:
        raise DimensionError(
            f"prediction {tuple(eps_pred.shape)} != target {tuple(eps_true.shape)}", "diffusion"
        )
    return F.mse_loss(eps_pred, eps_true)


def predict_x0(x_i: torch.Tensor, step: Step, eps: torch.Tensor,
               schedule: NoiseSchedule) -> torch.Tensor:
    bar = _extract(schedule._bar_table, step, x_i)
    return (x_i - torch.sqrt(1.0 - bar) * eps) / torch.sqrt(bar)


def posterior_mean_variance(x0: torch.Tensor, x_i: torch.Tensor, step: Step,
                            schedule: NoiseSchedule):
    """
    Mean, variance and clipped log-variance of q(x^(i-1) | x^(i), x^(0)).

    The log-variance at step 1 is clipped to the step-2 value since the true
    posterior variance is 0 there.
    """
    if x0.shape != x_i.shape:
        raise DimensionError("x0 and x_i shapes differ", "diffusion")
    schedule.check_step(step, allow_zero=False)
    mean = (_extract(schedule._post_coef_x0, step, x_i) * x0
            + _extract(schedule._post_coef_xi, step, x_i) * x_i)
    var = _extract(schedule._post_var, step, x_i)
    logvar = _extract(schedule._post_logvar_clipped, step, x_i)
    return mean, var, logvar


def model_posterior_mean(x_i: torch.Tensor, step: Step, eps_pred: torch.Tensor,
                         schedule: NoiseSchedule) -> torch.Tensor:
    """Posterior mean with x^(0) replaced by its noise-prediction estimate."""
    x0_hat = predict_x0(x_i, step, eps_pred, schedule)
    mean, _, _ = posterior_mean_variance(x0_hat, x_i, step, schedule)
    return mean


def interpolate_log_variance(raw: torch.Tensor, step: Step,
                             schedule: NoiseSchedule) -> torch.Tensor:
    """
    Map the network's raw covariance output to a log-variance.

    The coefficient ``sigmoid(raw)`` lies in [0, 1] and interpolates between
    the clipped log posterior variance (0) and log beta (1).
    """
    schedule.check_step(step, allow_zero=False)
    frac = torch.sigmoid(raw)
    max_log = torch.log(_extract(schedule._beta_table, step, raw))
    min_log = _extract(schedule._post_logvar_clipped, step, raw)
    return frac * max_log + (1.0 - frac) * min_log


def normal_kl(mean1, logvar1, mean2, logvar2) -> torch.Tensor:
    """Elementwise KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))) in nats."""
    return 0.5 * (
        -1.0 + logvar2 - logvar1
        + torch.exp(logvar1 - logvar2)
        + (mean1 - mean2) ** 2 * torch.exp(-logvar2)
    )


def _approx_standard_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def discretized_gaussian_log_likelihood(x: torch.Tensor, means: torch.Tensor,
                                        log_scales: torch.Tensor) -> torch.Tensor:
    """
    Log-likelihood of data in [-1, 1] quantized to 256 levels.

    Edge bins extend to infinity.
    """
    centered = x - means
    inv_stdv = torch.exp(-log_scales)
    cdf_plus = _approx_standard_normal_cdf(inv_stdv * (centered + DECODER_BIN_HALF_WIDTH))
    cdf_min = _approx_standard_normal_cdf(inv_stdv * (centered - DECODER_BIN_HALF_WIDTH))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    cdf_delta = cdf_plus - cdf_min
    return torch.where(
        x < -0.999,
        log_cdf_plus,
        torch.where(x > 0.999, log_one_minus_cdf_min, torch.log(cdf_delta.clamp(min=1e-12))),
    )


def _mean_flat(t: torch.Tensor) -> torch.Tensor:
    return t.mean(dim=list(range(1, t.ndim))) if t.ndim > 1 else t


def vlb_covariance_loss(
    x0: torch.Tensor,
    x_i: torch.Tensor,
    step: Step,
    mean_pred: torch.Tensor,
    logvar_pred: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """
    Variational bound term that trains only the covariance.

    KL between the true forward posterior and the model Gaussian, averaged
    over elements, in nats. The model mean is detached so gradient reaches
    ``logvar_pred`` alone. At step 1 the decoder negative log-likelihood of
    ``x0`` under the discretized model Gaussian is used instead.

    Args:
        x0: Clean data, batch-first
        x_i: Noisy data at `step`
        step: Step index (int or per-batch LongTensor), >= 1
        mean_pred: Model posterior mean
        logvar_pred: Model log-variance
        schedule: Noise schedule

    Returns:
        Scalar loss (batch mean)
    """
    if not (x0.shape == x_i.shape == mean_pred.shape == logvar_pred.shape):
        raise DimensionError("vlb inputs must share one shape", "diffusion")
    steps = step if isinstance(step, torch.Tensor) else torch.tensor(step)
    if steps.numel() and steps.min() < 1:
        raise ParameterError("vlb is undefined at step 0", "diffusion")
    schedule.check_step(step, allow_zero=False)

    mean_pred = mean_pred.detach()
    true_mean, _, true_logvar = posterior_mean_variance(x0, x_i, step, schedule)
    kl = _mean_flat(normal_kl(true_mean, true_logvar.expand_as(x0), mean_pred, logvar_pred))
    nll = _mean_flat(-discretized_gaussian_log_likelihood(x0, mean_pred, 0.5 * logvar_pred))
    if steps.ndim == 0:
        terms = nll if int(steps) == 1 else kl
    else:
        first = (steps.to(x0.device) == 1)
        terms = torch.where(first.reshape(first.shape + (1,) * (kl.ndim - 1)), nll, kl)
    return terms.mean()


# ========================================================================
# SAMPLING
# ========================================================================

def ddim_step(x_i: torch.Tensor, eps_pred: torch.Tensor, step_from: int, step_to: int,
              schedule: NoiseSchedule) -> torch.Tensor:
    """
    Deterministic DDIM update from step `step_from` to `step_to`.

    Args:
        x_i: Current state at step_from
        eps_pred: Predicted noise
        step_from: Current step i
        step_to: Target step j < i; j = 0 returns the x^(0) estimate

    Returns:
        State at step_to
    """
    if x_i.shape != eps_pred.shape:
        raise DimensionError("x_i and eps_pred shapes differ", "diffusion")
    if step_to >= step_from:
        raise ParameterError(f"ddim_step needs step_to < step_from, got {step_to} >= {step_from}",
                             "diffusion")
    schedule.check_step(step_from)
    schedule.check_step(step_to)
    x0_hat = predict_x0(x_i, step_from, eps_pred, schedule)
    if step_to == 0:
        return x0_hat
    bar_to = _extract(schedule._bar_table, step_to, x_i)
    return torch.sqrt(bar_to) * x0_hat + torch.sqrt(1.0 - bar_to) * eps_pred


def make_sampling_steps(num_steps: int, num_train_steps: int) -> List[int]:
    """
    Evenly spaced, strictly decreasing subsequence of N..1 with T entries.

    Examples:
        >>> make_sampling_steps(4, 8)
        [8, 6, 4, 2]
    """
    if num_steps < 1 or num_steps > num_train_steps:
        raise ParameterError(
            f"need 1 <= T <= N, got T={num_steps}, N={num_train_steps}", "diffusion"
        )
    return [num_train_steps - (k * num_train_steps) // num_steps for k in range(num_steps)]


def training_losses(
    model: torch.nn.Module,
    x0: torch.Tensor,
    condition: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> Dict[str, torch.Tensor]:
    """
    Noise-prediction MSE plus the covariance bound on one batch.

    Steps are drawn uniformly from 1..N and the noise from `generator`.

    Returns:
        Dict with ``mse``, ``vlb`` and their unweighted sum ``loss``
    """
    batch = x0.shape[0]
    steps = torch.randint(1, schedule.num_train_steps + 1, (batch,), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(x0.device)
    x_i = perturb(x0, steps, noise, schedule)
    eps_pred, raw_var = model(x_i, steps.to(x0.device), condition)
    mse = simple_loss(eps_pred, noise)
    terms = {"mse": mse}
    if raw_var is not None:
        mean_pred = model_posterior_mean(x_i, steps, eps_pred.detach(), schedule)
        logvar = interpolate_log_variance(raw_var, steps, schedule)
        terms["vlb"] = vlb_covariance_loss(x0, x_i, steps, mean_pred, logvar, schedule)
    else:
        terms["vlb"] = torch.zeros((), dtype=x0.dtype, device=x0.device)
    terms["loss"] = terms["mse"] + terms["vlb"]
    return terms
