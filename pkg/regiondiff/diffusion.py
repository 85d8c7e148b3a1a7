"""Noise schedules, forward noising and the reverse update of a DDPM.

Copyright © 2018 regiondiff contributors

This file is part of regiondiff.

regiondiff is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

regiondiff is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with regiondiff.  If not, see <http://www.gnu.org/licenses/>.
"""
import math
from typing import Dict, Optional, Sequence

import numpy as np
import scipy.optimize
import torch

from regiondiff.exceptions import (
    ConfigError, RangeError, ShapeError, ContractError)

SIGMA_MODES = ("beta", "posterior")

# The reference schedule that the desk-scale schedule is matched against.
REFERENCE_T = 1000
REFERENCE_BETA_START = 1e-4
REFERENCE_BETA_END = 0.02


class NoiseSchedule:
    """Precomputed tables for a discrete diffusion process.

    Timesteps are 1-indexed at the API boundary, so beta(t) for t in [1, T]
    is stored at index t - 1. All tables are float64; the cumulative product
    is accumulated in float64 regardless of the precision of the model.

    Instances are immutable after construction and can be shared freely.

    Attributes:
        T: The number of diffusion steps.
        sigma_mode: How the reverse-step noise scale was chosen.
        beta: The variance increments.
        alpha: One minus beta.
        alpha_bar: The cumulative products of alpha.
        sigma: The reverse-step noise scales.
    """
    __slots__ = ("T", "sigma_mode", "beta", "alpha", "alpha_bar", "sigma")

    def __init__(self, betas: Sequence[float], sigma_mode="beta") -> None:
        if sigma_mode not in SIGMA_MODES:
            raise ConfigError(
                "diffusion.sigma_mode: must be one of {}".format(
                    ", ".join(SIGMA_MODES)),
                field="diffusion.sigma_mode")
        beta = torch.as_tensor(np.asarray(betas, dtype=np.float64))
        if beta.dim() != 1 or len(beta) < 1:
            raise ConfigError(
                "diffusion.T: must be a positive integer", field="diffusion.T")
        if not bool(((beta > 0) & (beta < 1)).all()):
            raise ConfigError(
                "diffusion.beta: every value must be in (0, 1)",
                field="diffusion.beta_start")

        alpha = 1.0 - beta
        alpha_bar = torch.cumprod(alpha, dim=0)
        if sigma_mode == "beta":
            sigma = beta.sqrt()
        else:
            alpha_bar_prev = torch.cat([
                torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
            sigma = ((1 - alpha_bar_prev) / (1 - alpha_bar) * beta).sqrt()

        for name, value in (
                ("T", len(beta)), ("sigma_mode", sigma_mode), ("beta", beta),
                ("alpha", alpha), ("alpha_bar", alpha_bar),
                ("sigma", sigma)):
            object.__setattr__(self, name, value)

    def __setattr__(self, key, value):
        raise AttributeError("NoiseSchedule is immutable")

    def __repr__(self) -> str:
        return "NoiseSchedule(T={0}, beta=[{1:.3g}..{2:.3g}], {3})".format(
            self.T, float(self.beta[0]), float(self.beta[-1]),
            self.sigma_mode)

    def check_timesteps(self, t: torch.Tensor) -> None:
        """Check that every timestep is within [1, T].

        Raises:
            RangeError: A timestep is out of range.
        """
        if t.numel() == 0:
            return
        low, high = int(t.min()), int(t.max())
        if low < 1 or high > self.T:
            raise RangeError(
                "timestep out of range: got [{0}, {1}], expected values in "
                "[1, {2}]".format(low, high, self.T))

    def at(self, table: str, t: int) -> float:
        """Get a single value from one of the tables at timestep t."""
        if not 1 <= t <= self.T:
            raise RangeError(
                "timestep out of range: got {0}, expected a value in "
                "[1, {1}]".format(t, self.T))
        return float(getattr(self, table)[t - 1])

    def to_dict(self) -> Dict:
        """Describe the schedule so that from_dict() rebuilds it exactly."""
        return {
            "T": self.T,
            "beta_start": float(self.beta[0]),
            "beta_end": float(self.beta[-1]),
            "sigma_mode": self.sigma_mode,
            "betas": self.beta.tolist()}

    @classmethod
    def from_dict(cls, vals: Dict) -> "NoiseSchedule":
        return cls(vals["betas"], sigma_mode=vals["sigma_mode"])

    def matches(self, other: "NoiseSchedule") -> bool:
        """Check whether two schedules describe the same process."""
        return (
            self.T == other.T and self.sigma_mode == other.sigma_mode
            and torch.allclose(self.beta, other.beta, rtol=1e-10, atol=0))


def schedule_from_betas(
        betas: Sequence[float], sigma_mode="beta") -> NoiseSchedule:
    """Build a schedule from an explicit table of variance increments.

    Unlike build_linear_schedule(), this accepts a single-step schedule.
    """
    return NoiseSchedule(betas, sigma_mode=sigma_mode)


def build_linear_schedule(
        T: int, beta_start: float, beta_end: float,
        sigma_mode="beta") -> NoiseSchedule:
    """Build a schedule with linearly increasing variance increments.

    Args:
        T: The number of diffusion steps. Must be at least 2.
        beta_start: The variance increment at t = 1.
        beta_end: The variance increment at t = T.
        sigma_mode: "beta" sets sigma(t)^2 = beta(t). "posterior" uses the
            variance of the forward process posterior instead.

    Raises:
        ConfigError: A parameter is out of range.
    """
    if not isinstance(T, int) or T < 2:
        raise ConfigError(
            "diffusion.T: must be an integer of at least 2",
            field="diffusion.T")
    if not 0 < beta_start < 1:
        raise ConfigError(
            "diffusion.beta_start: must be in (0, 1)",
            field="diffusion.beta_start")
    if not beta_start <= beta_end < 1:
        raise ConfigError(
            "diffusion.beta_end: must be in [beta_start, 1)",
            field="diffusion.beta_end")

    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(betas, sigma_mode=sigma_mode)


def _log_signal(T: int, beta_start: float, beta_end: float) -> float:
    """The log of alpha_bar(T) for a linear schedule."""
    return float(np.sum(np.log1p(
        -np.linspace(beta_start, beta_end, T, dtype=np.float64))))


def terminal_snr_beta_end(
        T: int, beta_start: float, reference_T=REFERENCE_T,
        reference_beta_start=REFERENCE_BETA_START,
        reference_beta_end=REFERENCE_BETA_END) -> float:
    """Find the beta_end that keeps the terminal signal level of a reference.

    A shorter schedule with the same beta range would leave much more signal
    at t = T. This solves for the beta_end at which alpha_bar(T) of the
    shorter linear schedule equals alpha_bar(T) of the reference schedule.

    Raises:
        ConfigError: No beta_end in [beta_start, 1) reaches the target.
    """
    target = _log_signal(
        reference_T, reference_beta_start, reference_beta_end)

    def residual(beta_end: float) -> float:
        return _log_signal(T, beta_start, beta_end) - target

    upper = 1 - 1e-6
    if residual(beta_start) < 0 or residual(upper) > 0:
        raise ConfigError(
            "diffusion.beta_end: no value matches the terminal signal level "
            "of the reference schedule for T={}".format(T),
            field="diffusion.beta_end")
    return float(scipy.optimize.brentq(
        residual, beta_start, upper, xtol=1e-14, rtol=1e-12))


def _expand(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape per-sample coefficients so they broadcast over an image."""
    return values.to(like.dtype).to(like.device).view(
        -1, *([1] * (like.dim() - 1)))


def forward_diffuse(
        x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
        schedule: NoiseSchedule) -> torch.Tensor:
    """Noise clean images to timestep t in closed form.

    Args:
        x0: The clean images, shaped (batch, channels, height, width).
        t: One timestep in [1, T] per batch element.
        eps: Standard normal noise shaped like x0.
        schedule: The noise schedule.

    Returns:
        sqrt(alpha_bar(t)) * x0 + sqrt(1 - alpha_bar(t)) * eps

    Raises:
        ShapeError: The shapes of the inputs don't agree.
        RangeError: A timestep is out of range.
    """
    if eps.shape != x0.shape:
        raise ShapeError(
            "noise shape mismatch: expected {0}, got {1}".format(
                tuple(x0.shape), tuple(eps.shape)))
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.shape[0] != x0.shape[0]:
        raise ShapeError(
            "timestep count mismatch: expected {0}, got {1}".format(
                x0.shape[0], t.shape[0]))
    schedule.check_timesteps(t)

    alpha_bar = schedule.alpha_bar[t.cpu() - 1]
    signal = _expand(alpha_bar.sqrt(), x0)
    noise = _expand((1 - alpha_bar).sqrt(), x0)
    return signal * x0 + noise * eps


def reverse_step(
        x_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
        z: Optional[torch.Tensor], schedule: NoiseSchedule) -> torch.Tensor:
    """Take one ancestral sampling step from x_t to x_(t-1).

    Args:
        x_t: The current noisy images.
        eps_hat: The predicted noise for x_t.
        t: The current timestep in [1, T].
        z: Standard normal noise shaped like x_t, or None for no noise. Must be
            None or all zeros at t = 1.
        schedule: The noise schedule.

    Raises:
        RangeError: The timestep is out of range.
        ShapeError: The shapes of the inputs don't agree.
        ContractError: Noise was supplied for the final step.
    """
    alpha = schedule.at("alpha", t)
    alpha_bar = schedule.at("alpha_bar", t)
    if eps_hat.shape != x_t.shape:
        raise ShapeError(
            "prediction shape mismatch: expected {0}, got {1}".format(
                tuple(x_t.shape), tuple(eps_hat.shape)))
    if z is not None and z.shape != x_t.shape:
        raise ShapeError(
            "noise shape mismatch: expected {0}, got {1}".format(
                tuple(x_t.shape), tuple(z.shape)))
    if t == 1 and z is not None and bool(torch.any(z != 0)):
        raise ContractError("noise must be zero at the final step (t = 1)")

    mean = (1 / math.sqrt(alpha)) * (
        x_t - ((1 - alpha) / math.sqrt(1 - alpha_bar)) * eps_hat)
    if z is None:
        return mean
    return mean + schedule.at("sigma", t) * z


def sample_timesteps(
        batch: int, T: int, generator: torch.Generator) -> torch.Tensor:
    """Draw i.i.d. uniform timesteps in [1, T].

    Raises:
        RangeError: The batch size is less than one.
    """
    if batch < 1:
        raise RangeError("batch size must be at least 1")
    return torch.randint(
        1, T + 1, (batch,), generator=generator, dtype=torch.long)
