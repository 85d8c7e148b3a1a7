"""Segmentation of real images and joint generation of images and masks.

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
import dataclasses
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
import torch

from regiondiff.diffusion import NoiseSchedule, forward_diffuse, reverse_step
from regiondiff.unet import FactorizedUNet
from regiondiff.exceptions import RangeError, NumericalError


@dataclasses.dataclass
class SegmentationResult:
    """Soft and hard region assignments for a batch of images.

    Attributes:
        soft: Masks shaped (batch, K, height, width) summing to one per pixel.
        hard: The argmax label of each pixel, shaped (batch, height, width).
        t_used: The timestep the masks were read out at.
        noise: The noise prediction, if it was requested.
    """
    soft: torch.Tensor
    hard: torch.Tensor
    t_used: int
    noise: Optional[torch.Tensor] = None

    @classmethod
    def from_soft(cls, soft: torch.Tensor, t_used: int,
                  noise=None) -> "SegmentationResult":
        return cls(soft, hard_labels(soft), t_used, noise)


@dataclasses.dataclass
class GenerationResult:
    """Generated images with the masks read out at the last step.

    Attributes:
        images: The images, clamped to [-1, 1].
        masks: The masks from the model evaluation at t = 1.
        steps: The number of reverse steps taken.
    """
    images: torch.Tensor
    masks: SegmentationResult
    steps: int


TrajectoryRecord = NamedTuple(
    "TrajectoryRecord",
    [("t", int), ("image", torch.Tensor), ("masks", torch.Tensor)])


def hard_labels(soft: torch.Tensor) -> torch.Tensor:
    """Assign each pixel the channel with the largest mask value.

    Ties go to the lowest channel index.
    """
    return torch.argmax(soft, dim=1)


def default_t_seg(T: int) -> int:
    """Scale the segmentation timestep of a 1000-step schedule to T steps."""
    return max(1, int(round(30 * T / 1000)))


def image_generator(seed: int, index: int) -> torch.Generator:
    """Get an independent random stream for one image of a dataset."""
    generator = torch.Generator()
    generator.manual_seed(int(
        np.random.SeedSequence([seed, index]).generate_state(1)[0]))
    return generator


def _model_device(model: FactorizedUNet) -> torch.device:
    return next(model.parameters()).device


def _segment_noised(x0: torch.Tensor, t_seg: int, model: FactorizedUNet,
                    schedule: NoiseSchedule, noises: Sequence[torch.Tensor],
                    with_noise: bool) -> SegmentationResult:
    """Read out masks for each noise draw and average them."""
    if not 1 <= t_seg <= schedule.T:
        raise RangeError(
            "segmentation timestep out of range: got {0}, expected a value "
            "in [1, {1}]".format(t_seg, schedule.T))
    device = _model_device(model)
    x0 = x0.to(device)
    t = torch.full((x0.shape[0],), t_seg, dtype=torch.long)

    model.eval()
    soft = None
    noise_sum = None
    with torch.no_grad():
        for eps in noises:
            x_t = forward_diffuse(x0, t, eps.to(device), schedule)
            if with_noise:
                eps_hat, m = model.predict_noise(x_t, t.to(device))
                noise_sum = eps_hat if noise_sum is None else noise_sum + eps_hat
            else:
                m = model.predict_masks(x_t, t.to(device))
            soft = m if soft is None else soft + m
    if len(noises) > 1:
        soft = soft / len(noises)
        if noise_sum is not None:
            noise_sum = noise_sum / len(noises)
    return SegmentationResult.from_soft(soft, t_seg, noise_sum)


def segment(x0: torch.Tensor, t_seg: int, model: FactorizedUNet,
            schedule: NoiseSchedule, generator: torch.Generator, draws=1,
            with_noise=False) -> SegmentationResult:
    """Segment clean images with one denoising pass at a small timestep.

    The images are noised to t_seg and the mask generator's output is read
    out. Only the encoder, middle block and mask generator run unless the
    noise prediction is requested.

    Args:
        x0: Clean images in [-1, 1].
        t_seg: The timestep to noise the images to.
        model: The model. Pass the averaged weights.
        schedule: The noise schedule.
        generator: The random stream for the noise.
        draws: Average the masks of this many independent noise draws.
        with_noise: Also run the decoder branches and return the noise
            prediction.

    Raises:
        RangeError: t_seg is out of range or draws is less than one.
    """
    if draws < 1:
        raise RangeError("the number of noise draws must be at least 1")
    noises = [
        torch.randn(x0.shape, generator=generator) for _ in range(draws)]
    return _segment_noised(x0, t_seg, model, schedule, noises, with_noise)


def segment_dataset(images: torch.Tensor, t_seg: int, model: FactorizedUNet,
                    schedule: NoiseSchedule, seed: int, batch_size=64,
                    draws=1) -> SegmentationResult:
    """Segment a dataset in batches with per-image random streams.

    The noise for image i depends only on the seed and i, so results don't
    depend on the batch size.
    """
    if draws < 1:
        raise RangeError("the number of noise draws must be at least 1")
    results = []
    for start in range(0, images.shape[0], batch_size):
        batch = images[start:start + batch_size]
        generators = [
            image_generator(seed, index)
            for index in range(start, start + batch.shape[0])]
        noises = [
            torch.stack([
                torch.randn(batch.shape[1:], generator=generator)
                for generator in generators])
            for _ in range(draws)]
        results.append(_segment_noised(
            batch, t_seg, model, schedule, noises, with_noise=False))
    if not results:
        K = model.spec.num_regions
        size = model.spec.resolution
        return SegmentationResult.from_soft(
            torch.zeros((0, K, size, size)), t_seg)
    return SegmentationResult.from_soft(
        torch.cat([result.soft for result in results]), t_seg)


def _reverse_chain(
        n: int, model: FactorizedUNet, schedule: NoiseSchedule,
        generator: torch.Generator,
        record: Optional[Callable[[int, torch.Tensor, torch.Tensor], None]]
        ) -> GenerationResult:
    """Run T steps of ancestral sampling from pure noise.

    Args:
        record: Called after each step with the timestep, the images after
            the step and the masks of that step's model evaluation.

    Raises:
        NumericalError: An intermediate result isn't finite.
    """
    if n < 1:
        raise RangeError("the number of samples must be at least 1")
    spec = model.spec
    device = _model_device(model)
    shape = (n, spec.img_channels, spec.resolution, spec.resolution)

    model.eval()
    x = torch.randn(shape, generator=generator).to(device)
    masks = None
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat, masks = model.predict_noise(x, t)
            z = torch.randn(shape, generator=generator).to(device) \
                if t > 1 else None
            x = reverse_step(x, eps_hat, t, z, schedule)
            if not bool(torch.isfinite(x).all()):
                raise NumericalError(
                    "non-finite sample at reverse step t={}".format(t),
                    snapshot={"t": t})
            if record is not None:
                record(t, x, masks)

    return GenerationResult(
        images=x.clamp(-1, 1),
        masks=SegmentationResult.from_soft(masks, 1),
        steps=schedule.T)


def generate(n: int, model: FactorizedUNet, schedule: NoiseSchedule,
             generator: torch.Generator) -> GenerationResult:
    """Generate images and their region masks from pure noise.

    The masks are the ones predicted at the final step, t = 1.
    """
    return _reverse_chain(n, model, schedule, generator, record=None)


def mask_trajectory(n: int, model: FactorizedUNet, schedule: NoiseSchedule,
                    generator: torch.Generator,
                    record_every: int) -> List[TrajectoryRecord]:
    """Generate images while recording intermediate images and masks.

    A record is kept at every t with (t - 1) divisible by record_every, so
    the last record is always the t = 1 step and there are
    ceil(T / record_every) records. Recorded images are clamped to [-1, 1],
    so the last record matches generate() under the same random stream.

    Raises:
        RangeError: record_every is less than one.
    """
    if record_every < 1:
        raise RangeError("record_every must be at least 1")
    records = []

    def record(t: int, x: torch.Tensor, masks: torch.Tensor) -> None:
        if (t - 1) % record_every == 0:
            records.append(TrajectoryRecord(
                t, x.clamp(-1, 1).cpu(), masks.cpu()))

    _reverse_chain(n, model, schedule, generator, record=record)
    assert len(records) == math.ceil(schedule.T / record_every)
    return records
