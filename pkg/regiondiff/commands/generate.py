"""A class for the 'generate' command.

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
import os
from typing import List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from regiondiff.commandbase import Command
from regiondiff.config import RunConfigFile
from regiondiff.diffusion import NoiseSchedule
from regiondiff.sampler import TrajectoryRecord, generate, mask_trajectory
from regiondiff.unet import FactorizedUNet
from regiondiff.synthdata import IMAGE_NAME
from regiondiff.imagefiles import (
    to_pixels, write_image_png, write_label_png, write_montage,
    write_soft_mask_pngs)
from regiondiff.paths import get_generate_dir

MONTAGE_IMAGES = 64
# The number of samples shown in the trajectory montage.
TRAJECTORY_SAMPLES = 4


def generate_batches(
        n: int, model: FactorizedUNet, schedule: NoiseSchedule,
        generator: torch.Generator, batch_size: int,
        progress=True) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Generate samples in batches from one random stream.

    Returns:
        The images, the soft masks and the hard masks, all on the CPU.
    """
    images, soft, hard = [], [], []
    starts = range(0, n, batch_size)
    for start in tqdm(starts, disable=not progress, unit="batch",
                      desc="sampling", dynamic_ncols=True):
        result = generate(
            min(batch_size, n - start), model, schedule, generator)
        images.append(result.images.cpu())
        soft.append(result.masks.soft.cpu())
        hard.append(result.masks.hard.cpu())
    return torch.cat(images), torch.cat(soft), torch.cat(hard)


class GenerateCommand(Command):
    """Run the "generate" command.

    Attributes:
        checkpoint: The checkpoint to load, or None for the latest one.
        num_samples: The number of samples, or None for the configured
            number.
        trajectory: Also record intermediate images and masks.
    """
    name = "generate"

    def __init__(self, config: RunConfigFile, checkpoint: Optional[str],
                 num_samples: Optional[int] = None, trajectory=False,
                 progress=True) -> None:
        super().__init__(config, progress)
        self.checkpoint = checkpoint
        self.num_samples = num_samples
        self.trajectory = trajectory

    def main(self) -> None:
        model, manifest = self.load_model(self.checkpoint)
        schedule = self.load_schedule(manifest)
        n = self.num_samples or self.config.get_int("eval.num_generated")
        self.prepare_run({
            "checkpoint_step": manifest["step"], "num_samples": n})
        out_dir = get_generate_dir(self.run_dir)

        if self.trajectory:
            record_every = self.config.get_int("io.record_every") \
                or max(1, schedule.T // 10)
            records = mask_trajectory(
                min(n, TRAJECTORY_SAMPLES), model, schedule, self.generator,
                record_every)
            self._write_trajectory(out_dir, records)

        images, soft, hard = generate_batches(
            n, model, schedule, self.generator,
            self.config.get_int("train.batch_size"), progress=self.progress)

        pixels = to_pixels(images)
        hard = hard.numpy()
        write_soft = self.config.get_bool("io.soft_masks")
        for index in range(n):
            name = IMAGE_NAME.format(index)
            write_image_png(
                os.path.join(out_dir, "images", name), pixels[index])
            write_label_png(os.path.join(out_dir, "masks", name), hard[index])
            if write_soft:
                write_soft_mask_pngs(
                    os.path.join(out_dir, "soft", os.path.splitext(name)[0]),
                    soft[index].numpy())
        write_montage(
            os.path.join(out_dir, "montage.png"),
            pixels[:MONTAGE_IMAGES], hard[:MONTAGE_IMAGES],
            columns=self.config.get_int("io.montage_columns"))

        print("Generated {0} samples in {1} steps; outputs are in '{2}'".format(
            n, schedule.T, out_dir))

    def _write_trajectory(self, out_dir: str,
                          records: List[TrajectoryRecord]) -> None:
        """Write one row per sample with its images and masks over time."""
        pixels = [to_pixels(record.image) for record in records]
        labels = [
            record.masks.argmax(dim=1).numpy() for record in records]
        num_samples = pixels[0].shape[0]
        row_pixels = np.stack([
            step[index] for index in range(num_samples) for step in pixels])
        row_labels = np.stack([
            step[index] for index in range(num_samples) for step in labels])
        write_montage(
            os.path.join(out_dir, "trajectory.png"), row_pixels, row_labels,
            columns=len(records))
        print("Recorded {0} steps of {1} samples (t = {2})".format(
            len(records), num_samples,
            ", ".join(str(record.t) for record in records)))
