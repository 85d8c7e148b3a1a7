"""A class for the 'segment' command.

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
from typing import Optional

from regiondiff.commandbase import Command
from regiondiff.config import RunConfigFile
from regiondiff.sampler import segment_dataset
from regiondiff.synthdata import load_png_dir, IMAGE_NAME
from regiondiff.imagefiles import (
    write_label_png, write_montage, write_soft_mask_pngs)
from regiondiff.paths import get_segment_dir

MONTAGE_IMAGES = 64


class SegmentCommand(Command):
    """Run the "segment" command.

    Attributes:
        checkpoint: The checkpoint to load, or None for the latest one.
        input_dir: A directory of PNG files or a saved dataset.
    """
    name = "segment"

    def __init__(self, config: RunConfigFile, checkpoint: Optional[str],
                 input_dir: str, progress=True) -> None:
        super().__init__(config, progress)
        self.checkpoint = checkpoint
        self.input_dir = input_dir

    def main(self) -> None:
        # Everything that can fail on bad input happens before any output.
        model, manifest = self.load_model(self.checkpoint)
        dataset = load_png_dir(self.input_dir, model.spec.resolution)
        schedule = self.load_schedule(manifest)
        t_seg = self.config.t_seg(schedule.T)
        self.prepare_run({
            "checkpoint_step": manifest["step"], "input": self.input_dir,
            "t_seg": t_seg})

        result = segment_dataset(
            dataset.images(), t_seg, model, schedule, self.config.seed,
            batch_size=self.config.get_int("train.batch_size"),
            draws=self.config.get_int("eval.seg_draws"))

        out_dir = get_segment_dir(self.run_dir)
        hard = result.hard.cpu().numpy()
        write_soft = self.config.get_bool("io.soft_masks")
        for index in range(len(dataset)):
            name = IMAGE_NAME.format(index)
            write_label_png(os.path.join(out_dir, "masks", name), hard[index])
            if write_soft:
                write_soft_mask_pngs(
                    os.path.join(out_dir, "soft", os.path.splitext(name)[0]),
                    result.soft[index].cpu().numpy())
        if len(dataset):
            write_montage(
                os.path.join(out_dir, "montage.png"),
                dataset.pixels[:MONTAGE_IMAGES], hard[:MONTAGE_IMAGES],
                columns=self.config.get_int("io.montage_columns"))

        print("Segmented {0} images at t={1}; masks are in '{2}'".format(
            len(dataset), t_seg, out_dir))
