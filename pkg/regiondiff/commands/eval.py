"""A class for the 'eval' command.

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
import dataclasses
from typing import Optional

from regiondiff.commandbase import Command
from regiondiff.commands.generate import generate_batches
from regiondiff.config import RunConfigFile
from regiondiff.containerbase import JSONFile
from regiondiff.metrics import consistency, score
from regiondiff.refseg import train_reference_segmenter
from regiondiff.sampler import SegmentationResult, segment_dataset
from regiondiff.synthdata import count_classes, load_png_dir
from regiondiff.unet import ArchSpec
from regiondiff.paths import get_eval_dir
from regiondiff.exceptions import DataError

REFERENCE_CHANNELS = 16


def reference_arch(spec: ArchSpec) -> ArchSpec:
    """A smaller plain version of a model's architecture."""
    return dataclasses.replace(
        spec, base_channels=REFERENCE_CHANNELS, res_blocks_per_stage=1,
        time_embed_dim=0, attention_at_lowest=False, variant="shared")


class EvalCommand(Command):
    """Run the "eval" command.

    Attributes:
        checkpoint: The checkpoint to load, or None for the latest one.
        data_dir: A saved dataset with label maps to evaluate on, or None for
            the held-out split of the configured data.
    """
    name = "eval"

    def __init__(self, config: RunConfigFile, checkpoint: Optional[str],
                 data_dir: Optional[str] = None, progress=True) -> None:
        super().__init__(config, progress)
        self.checkpoint = checkpoint
        self.data_dir = data_dir

    def main(self) -> None:
        model, manifest = self.load_model(self.checkpoint)
        schedule = self.load_schedule(manifest)
        if self.data_dir is not None:
            heldout = load_png_dir(self.data_dir, model.spec.resolution)
            # An external dataset also trains the reference segmenter.
            train_set = heldout
        else:
            train_set, heldout = self.load_data()
        if heldout.masks is None:
            raise DataError(
                "'{}' has no label maps to evaluate against".format(
                    self.data_dir))

        t_seg = self.config.t_seg(schedule.T)
        batch_size = self.config.get_int("train.batch_size")
        verbose = self.config.get_bool("eval.verbose")
        self.prepare_run({
            "checkpoint_step": manifest["step"], "t_seg": t_seg,
            "heldout": len(heldout)})

        labels = heldout.labels()
        num_classes = count_classes(train_set, heldout)
        result = segment_dataset(
            heldout.images(), t_seg, model, schedule, self.config.seed,
            batch_size=batch_size,
            draws=self.config.get_int("eval.seg_draws"))
        report = score(
            result, labels, fg_classes=range(1, num_classes),
            dice_mode=self.config.vals["eval.dice_mode"],
            K_gt=num_classes)
        print("Segmentation of {0} held-out images at t={1}:".format(
            len(heldout), t_seg))
        print(report.format(verbose=verbose))

        record = {
            "checkpoint_step": manifest["step"], "t_seg": t_seg,
            "segmentation": report.to_dict(), "consistency": None}

        num_generated = self.config.get_int("eval.num_generated")
        refseg_iters = self.config.get_int("eval.refseg_iters")
        if num_generated and refseg_iters and len(train_set):
            reference = train_reference_segmenter(
                train_set.images(), train_set.labels(),
                reference_arch(model.spec), num_classes, refseg_iters,
                batch_size=batch_size, seed=self.config.seed,
                progress=self.progress)
            images, soft, _ = generate_batches(
                num_generated, model, schedule, self.generator, batch_size,
                progress=self.progress)
            agreement = consistency(
                SegmentationResult.from_soft(soft, 1),
                reference.predict(images, batch_size))
            record["consistency"] = agreement
            record["num_generated"] = num_generated
            print("Mask consistency of {0} samples: {1:.4f}".format(
                num_generated, agreement))

        out_dir = get_eval_dir(self.run_dir)
        report.write(os.path.join(out_dir, "segmentation.json"))
        report_file = JSONFile(os.path.join(out_dir, "report.json"))
        report_file.vals = record
        report_file.write()
