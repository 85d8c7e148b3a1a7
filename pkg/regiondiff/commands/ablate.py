"""A class for the 'ablate' command.

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
from typing import Optional, Sequence

from regiondiff.commandbase import Command
from regiondiff.config import RunConfigFile
from regiondiff.containerbase import JSONFile
from regiondiff.metrics import format_comparison, score
from regiondiff.sampler import segment_dataset
from regiondiff.synthdata import count_classes
from regiondiff.trainer import (
    find_latest_checkpoint, load_inference_model, train_loop,
    validation_loss)
from regiondiff.unet import VARIANTS
from regiondiff.paths import get_ablate_dir, get_checkpoint_dir
from regiondiff.exceptions import ConfigError


class AblateCommand(Command):
    """Run the "ablate" command.

    Every decoding scheme is trained under the same seed, data and budget in
    its own subdirectory, then compared on held-out segmentation and
    denoising loss. Interrupted runs resume per scheme.

    Attributes:
        variants: The decoding schemes to compare.
    """
    name = "ablate"

    def __init__(self, config: RunConfigFile,
                 variants: Optional[Sequence[str]] = None,
                 progress=True) -> None:
        super().__init__(config, progress)
        self.variants = list(variants or VARIANTS)
        for variant in self.variants:
            if variant not in VARIANTS:
                raise ConfigError(
                    "model.variant: must be one of {}".format(
                        ", ".join(VARIANTS)), field="model.variant")

    def main(self) -> None:
        train_set, heldout = self.load_data()
        if heldout.masks is None or not len(heldout):
            raise ConfigError(
                "data.heldout: the comparison needs labeled held-out images",
                field="data.heldout")
        train_config = self.config.train_config()
        schedule = self.config.schedule()
        t_seg = self.config.t_seg(schedule.T)
        batch_size = train_config.batch_size
        self.prepare_run({"variants": self.variants, "t_seg": t_seg})

        labels = heldout.labels()
        num_classes = count_classes(train_set, heldout)
        rows = []
        results = {}
        for variant in self.variants:
            print("Training the '{}' decoding scheme".format(variant))
            variant_dir = get_ablate_dir(self.run_dir, variant)
            train_loop(
                train_config, train_set.images(), schedule,
                self.config.arch_spec(variant=variant), variant_dir,
                progress=self.progress)

            model, _ = load_inference_model(find_latest_checkpoint(
                get_checkpoint_dir(variant_dir)))
            model.to(train_config.device)
            segmentation = segment_dataset(
                heldout.images(), t_seg, model, schedule, self.config.seed,
                batch_size=batch_size)
            report = score(
                segmentation, labels, fg_classes=range(1, num_classes),
                dice_mode=self.config.vals["eval.dice_mode"],
                K_gt=num_classes)
            val_loss = validation_loss(
                model, heldout.images(), schedule, self.config.seed,
                batch_size=batch_size)
            rows.append((variant, report.iou, report.miou, val_loss))
            results[variant] = {
                "segmentation": report.to_dict(),
                "validation_loss": val_loss}

        print(format_comparison(rows))
        comparison = JSONFile(
            os.path.join(get_ablate_dir(self.run_dir), "comparison.json"))
        comparison.vals = {
            "t_seg": t_seg, "steps": train_config.total_iters,
            "variants": results}
        comparison.write()