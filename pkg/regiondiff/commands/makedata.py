"""A class for the 'make-data' command.

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
from regiondiff.synthdata import generate_dataset, save_dataset
from regiondiff.imagefiles import write_montage
from regiondiff.paths import get_data_dir

PREVIEW_IMAGES = 32


class MakeDataCommand(Command):
    """Run the "make-data" command.

    Attributes:
        output: The directory to write the dataset to.
    """
    name = "make-data"

    def __init__(self, config: RunConfigFile, output: Optional[str] = None,
                 progress=True) -> None:
        super().__init__(config, progress)
        self.output = output or get_data_dir(self.run_dir)

    def main(self) -> None:
        dataset = generate_dataset(self.config.scene_spec())
        self.prepare_run({"dataset": self.output})
        save_dataset(dataset, self.output)
        if len(dataset):
            write_montage(
                os.path.join(self.run_dir, "data-preview.png"),
                dataset.pixels[:PREVIEW_IMAGES],
                dataset.masks[:PREVIEW_IMAGES],
                columns=self.config.get_int("io.montage_columns"))
        print("Wrote {0} images to '{1}' (checksum {2})".format(
            len(dataset), self.output, dataset.manifest["checksum"][:16]))
