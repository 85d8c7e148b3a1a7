"""Code that is common to all commands.

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
import abc
import logging
import datetime
from typing import Dict, Optional, Tuple

import torch

from regiondiff.config import RunConfigFile
from regiondiff.containerbase import ConfigFile, JSONFile
from regiondiff.diffusion import NoiseSchedule
from regiondiff.synthdata import Dataset, generate_dataset, load_png_dir, split
from regiondiff.trainer import find_latest_checkpoint, load_inference_model
from regiondiff.unet import FactorizedUNet
from regiondiff.paths import (
    get_checkpoint_dir, get_config_echo_path, get_run_info_path)
from regiondiff.utils import seed_everything
from regiondiff.exceptions import ConfigError, FileIOError

logger = logging.getLogger(__name__)

DIFFUSION_PREFIX = "diffusion."


class Command(abc.ABC):
    """Base class for program commands.

    Attributes:
        name: The name of the command on the command line.
        config: The effective configuration of the run.
        run_dir: The directory that outputs are written to.
        progress: Show progress bars.
        generator: The random stream for the command, set by prepare_run().
    """
    name = None

    def __init__(self, config: RunConfigFile, progress=True) -> None:
        self.config = config
        self.run_dir = config.out
        self.progress = progress
        self.generator = None

    @abc.abstractmethod
    def main(self) -> None:
        """Run the command."""

    def prepare_run(self, extra_info: Optional[Dict] = None) -> None:
        """Seed the program and describe the run in its output directory.

        This writes the effective configuration as "config.echo" and the
        command, time and library versions as "run.json".
        """
        self.generator = seed_everything(
            self.config.seed, deterministic=self.config.deterministic)
        os.makedirs(self.run_dir, exist_ok=True)

        echo = ConfigFile(get_config_echo_path(self.run_dir))
        echo.write(
            self.config.effective(),
            header="Effective configuration of 'regiondiff {}'.".format(
                self.name))

        info = JSONFile(get_run_info_path(self.run_dir))
        info.vals = {
            "command": self.name,
            "started": datetime.datetime.utcnow().strftime(
                "%Y-%m-%dT%H:%M:%S"),
            "torch": torch.__version__,
            "seed": self.config.seed,
            "deterministic": self.config.deterministic}
        info.vals.update(extra_info or {})
        info.write()

    def load_data(self) -> Tuple[Dataset, Dataset]:
        """Get the training and held-out sets from the configured source.

        The source is either "synthetic" or a directory of PNG files.

        Raises:
            ConfigError: More images are held out than exist.
        """
        source = self.config.vals["data.source"]
        if source == "synthetic":
            dataset = generate_dataset(self.config.scene_spec())
        else:
            dataset = load_png_dir(
                os.path.expanduser(source),
                self.config.get_int("model.resolution"))

        heldout = self.config.get_int("data.heldout")
        if heldout > len(dataset):
            raise ConfigError(
                "data.heldout: {0} images requested but the dataset has "
                "{1}".format(heldout, len(dataset)), field="data.heldout")
        return split(dataset, heldout)

    def load_model(
            self, checkpoint: Optional[str]) -> Tuple[FactorizedUNet, Dict]:
        """Load the averaged weights for inference.

        Args:
            checkpoint: The path of a checkpoint, or None for the latest
                checkpoint in the run directory.

        Raises:
            FileIOError: There is no such checkpoint.
        """
        if checkpoint is None:
            checkpoint = find_latest_checkpoint(
                get_checkpoint_dir(self.run_dir))
            if checkpoint is None:
                raise FileIOError(
                    "no checkpoints found in '{}'".format(
                        get_checkpoint_dir(self.run_dir)))
        elif not os.path.isfile(checkpoint):
            raise FileIOError(
                "checkpoint '{}' does not exist".format(checkpoint))
        model, manifest = load_inference_model(checkpoint)
        return model.to(self.config.vals["train.device"]), manifest

    def load_schedule(self, manifest: Dict) -> NoiseSchedule:
        """Get the noise schedule that a checkpoint was trained under.

        Diffusion settings given in the config must agree with it. Without a
        stored schedule, the configured one is used.

        Raises:
            ConfigError: The configured schedule differs from the stored one.
        """
        if manifest.get("schedule") is None:
            logger.warning(
                "the checkpoint has no stored schedule; using the configured "
                "one")
            return self.config.schedule()

        schedule = NoiseSchedule.from_dict(manifest["schedule"])
        explicit = sorted(
            key for key in self.config.raw_vals
            if key.startswith(DIFFUSION_PREFIX))
        if explicit and not self.config.schedule().matches(schedule):
            raise ConfigError(
                "{0}: the checkpoint was trained with {1}".format(
                    explicit[0], schedule), field=explicit[0])
        return schedule
