"""A class for the 'train' command.

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
from regiondiff.commandbase import Command
from regiondiff.trainer import LossLog, train_loop
from regiondiff.unet import count_parameters
from regiondiff.paths import get_checkpoint_dir, get_loss_log_path


class TrainCommand(Command):
    """Run the "train" command.

    Training resumes from the latest checkpoint in the run directory.
    """
    name = "train"

    def main(self) -> None:
        train_set, _ = self.load_data()
        arch = self.config.arch_spec()
        train_config = self.config.train_config()
        schedule = self.config.schedule()
        self.prepare_run({
            "dataset": {
                "source": train_set.manifest["source"],
                "count": len(train_set),
                "checksum": train_set.manifest["checksum"]}})

        print("Training on {0} images for {1} steps ({2}, T={3})".format(
            len(train_set), train_config.total_iters, arch.variant,
            schedule.T))
        state = train_loop(
            train_config, train_set.images(), schedule, arch, self.run_dir,
            progress=self.progress)

        records = LossLog(get_loss_log_path(self.run_dir)).read()
        last_loss = "{:.4f}".format(records[-1][1]) if records else "-"
        print("Finished at step {0} with loss {1}; {2} parameters".format(
            state.step, last_loss, count_parameters(state.model)))
        print("Checkpoints are in '{}'".format(
            get_checkpoint_dir(self.run_dir)))
