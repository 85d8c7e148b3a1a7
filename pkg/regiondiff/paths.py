"""The layout of a run's output directory.

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


def get_checkpoint_dir(run_dir):
    return os.path.join(run_dir, "checkpoints")


def get_loss_log_path(run_dir):
    return os.path.join(run_dir, "loss.csv")


def get_config_echo_path(run_dir):
    return os.path.join(run_dir, "config.echo")


def get_run_info_path(run_dir):
    return os.path.join(run_dir, "run.json")


def get_data_dir(run_dir):
    return os.path.join(run_dir, "data")


def get_segment_dir(run_dir):
    return os.path.join(run_dir, "segment")


def get_generate_dir(run_dir):
    return os.path.join(run_dir, "generate")


def get_eval_dir(run_dir):
    return os.path.join(run_dir, "eval")


def get_ablate_dir(run_dir, variant=None):
    if variant is None:
        return os.path.join(run_dir, "ablate")
    return os.path.join(run_dir, "ablate", variant)
