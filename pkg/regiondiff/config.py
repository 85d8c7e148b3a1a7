"""The run configuration and its typed views.

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
import re
from typing import Any, Dict, Iterable, Optional

from regiondiff.containerbase import ConfigFile
from regiondiff.diffusion import (
    NoiseSchedule, SIGMA_MODES, build_linear_schedule, terminal_snr_beta_end)
from regiondiff.unet import ArchSpec, VARIANTS
from regiondiff.trainer import TrainConfig
from regiondiff.synthdata import SceneSpec, REGION_MODELS
from regiondiff.sampler import default_t_seg
from regiondiff.metrics import DICE_MODES
from regiondiff.utils import DictProperty
from regiondiff.exceptions import ConfigError, InputError

INT_REGEX = re.compile(r"^-?[0-9]+$")
FLOAT_REGEX = re.compile(r"^[-+]?([0-9]+\.?[0-9]*|\.[0-9]+)([eE][-+]?[0-9]+)?$")
INT_LIST_REGEX = re.compile(r"^[0-9]+(\s*,\s*[0-9]+)*$")


class RunConfigFile(ConfigFile):
    """The configuration of a run.

    Every recognized key has a default, so a config file only needs to list
    the values it changes. Values are kept as strings; the typed views
    convert them into the objects the rest of the program uses.

    Attributes:
        TRUE_VALS: A list of strings that are recognized as boolean true.
        FALSE_VALS: A list of strings that are recognized as boolean false.
        _defaults: The default string value of every recognized key.
        _int_keys: Keys that must be integers.
        _positive_keys: Integer keys that must be at least one.
        _float_keys: Keys that must be numbers.
        _bool_keys: Keys that must have boolean values.
        _choice_keys: Keys that must be one of a fixed set of strings.
        path: The path of the configuration file, or None.
        raw_vals: A dictionary of raw config value strings.
        vals: A dict property of config values falling back to defaults.
    """
    TRUE_VALS = ["yes", "true"]
    FALSE_VALS = ["no", "false"]
    _defaults = {
        "diffusion.T": "200",
        "diffusion.beta_start": "1e-4",
        "diffusion.beta_end": "auto",
        "diffusion.sigma_mode": "beta",
        "model.base_channels": "32",
        "model.stage_multipliers": "1,2,3,4",
        "model.res_blocks_per_stage": "2",
        "model.num_regions": "3",
        "model.img_channels": "3",
        "model.resolution": "32",
        "model.time_embed_dim": "auto",
        "model.attention_at_lowest": "no",
        "model.variant": "shared",
        "train.lr": "1e-4",
        "train.ema_rate": "0.9999",
        "train.batch_size": "64",
        "train.total_iters": "20000",
        "train.grad_clip_norm": "none",
        "train.precision": "f32",
        "train.checkpoint_every": "1000",
        "train.log_every": "100",
        "train.adam_beta1": "0.9",
        "train.adam_beta2": "0.999",
        "train.adam_eps": "1e-8",
        "train.device": "cpu",
        "data.source": "synthetic",
        "data.num_images": "4000",
        "data.region_model": "fg_bg",
        "data.heldout": "400",
        "data.flip": "no",
        "eval.t_seg": "auto",
        "eval.seg_draws": "1",
        "eval.dice_mode": "symmetric",
        "eval.num_generated": "256",
        "eval.refseg_iters": "2000",
        "eval.verbose": "no",
        "io.soft_masks": "no",
        "io.montage_columns": "8",
        "io.record_every": "0",
        "seed": "0",
        "out": "runs/default",
        "deterministic": "no",
        }
    _all_keys = sorted(_defaults)
    _int_keys = [
        "diffusion.T", "model.base_channels", "model.res_blocks_per_stage",
        "model.num_regions", "model.img_channels", "model.resolution",
        "train.batch_size", "train.total_iters", "train.checkpoint_every",
        "train.log_every", "data.num_images", "data.heldout",
        "eval.seg_draws", "eval.num_generated", "eval.refseg_iters",
        "io.montage_columns", "io.record_every", "seed"
        ]
    _positive_keys = [
        "diffusion.T", "model.base_channels", "model.res_blocks_per_stage",
        "model.num_regions", "model.img_channels", "model.resolution",
        "train.batch_size", "train.checkpoint_every", "train.log_every",
        "eval.seg_draws", "eval.num_generated", "io.montage_columns"
        ]
    _float_keys = [
        "diffusion.beta_start", "train.lr", "train.ema_rate",
        "train.adam_beta1", "train.adam_beta2", "train.adam_eps"
        ]
    _bool_keys = [
        "model.attention_at_lowest", "data.flip", "eval.verbose",
        "io.soft_masks", "deterministic"
        ]
    _choice_keys = {
        "diffusion.sigma_mode": SIGMA_MODES,
        "model.variant": VARIANTS,
        "train.precision": ("f32",),
        "data.region_model": REGION_MODELS,
        "eval.dice_mode": DICE_MODES,
        }

    def __init__(self, path: Optional[str] = None) -> None:
        super().__init__(path)

    def set_overrides(self, assignments: Iterable[str]) -> None:
        """Apply "key=value" assignments from the command line.

        Raises:
            InputError: An assignment has no "=".
        """
        for assignment in assignments:
            if self.SEPARATOR not in assignment:
                raise InputError(
                    "expected key=value, got '{}'".format(assignment))
        self.parse_lines(assignments)

    def check_value(self, key: str, value: str) -> Optional[str]:
        """Check the syntax of a config option and return an error message.

        Args:
            key: The name of the config option to check.
            value: The value of the config option to check.

        Returns:
            A string corresponding to the syntax error (if any).
        """
        if not value:
            return "must not be blank"

        if key in self._int_keys:
            if not INT_REGEX.search(value):
                return "must be an integer"
            if int(value) < 0:
                return "must not be negative"
            if key in self._positive_keys and int(value) < 1:
                return "must be at least 1"
        elif key in self._float_keys:
            if not FLOAT_REGEX.search(value):
                return "must be a number"
        elif key in self._bool_keys:
            if value.lower() not in (self.TRUE_VALS + self.FALSE_VALS):
                return "must have a boolean value"
        elif key in self._choice_keys:
            if value not in self._choice_keys[key]:
                return "must be one of {}".format(
                    ", ".join(self._choice_keys[key]))
        elif key == "diffusion.beta_end":
            if value != "auto" and not FLOAT_REGEX.search(value):
                return "must be a number or 'auto'"
        elif key == "model.stage_multipliers":
            if not INT_LIST_REGEX.search(value):
                return "must be a comma-separated list of integers"
        elif key == "model.time_embed_dim":
            if value != "auto" and not INT_REGEX.search(value):
                return "must be an integer or 'auto'"
        elif key == "train.grad_clip_norm":
            if value != "none" and not FLOAT_REGEX.search(value):
                return "must be a number or 'none'"
        elif key == "eval.t_seg":
            if value != "auto" and not INT_REGEX.search(value):
                return "must be an integer or 'auto'"

    def check_all(self, context="config") -> None:
        """Check that every option is recognized and syntactically correct.

        Args:
            context: The context to show in the error messages.

        Raises:
            ConfigError: There were unrecognized or invalid options.
        """
        parse_errors = []
        first_field = None

        unrecognized_keys = self.raw_vals.keys() - set(self._all_keys)
        for key in sorted(unrecognized_keys):
            parse_errors.append(
                "{0}: unrecognized option '{1}'".format(context, key))
            first_field = first_field or key

        for key, value in sorted(self.raw_vals.items()):
            if key in unrecognized_keys:
                continue
            err_msg = self.check_value(key, value)
            if err_msg:
                parse_errors.append(
                    "{0}: '{1}' {2}".format(context, key, err_msg))
                first_field = first_field or key

        if parse_errors:
            raise ConfigError(*parse_errors, field=first_field)

    @DictProperty
    def vals(self, key: str) -> Any:
        """Get defaults if corresponding raw values are unset."""
        if key in self.raw_vals:
            return self.raw_vals[key]
        elif key in self._defaults:
            return self._defaults[key]

    @vals.setter
    def vals(self, key: str, value: str) -> None:
        """Set individual config values."""
        self.raw_vals[key] = value

    def effective(self) -> Dict[str, str]:
        """Get every option with defaults filled in."""
        return {key: self.vals[key] for key in self._all_keys}

    def get_bool(self, key: str) -> bool:
        return self.vals[key].lower() in self.TRUE_VALS

    def get_int(self, key: str) -> int:
        return int(self.vals[key])

    def get_float(self, key: str) -> float:
        return float(self.vals[key])

    @property
    def seed(self) -> int:
        return self.get_int("seed")

    @property
    def out(self) -> str:
        return self.vals["out"]

    @property
    def deterministic(self) -> bool:
        return self.get_bool("deterministic")

    def arch_spec(self, variant: Optional[str] = None) -> ArchSpec:
        """Get the architecture of the model.

        Raises:
            ConfigError: The values break an architecture invariant.
        """
        embed = self.vals["model.time_embed_dim"]
        return ArchSpec(
            base_channels=self.get_int("model.base_channels"),
            stage_multipliers=tuple(
                int(m) for m in self.vals["model.stage_multipliers"].split(",")),
            res_blocks_per_stage=self.get_int("model.res_blocks_per_stage"),
            num_regions=self.get_int("model.num_regions"),
            img_channels=self.get_int("model.img_channels"),
            resolution=self.get_int("model.resolution"),
            time_embed_dim=0 if embed == "auto" else int(embed),
            attention_at_lowest=self.get_bool("model.attention_at_lowest"),
            variant=variant or self.vals["model.variant"])

    def train_config(self) -> TrainConfig:
        """Get the optimization settings."""
        clip = self.vals["train.grad_clip_norm"]
        return TrainConfig(
            lr=self.get_float("train.lr"),
            ema_rate=self.get_float("train.ema_rate"),
            batch_size=self.get_int("train.batch_size"),
            total_iters=self.get_int("train.total_iters"),
            seed=self.seed,
            grad_clip_norm=None if clip == "none" else float(clip),
            precision=self.vals["train.precision"],
            checkpoint_every=self.get_int("train.checkpoint_every"),
            log_every=self.get_int("train.log_every"),
            adam_betas=(
                self.get_float("train.adam_beta1"),
                self.get_float("train.adam_beta2")),
            adam_eps=self.get_float("train.adam_eps"),
            flip=self.get_bool("data.flip"),
            device=self.vals["train.device"])

    def scene_spec(self) -> SceneSpec:
        """Get the distribution of generated scenes."""
        return SceneSpec(
            resolution=self.get_int("model.resolution"),
            num_images=self.get_int("data.num_images"),
            region_model=self.vals["data.region_model"],
            seed=self.seed)

    def schedule(self) -> NoiseSchedule:
        """Get the noise schedule.

        With beta_end set to "auto", beta_end is chosen so that the signal
        left at t = T matches the 1000-step reference schedule.
        """
        T = self.get_int("diffusion.T")
        beta_start = self.get_float("diffusion.beta_start")
        beta_end = self.vals["diffusion.beta_end"]
        if beta_end == "auto":
            if T < 2:
                raise ConfigError(
                    "diffusion.T: must be an integer of at least 2",
                    field="diffusion.T")
            beta_end = terminal_snr_beta_end(T, beta_start)
        return build_linear_schedule(
            T, beta_start, float(beta_end),
            sigma_mode=self.vals["diffusion.sigma_mode"])

    def t_seg(self, T: int) -> int:
        """Get the segmentation timestep for a T-step schedule."""
        value = self.vals["eval.t_seg"]
        return default_t_seg(T) if value == "auto" else int(value)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                **flags: Any) -> RunConfigFile:
    """Build the effective configuration of a run.

    Later sources take precedence: the defaults, then the config file, then
    "--set" assignments, then dedicated command-line flags.

    Args:
        path: The path of a config file, if any.
        overrides: "key=value" assignments.
        flags: Values of dedicated flags, keyed by config key. None values
            are ignored.

    Raises:
        FileIOError: The config file could not be read.
        ConfigError: There were unrecognized or invalid options.
    """
    config = RunConfigFile(path)
    if path is not None:
        config.read()
        config.check_all(context=path)
    config.set_overrides(overrides)
    for key, value in flags.items():
        if value is None:
            continue
        if isinstance(value, bool):
            value = "yes" if value else "no"
        config.vals[key] = str(value)
    config.check_all()
    return config
