"""End-to-end training of the factorized denoiser and its checkpoints.

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
import re
import copy
import json
import time
import struct
import logging
import dataclasses
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from regiondiff.diffusion import (
    NoiseSchedule, forward_diffuse, sample_timesteps)
from regiondiff.unet import ArchSpec, FactorizedUNet, build_model
from regiondiff.containerbase import JSONFile
from regiondiff.paths import get_checkpoint_dir, get_loss_log_path
from regiondiff.utils import atomic_write
from regiondiff.exceptions import (
    ConfigError, RangeError, NumericalError, FileIOError, CheckpointError,
    VersionMismatchError, ShapeMismatchError, TruncatedFileError)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RDIFFCKP"
CHECKPOINT_VERSION = 1
CHECKPOINT_REGEX = re.compile(r"^ckpt-([0-9]{8})\.rdc$")
# Magic, format version, manifest length.
HEADER_STRUCT = struct.Struct("<8sIQ")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    Attributes:
        lr: The Adam learning rate. Constant for the whole run.
        ema_rate: The decay of the exponential moving average of the weights.
        batch_size: The number of images per step.
        total_iters: The number of optimizer steps to run.
        seed: Seeds model initialization, noise, timesteps and shuffling.
        grad_clip_norm: Clip the global gradient norm to this value, or None.
        precision: The parameter precision. Only "f32" is supported.
        checkpoint_every: Write a checkpoint every this many steps.
        log_every: Write a loss record every this many steps.
        adam_betas: The Adam moment decay rates.
        adam_eps: The Adam denominator epsilon.
        flip: Randomly flip training images horizontally.
        device: The torch device to train on.
    """
    lr: float = 1e-4
    ema_rate: float = 0.9999
    batch_size: int = 64
    total_iters: int = 20000
    seed: int = 0
    grad_clip_norm: Optional[float] = None
    precision: str = "f32"
    checkpoint_every: int = 1000
    log_every: int = 100
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    flip: bool = False
    device: str = "cpu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if not self.lr > 0:
            raise ConfigError("train.lr: must be positive", field="train.lr")
        if not 0 < self.ema_rate < 1:
            raise ConfigError(
                "train.ema_rate: must be in (0, 1)", field="train.ema_rate")
        if self.batch_size < 1:
            raise ConfigError(
                "train.batch_size: must be at least 1",
                field="train.batch_size")
        if self.total_iters < 0:
            raise ConfigError(
                "train.total_iters: must not be negative",
                field="train.total_iters")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ConfigError(
                "train.grad_clip_norm: must be positive or none",
                field="train.grad_clip_norm")
        if self.precision != "f32":
            raise ConfigError(
                "train.precision: only f32 is supported",
                field="train.precision")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError(
                "train.checkpoint_every and train.log_every: must be at "
                "least 1", field="train.checkpoint_every")

    def to_dict(self) -> Dict:
        vals = dataclasses.asdict(self)
        vals["adam_betas"] = list(self.adam_betas)
        return vals

    @classmethod
    def from_dict(cls, vals: Dict) -> "TrainConfig":
        names = {field.name for field in dataclasses.fields(cls)}
        return cls(**{key: val for key, val in vals.items() if key in names})


@dataclasses.dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped.

    Attributes:
        step: The number of optimizer steps taken so far.
        model: The raw weights, updated by the optimizer.
        ema_model: The exponential moving average of the weights. Used for
            all inference.
        optimizer: The Adam optimizer holding the moment estimates.
        generator: The random stream for timesteps and noise.
        config: The optimization settings.
        schedule: The noise schedule the model is trained under, or None
            before training starts.
    """
    step: int
    model: FactorizedUNet
    ema_model: FactorizedUNet
    optimizer: torch.optim.Adam
    generator: torch.Generator
    config: TrainConfig
    schedule: Optional[NoiseSchedule] = None

    @property
    def arch(self) -> ArchSpec:
        return self.model.spec


def init_state(arch: ArchSpec, config: TrainConfig) -> TrainState:
    """Create a freshly initialized training state."""
    model = build_model(arch, seed=config.seed).to(config.device)
    ema_model = copy.deepcopy(model)
    ema_model.requires_grad_(False)
    generator = torch.Generator()
    generator.manual_seed(config.seed)
    return TrainState(
        step=0, model=model, ema_model=ema_model,
        optimizer=_make_optimizer(model, config), generator=generator,
        config=config)


def _make_optimizer(model: FactorizedUNet,
                    config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=config.lr, betas=config.adam_betas,
        eps=config.adam_eps)


def update_ema(ema_model: torch.nn.Module, model: torch.nn.Module,
               rate: float) -> None:
    """Move the averaged weights toward the raw weights.

    ema <- rate * ema + (1 - rate) * weights
    """
    with torch.no_grad():
        for ema_param, param in zip(
                ema_model.parameters(), model.parameters()):
            ema_param.mul_(rate).add_(param, alpha=1 - rate)


def denoising_loss(model: FactorizedUNet, x0: torch.Tensor, t: torch.Tensor,
                   eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """The mean squared error between the injected and predicted noise.

    This is the only training objective; there are no mask terms.
    """
    x_t = forward_diffuse(x0, t, eps, schedule)
    eps_hat, _ = model.predict_noise(x_t, t.to(x0.device))
    return F.mse_loss(eps_hat, eps)


def validation_loss(model: FactorizedUNet, images: torch.Tensor,
                    schedule: NoiseSchedule, seed: int,
                    batch_size=64) -> float:
    """The denoising loss of held-out images, averaged over images.

    Timesteps and noise come from a generator seeded with the seed, so
    different models are compared on identical draws.
    """
    if images.shape[0] == 0:
        raise RangeError("the validation set is empty")
    generator = torch.Generator()
    generator.manual_seed(seed)
    device = next(model.parameters()).device
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = images[start:start + batch_size]
            t = sample_timesteps(batch.shape[0], schedule.T, generator)
            eps = torch.randn(batch.shape, generator=generator)
            loss = denoising_loss(
                model, batch.to(device), t, eps.to(device), schedule)
            total += float(loss) * batch.shape[0]
    return total / images.shape[0]


def train_step(state: TrainState, batch: torch.Tensor,
               schedule: NoiseSchedule) -> Tuple[TrainState, float]:
    """Take one optimizer step on a batch of clean images.

    Timesteps and noise are drawn from the state's generator, so the step is
    reproducible from the state alone.

    Returns:
        The updated state and the loss before the update.

    Raises:
        RangeError: The batch isn't in [-1, 1].
        NumericalError: The loss or the updated weights aren't finite.
    """
    if batch.numel() and float(batch.abs().max()) > 1 + 1e-6:
        raise RangeError("training images must be in [-1, 1]")
    model = state.model
    model.train()
    device = next(model.parameters()).device

    t = sample_timesteps(batch.shape[0], schedule.T, state.generator)
    eps = torch.randn(batch.shape, generator=state.generator)
    loss = denoising_loss(
        model, batch.to(device), t, eps.to(device), schedule)

    loss_value = float(loss.detach())
    if not np.isfinite(loss_value):
        raise NumericalError(
            "non-finite loss at step {0} (t={1}, loss={2})".format(
                state.step + 1, t.tolist(), loss_value),
            snapshot={
                "step": state.step + 1, "t": t.tolist(), "loss": loss_value})

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if state.config.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(
            model.parameters(), state.config.grad_clip_norm)
    state.optimizer.step()
    update_ema(state.ema_model, model, state.config.ema_rate)
    state.step += 1

    for name, param in model.named_parameters():
        if not bool(torch.isfinite(param).all()):
            raise NumericalError(
                "non-finite weights in '{0}' after step {1}".format(
                    name, state.step),
                snapshot={
                    "step": state.step, "t": t.tolist(), "loss": loss_value})

    return state, loss_value


def batch_indices(num_images: int, batch_size: int, seed: int,
                  step: int) -> np.ndarray:
    """Get the dataset indices of the minibatch for a step.

    Each epoch visits the dataset in a fresh permutation. The permutation is
    a pure function of the seed and the epoch, so resuming at any step sees
    the same batches as an uninterrupted run.
    """
    per_epoch = max(1, num_images // batch_size)
    epoch, index = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(num_images)
    return order[index * batch_size:(index + 1) * batch_size]


def get_batch(images: torch.Tensor, config: TrainConfig,
              step: int) -> torch.Tensor:
    """Select the minibatch for a step, flipping it if configured to."""
    indices = batch_indices(
        images.shape[0], config.batch_size, config.seed, step)
    batch = images[torch.from_numpy(indices)]
    if config.flip:
        flips = np.random.default_rng([config.seed, step, 1]).random(
            len(indices)) < 0.5
        batch[torch.from_numpy(flips)] = batch[
            torch.from_numpy(flips)].flip(-1)
    return batch


def train_loop(config: TrainConfig, images: torch.Tensor,
               schedule: NoiseSchedule, arch: ArchSpec, run_dir: str,
               progress=True) -> TrainState:
    """Train for config.total_iters steps, resuming if possible.

    If the run directory already contains checkpoints, training continues
    from the latest one. Otherwise a fresh state is initialized and written
    as the step 0 checkpoint.

    Args:
        config: The optimization settings.
        images: The training images shaped (N, channels, res, res).
        schedule: The noise schedule.
        arch: The architecture of the model.
        run_dir: The directory for checkpoints and the loss log.
        progress: Show a progress bar.

    Raises:
        RangeError: The dataset is empty.
        ConfigError: The run was started under a different schedule.
    """
    if images.shape[0] == 0:
        raise RangeError("the training dataset is empty")

    checkpoint_dir = get_checkpoint_dir(run_dir)
    latest = find_latest_checkpoint(checkpoint_dir)
    if latest:
        state = load_checkpoint(latest, arch=arch, config=config)
        if state.schedule is not None and not state.schedule.matches(schedule):
            raise ConfigError(
                "diffusion: '{0}' was trained with {1}, not {2}".format(
                    latest, state.schedule, schedule), field="diffusion.T")
        state.schedule = schedule
        logger.info("resuming from %s at step %d", latest, state.step)
    else:
        state = init_state(arch, config)
        state.schedule = schedule
        save_checkpoint(state, checkpoint_path(checkpoint_dir, 0))

    loss_log = LossLog(get_loss_log_path(run_dir))
    loss_log.truncate(state.step)
    loss_log.write_sidecar(config, arch, schedule)

    start_time = time.monotonic()
    bar = tqdm(
        total=config.total_iters, initial=min(state.step, config.total_iters),
        disable=not progress, unit="step", dynamic_ncols=True)
    try:
        while state.step < config.total_iters:
            batch = get_batch(images, config, state.step)
            state, loss = train_step(state, batch, schedule)
            bar.update(1)

            if state.step % config.log_every == 0:
                loss_log.append(
                    state.step, loss, time.monotonic() - start_time)
                bar.set_postfix(loss="{:.4f}".format(loss))
            if (state.step % config.checkpoint_every == 0
                    or state.step == config.total_iters):
                save_checkpoint(
                    state, checkpoint_path(checkpoint_dir, state.step))
    finally:
        bar.close()

    return state


class LossLog:
    """The line-delimited training log with a JSON sidecar.

    Each record is a line "step,loss,seconds".

    Attributes:
        path: The path of the log file.
    """
    def __init__(self, path: str) -> None:
        self.path = path

    def read(self) -> List[Tuple[int, float, float]]:
        """Read all records from the log."""
        records = []
        try:
            with open(self.path) as file:
                for line in file:
                    step, loss, seconds = line.strip().split(",")
                    records.append((int(step), float(loss), float(seconds)))
        except FileNotFoundError:
            pass
        except (OSError, ValueError):
            raise FileIOError("could not read '{}'".format(self.path))
        return records

    def truncate(self, step: int) -> None:
        """Drop records written after a step, e.g. before resuming."""
        records = [record for record in self.read() if record[0] <= step]
        with atomic_write(self.path, "w") as file:
            for record in records:
                file.write(self._format(*record))

    def append(self, step: int, loss: float, seconds: float) -> None:
        try:
            with open(self.path, "a") as file:
                file.write(self._format(step, loss, seconds))
        except OSError as e:
            raise FileIOError("could not write '{0}': {1}".format(
                self.path, e.strerror))

    @staticmethod
    def _format(step: int, loss: float, seconds: float) -> str:
        return "{0},{1!r},{2:.3f}\n".format(step, loss, seconds)

    def write_sidecar(self, config: TrainConfig, arch: ArchSpec,
                      schedule: NoiseSchedule) -> None:
        """Write the structured description of the run next to the log."""
        sidecar = JSONFile(os.path.splitext(self.path)[0] + ".json")
        sidecar.vals = {
            "columns": ["step", "loss", "seconds"],
            "train": config.to_dict(),
            "model": arch.to_dict(),
            "diffusion": {
                "T": schedule.T,
                "beta_start": float(schedule.beta[0]),
                "beta_end": float(schedule.beta[-1]),
                "sigma_mode": schedule.sigma_mode}}
        sidecar.write()


def checkpoint_path(checkpoint_dir: str, step: int) -> str:
    """Get the path of the checkpoint for a step."""
    return os.path.join(checkpoint_dir, "ckpt-{:08d}.rdc".format(step))


def find_latest_checkpoint(checkpoint_dir: str) -> Optional[str]:
    """Get the path of the checkpoint with the highest step, if any."""
    try:
        entries = os.listdir(checkpoint_dir)
    except FileNotFoundError:
        return None
    except OSError as e:
        raise FileIOError("could not read '{0}': {1}".format(
            checkpoint_dir, e.strerror))
    steps = [
        int(match.group(1)) for match in map(CHECKPOINT_REGEX.match, entries)
        if match]
    if not steps:
        return None
    return checkpoint_path(checkpoint_dir, max(steps))


def _state_tensors(state: TrainState) -> List[Tuple[str, torch.Tensor]]:
    """List every tensor in a training state in a fixed order."""
    tensors = []
    for prefix, model in (("raw", state.model), ("ema", state.ema_model)):
        for name, param in model.named_parameters():
            tensors.append(("{0}/{1}".format(prefix, name), param))
    for name, param in state.model.named_parameters():
        param_state = state.optimizer.state.get(param)
        if param_state:
            tensors.append(("adam_m/" + name, param_state["exp_avg"]))
            tensors.append(("adam_v/" + name, param_state["exp_avg_sq"]))
    tensors.append(("rng/generator", state.generator.get_state()))
    return tensors


def _adam_step(state: TrainState) -> int:
    for param_state in state.optimizer.state.values():
        return int(param_state["step"])
    return 0


def save_checkpoint(state: TrainState, path: str) -> None:
    """Write a training state to a self-describing archive.

    The archive is a fixed header (magic, format version, manifest length),
    a JSON manifest, and the raw little-endian tensor data in manifest order.
    Floating point tensors are stored as 32-bit floats. The file is written
    to a temporary path and renamed into place.
    """
    entries = []
    payload = []
    offset = 0
    for name, tensor in _state_tensors(state):
        array = tensor.detach().cpu().contiguous().numpy()
        dtype = "|u1" if array.dtype == np.uint8 else "<f4"
        data = array.astype(dtype).tobytes()
        entries.append({
            "name": name, "dtype": dtype, "shape": list(array.shape),
            "offset": offset, "nbytes": len(data)})
        payload.append(data)
        offset += len(data)

    manifest = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "model": state.arch.to_dict(),
        "train": state.config.to_dict(),
        "schedule": (
            None if state.schedule is None else state.schedule.to_dict()),
        "step": state.step,
        "adam_step": _adam_step(state),
        "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()

    with atomic_write(path, "wb") as file:
        file.write(HEADER_STRUCT.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(manifest)))
        file.write(manifest)
        for data in payload:
            file.write(data)


def read_checkpoint_manifest(path: str) -> Tuple[Dict, bytes]:
    """Read and validate the header and manifest of a checkpoint.

    Returns:
        The manifest and the raw tensor data.

    Raises:
        FileIOError: The file could not be read.
        CheckpointError: The file isn't a checkpoint.
        VersionMismatchError: The format version isn't supported.
        TruncatedFileError: The file is shorter or longer than declared.
    """
    try:
        with open(path, "rb") as file:
            data = file.read()
    except OSError as e:
        raise FileIOError("could not read '{0}': {1}".format(
            path, e.strerror))

    if len(data) < HEADER_STRUCT.size:
        raise TruncatedFileError(
            "'{}': checkpoint header is truncated".format(path))
    magic, version, manifest_size = HEADER_STRUCT.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("'{}' is not a checkpoint file".format(path))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            "'{0}': checkpoint format version {1} is not supported "
            "(expected {2})".format(path, version, CHECKPOINT_VERSION))

    manifest_end = HEADER_STRUCT.size + manifest_size
    if len(data) < manifest_end:
        raise TruncatedFileError(
            "'{}': checkpoint manifest is truncated".format(path))
    try:
        manifest = json.loads(data[HEADER_STRUCT.size:manifest_end].decode())
    except ValueError:
        raise CheckpointError(
            "'{}': checkpoint manifest is corrupt".format(path))

    payload = data[manifest_end:]
    declared = sum(entry["nbytes"] for entry in manifest["tensors"])
    if len(payload) != declared:
        raise TruncatedFileError(
            "'{0}': expected {1} bytes of tensor data, found {2}".format(
                path, declared, len(payload)))
    for entry in manifest["tensors"]:
        itemsize = np.dtype(entry["dtype"]).itemsize
        if entry["nbytes"] != itemsize * int(np.prod(entry["shape"])):
            raise TruncatedFileError(
                "'{0}': tensor '{1}' has {2} bytes, expected {3}".format(
                    path, entry["name"], entry["nbytes"],
                    itemsize * int(np.prod(entry["shape"]))))
    return manifest, payload


def load_checkpoint(path: str, arch: Optional[ArchSpec] = None,
                    config: Optional[TrainConfig] = None) -> TrainState:
    """Load a training state from a checkpoint.

    Args:
        path: The path of the checkpoint.
        arch: The expected architecture. Defaults to the stored one.
        config: Optimization settings that replace the stored ones, e.g. a
            larger total_iters when continuing a run.

    Raises:
        ShapeMismatchError: A stored tensor doesn't fit the architecture or
            is missing.
    """
    manifest, payload = read_checkpoint_manifest(path)
    if arch is None:
        arch = ArchSpec.from_dict(manifest["model"])
    if config is None:
        config = TrainConfig.from_dict(manifest["train"])

    tensors = {}
    for entry in manifest["tensors"]:
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(
            entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.copy())

    state = init_state(arch, config)
    device = next(state.model.parameters()).device

    def fetch(name: str, like: torch.Tensor) -> torch.Tensor:
        if name not in tensors:
            raise ShapeMismatchError(
                "'{0}': tensor '{1}' is missing".format(path, name))
        tensor = tensors[name]
        if tuple(tensor.shape) != tuple(like.shape):
            raise ShapeMismatchError(
                "'{0}': tensor '{1}' has shape {2}, the architecture "
                "expects {3}".format(
                    path, name, tuple(tensor.shape), tuple(like.shape)))
        return tensor.to(device=device, dtype=like.dtype)

    with torch.no_grad():
        for prefix, model in (("raw", state.model), ("ema", state.ema_model)):
            for name, param in model.named_parameters():
                param.copy_(fetch("{0}/{1}".format(prefix, name), param))

    adam_step = manifest["adam_step"]
    if adam_step:
        for name, param in state.model.named_parameters():
            state.optimizer.state[param] = {
                "step": torch.tensor(float(adam_step)),
                "exp_avg": fetch("adam_m/" + name, param).clone(),
                "exp_avg_sq": fetch("adam_v/" + name, param).clone()}

    if "rng/generator" not in tensors:
        raise ShapeMismatchError(
            "'{}': the random generator state is missing".format(path))
    state.generator.set_state(tensors["rng/generator"])
    state.step = manifest["step"]
    if manifest.get("schedule") is not None:
        state.schedule = NoiseSchedule.from_dict(manifest["schedule"])
    return state


def load_inference_model(path: str) -> Tuple[FactorizedUNet, Dict]:
    """Load the averaged weights of a checkpoint for inference.

    Returns:
        The model in evaluation mode and the checkpoint manifest.
    """
    manifest, _ = read_checkpoint_manifest(path)
    model = load_checkpoint(path).ema_model
    model.eval()
    return model, manifest
