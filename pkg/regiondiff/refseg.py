"""A supervised segmenter used as the reference for generated masks.

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
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from regiondiff.unet import ArchSpec, Encoder, MidBlock, Decoder
from regiondiff.trainer import batch_indices
from regiondiff.exceptions import NumericalError, RangeError, ShapeError

logger = logging.getLogger(__name__)


class ReferenceSegmenter(nn.Module):
    """A plain U-Net that predicts class logits from clean images.

    It is built from the same blocks as the diffusion model. The timestep
    embedding is held at t = 0.
    """
    def __init__(self, spec: ArchSpec, num_classes: int) -> None:
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        self.encoder = Encoder(spec)
        self.mid_block = MidBlock(spec)
        self.decoder = Decoder(spec, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = torch.zeros(x.shape[0], dtype=torch.long, device=x.device)
        temb = self.encoder.embed_time(t)
        skips = self.encoder(x, temb)
        return self.decoder(self.mid_block(skips[-1], temb), skips, temb)

    def predict(self, images: torch.Tensor, batch_size=64) -> torch.Tensor:
        """Label every pixel of a set of images."""
        device = next(self.parameters()).device
        self.eval()
        labels = []
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                batch = images[start:start + batch_size].to(device)
                labels.append(self(batch).argmax(dim=1).cpu())
        if not labels:
            size = self.spec.resolution
            return torch.zeros((0, size, size), dtype=torch.long)
        return torch.cat(labels)


def train_reference_segmenter(
        images: torch.Tensor, labels: torch.Tensor, spec: ArchSpec,
        num_classes: int, iters: int, batch_size=64, lr=1e-3, seed=0,
        progress=True) -> ReferenceSegmenter:
    """Train a reference segmenter with cross-entropy on true labels.

    Args:
        images: Clean images in [-1, 1] shaped (N, C, H, W).
        labels: True labels shaped (N, H, W).
        spec: The architecture of the blocks.
        num_classes: The number of true classes.
        iters: The number of optimizer steps.
        batch_size: The number of images per step.
        lr: The learning rate.
        seed: The seed for initialization and minibatch order.
        progress: Show a progress bar.

    Raises:
        RangeError: There are no training images.
        ShapeError: The labels don't match the images.
        NumericalError: The loss isn't finite.
    """
    if images.shape[0] == 0:
        raise RangeError("the reference segmenter needs training images")
    if labels.shape != (images.shape[0],) + tuple(images.shape[2:]):
        raise ShapeError(
            "label shape mismatch: expected {0}, got {1}".format(
                (images.shape[0],) + tuple(images.shape[2:]),
                tuple(labels.shape)))
    if int(labels.max()) >= num_classes or int(labels.min()) < 0:
        raise RangeError(
            "labels must be in [0, {}]".format(num_classes - 1))

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ReferenceSegmenter(spec, num_classes)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)

    model.train()
    for step in tqdm(range(iters), disable=not progress, unit="step",
                     desc="reference", dynamic_ncols=True):
        indices = torch.from_numpy(batch_indices(
            images.shape[0], batch_size, seed, step))
        logits = model(images[indices])
        loss = F.cross_entropy(logits, labels[indices].long())
        if not torch.isfinite(loss):
            raise NumericalError(
                "non-finite reference segmenter loss at step {}".format(step),
                snapshot={"step": step, "loss": float(loss)})
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 500 == 0:
            logger.debug("reference segmenter step %d: loss %.4f",
                         step, float(loss))
    return model.eval()
