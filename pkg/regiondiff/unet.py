"""The factorized denoising U-Net.

The network is split into four subnetworks: an encoder, a middle block, a
mask generator that reads out K soft region masks, and a region decoder. The
region decoder is applied once per region on skip features masked by that
region, and the K noise predictions are blended with the masks.

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
import math
import dataclasses
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from regiondiff.exceptions import ConfigError, RangeError, ShapeError

VARIANTS = ("shared", "concat", "mask_mid", "unshared")
SUBNETWORKS = ("enc", "mid", "mask", "dec")


@dataclasses.dataclass(frozen=True)
class ArchSpec:
    """The hyperparameters that determine the shape of the network.

    Attributes:
        base_channels: The channel count C of the highest-resolution stage.
        stage_multipliers: The channel multiplier of each stage, from highest
            to lowest resolution.
        res_blocks_per_stage: The number of residual blocks in each stage.
        num_regions: The number of region masks K.
        img_channels: The number of image channels.
        resolution: The height and width of the images.
        time_embed_dim: The width of the timestep embedding. Zero means 4C.
        attention_at_lowest: Add a self-attention block to the middle block.
        variant: The decoding scheme. "shared" is the weight-shared parallel
            decoder; the others are ablations.
    """
    base_channels: int = 32
    stage_multipliers: Tuple[int, ...] = (1, 2, 3, 4)
    res_blocks_per_stage: int = 2
    num_regions: int = 3
    img_channels: int = 3
    resolution: int = 32
    time_embed_dim: int = 0
    attention_at_lowest: bool = False
    variant: str = "shared"

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "stage_multipliers", tuple(self.stage_multipliers))
        self.validate()

    def validate(self) -> None:
        """Check the invariants of the architecture.

        Raises:
            ConfigError: An invariant doesn't hold.
        """
        if self.base_channels < 1:
            raise ConfigError(
                "model.base_channels: must be positive",
                field="model.base_channels")
        if not self.stage_multipliers or min(self.stage_multipliers) < 1:
            raise ConfigError(
                "model.stage_multipliers: must be a non-empty list of "
                "positive integers", field="model.stage_multipliers")
        if self.res_blocks_per_stage < 1:
            raise ConfigError(
                "model.res_blocks_per_stage: must be at least 1",
                field="model.res_blocks_per_stage")
        if self.num_regions < 1:
            raise ConfigError(
                "model.num_regions: must be at least 1",
                field="model.num_regions")
        if self.img_channels < 1:
            raise ConfigError(
                "model.img_channels: must be positive",
                field="model.img_channels")
        divisor = 2 ** (len(self.stage_multipliers) - 1)
        if self.resolution < 1 or self.resolution % divisor:
            raise ConfigError(
                "model.resolution: must be divisible by {}".format(divisor),
                field="model.resolution")
        if self.time_embed_dim < 0:
            raise ConfigError(
                "model.time_embed_dim: must not be negative",
                field="model.time_embed_dim")
        if self.variant not in VARIANTS:
            raise ConfigError(
                "model.variant: must be one of {}".format(", ".join(VARIANTS)),
                field="model.variant")

    @property
    def stage_channels(self) -> List[int]:
        """The channel count of each stage, highest resolution first."""
        return [self.base_channels * mult for mult in self.stage_multipliers]

    @property
    def stage_resolutions(self) -> List[int]:
        """The spatial size of each stage, highest resolution first."""
        return [
            self.resolution // 2**stage
            for stage in range(len(self.stage_multipliers))]

    @property
    def time_dim(self) -> int:
        """The width of the sinusoidal timestep embedding and of its MLP."""
        return self.time_embed_dim or 4 * self.base_channels

    def to_dict(self) -> Dict:
        """Get a JSON-serializable description of the architecture."""
        vals = dataclasses.asdict(self)
        vals["stage_multipliers"] = list(self.stage_multipliers)
        return vals

    @classmethod
    def from_dict(cls, vals: Dict) -> "ArchSpec":
        """Rebuild an architecture from to_dict() output.

        Raises:
            ConfigError: There are missing or unrecognized fields.
        """
        names = {field.name for field in dataclasses.fields(cls)}
        if set(vals) != names:
            raise ConfigError(
                "architecture fields don't match: missing {0}, "
                "unrecognized {1}".format(
                    sorted(names - set(vals)), sorted(set(vals) - names)))
        return cls(**vals)


def norm_groups(channels: int, max_groups=32) -> int:
    """Get the number of group norm groups for a channel count.

    This is 32, or the channel count if there are fewer channels. If the
    channel count isn't divisible by that, the largest divisor below it is
    used instead.
    """
    for groups in range(min(max_groups, channels), 0, -1):
        if channels % groups == 0:
            return groups
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Embed integer timesteps with sines and cosines of varying frequency.

    Args:
        t: A vector of timesteps.
        dim: The width of the embedding.

    Returns:
        A tensor shaped (len(t), dim).
    """
    half = dim // 2
    exponent = -math.log(10000) / max(half - 1, 1)
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float32, device=t.device) * exponent)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    """A residual block with the timestep embedding added after the first conv.
    """
    def __init__(self, in_channels: int, out_channels: int,
                 time_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(norm_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.shortcut(x)


class AttentionBlock(nn.Module):
    """Single-head spatial self-attention with a residual connection."""
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.norm = nn.GroupNorm(norm_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, channels, height, width = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(
            batch, 3, channels, height * width).unbind(dim=1)
        weights = torch.softmax(
            torch.einsum("bci,bcj->bij", q, k) / math.sqrt(channels), dim=-1)
        h = torch.einsum("bij,bcj->bci", weights, v)
        return x + self.proj(h.reshape(batch, channels, height, width))


class Downsample(nn.Module):
    """Halve the spatial size with a strided convolution."""
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    """Double the spatial size with nearest-neighbor upsampling and a conv."""
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    """The downsampling half of the U-Net, including the timestep MLP.

    The output of each stage's residual blocks, before downsampling, is kept
    as that stage's skip feature.
    """
    def __init__(self, spec: ArchSpec) -> None:
        super().__init__()
        channels = spec.stage_channels
        self.time_dim = spec.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(spec.time_dim, spec.time_dim),
            nn.SiLU(),
            nn.Linear(spec.time_dim, spec.time_dim))
        self.conv_in = nn.Conv2d(spec.img_channels, channels[0], 3, padding=1)

        self.stages = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev_channels = channels[0]
        for stage, stage_channels in enumerate(channels):
            blocks = nn.ModuleList()
            for _ in range(spec.res_blocks_per_stage):
                blocks.append(
                    ResBlock(prev_channels, stage_channels, spec.time_dim))
                prev_channels = stage_channels
            self.stages.append(blocks)
            if stage < len(channels) - 1:
                self.downsamples.append(Downsample(stage_channels))

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        """Map timesteps to the embedding consumed by every residual block."""
        emb = timestep_embedding(t, self.time_dim)
        return self.time_mlp(emb.to(self.time_mlp[0].weight.dtype))

    def forward(self, x: torch.Tensor,
                temb: torch.Tensor) -> List[torch.Tensor]:
        skips = []
        h = self.conv_in(x)
        for stage, blocks in enumerate(self.stages):
            for block in blocks:
                h = block(h, temb)
            skips.append(h)
            if stage < len(self.downsamples):
                h = self.downsamples[stage](h)
        return skips


class MidBlock(nn.Module):
    """Residual blocks at the lowest resolution with optional attention."""
    def __init__(self, spec: ArchSpec) -> None:
        super().__init__()
        channels = spec.stage_channels[-1]
        self.block1 = ResBlock(channels, channels, spec.time_dim)
        if spec.attention_at_lowest:
            self.attention = AttentionBlock(channels)
        else:
            self.attention = None
        self.block2 = ResBlock(channels, channels, spec.time_dim)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.block1(x, temb)
        if self.attention is not None:
            h = self.attention(h)
        return self.block2(h, temb)


class Decoder(nn.Module):
    """The upsampling half of the U-Net.

    Args:
        spec: The architecture.
        out_channels: The number of output channels.
        extra_channels: Extra channels concatenated onto the middle feature
            and every skip feature before they enter the decoder.
    """
    def __init__(self, spec: ArchSpec, out_channels: int,
                 extra_channels=0) -> None:
        super().__init__()
        channels = spec.stage_channels
        self.stages = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        current = channels[-1] + extra_channels
        for stage in reversed(range(len(channels))):
            blocks = nn.ModuleList()
            in_channels = current + channels[stage] + extra_channels
            for _ in range(spec.res_blocks_per_stage):
                blocks.append(
                    ResBlock(in_channels, channels[stage], spec.time_dim))
                in_channels = channels[stage]
            self.stages.append(blocks)
            if stage > 0:
                self.upsamples.append(Upsample(channels[stage]))
            current = channels[stage]
        self.norm_out = nn.GroupNorm(norm_groups(channels[0]), channels[0])
        self.conv_out = nn.Conv2d(channels[0], out_channels, 3, padding=1)

    def forward(self, h_mid: torch.Tensor, skips: Sequence[torch.Tensor],
                temb: torch.Tensor) -> torch.Tensor:
        h = h_mid
        for index, blocks in enumerate(self.stages):
            stage = len(skips) - 1 - index
            h = torch.cat([h, skips[stage]], dim=1)
            for block in blocks:
                h = block(h, temb)
            if index < len(self.upsamples):
                h = self.upsamples[index](h)
        return self.conv_out(F.silu(self.norm_out(h)))


def downsample_mask(m: torch.Tensor, factor: int) -> torch.Tensor:
    """Downsample masks by area averaging.

    The average of points on the simplex is on the simplex, so the per-pixel
    partition of unity survives.

    Args:
        m: Masks shaped (batch, regions, height, width).
        factor: A power of two that divides the height and width.

    Raises:
        RangeError: The factor isn't a power of two dividing the mask size.
    """
    height, width = m.shape[-2:]
    if (factor < 1 or factor & (factor - 1)
            or height % factor or width % factor):
        raise RangeError(
            "cannot downsample a {0}x{1} mask by a factor of {2}".format(
                height, width, factor))
    if factor == 1:
        return m
    return F.avg_pool2d(m, factor)


class FactorizedUNet(nn.Module):
    """A DDPM noise predictor factorized into K region-masked branches.

    Attributes:
        spec: The architecture.
        encoder: The encoder subnetwork, including the timestep MLP.
        mid_block: The middle subnetwork.
        mask_head: The mask generator, a decoder ending in K logits.
        decoder: The region decoder. For the "unshared" variant this is a
            ModuleList of K independent decoders.
    """
    def __init__(self, spec: ArchSpec) -> None:
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.mid_block = MidBlock(spec)
        self.mask_head = Decoder(spec, spec.num_regions)
        if spec.variant == "unshared":
            self.decoder = nn.ModuleList([
                Decoder(spec, spec.img_channels)
                for _ in range(spec.num_regions)])
        elif spec.variant == "concat":
            self.decoder = Decoder(
                spec, spec.img_channels, extra_channels=spec.num_regions)
        else:
            self.decoder = Decoder(spec, spec.img_channels)

    def subnetworks(self) -> Dict[str, nn.Module]:
        """Get the four parameter groups of the model by name."""
        return {
            "enc": self.encoder,
            "mid": self.mid_block,
            "mask": self.mask_head,
            "dec": self.decoder}

    def _timesteps(self, t, batch: int) -> torch.Tensor:
        """Convert timesteps to a vector with one entry per batch element."""
        t = torch.as_tensor(t, dtype=torch.long, device=self._device())
        if t.dim() == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise ShapeError(
                "timestep shape mismatch: expected ({0},), got {1}".format(
                    batch, tuple(t.shape)))
        return t

    def _device(self) -> torch.device:
        return self.encoder.conv_in.weight.device

    def _check_images(self, x_t: torch.Tensor) -> None:
        size = self.spec.resolution
        expected = (self.spec.img_channels, size, size)
        if x_t.dim() != 4 or tuple(x_t.shape[1:]) != expected:
            raise ShapeError(
                "image shape mismatch: expected (*, {0}, {1}, {2}), "
                "got {3}".format(*expected, tuple(x_t.shape)))

    def _check_features(self, h_enc: Sequence[torch.Tensor]) -> None:
        """Check skip features against the architecture.

        Raises:
            ShapeError: The number or shapes of the features are wrong.
        """
        expected = [
            (channels, size, size) for channels, size in zip(
                self.spec.stage_channels, self.spec.stage_resolutions)]
        got = [tuple(h.shape[1:]) for h in h_enc]
        if got != expected:
            raise ShapeError(
                "skip feature shape mismatch: expected {0}, got {1}".format(
                    expected, got))

    def _check_mid(self, h_mid: torch.Tensor) -> None:
        size = self.spec.stage_resolutions[-1]
        expected = (self.spec.stage_channels[-1], size, size)
        if tuple(h_mid.shape[1:]) != expected:
            raise ShapeError(
                "middle feature shape mismatch: expected {0}, got {1}".format(
                    expected, tuple(h_mid.shape[1:])))

    def embed_time(self, t, batch: int) -> torch.Tensor:
        """Compute the timestep embedding for a batch."""
        return self.encoder.embed_time(self._timesteps(t, batch))

    def encode(self, x_t: torch.Tensor, t) -> List[torch.Tensor]:
        """Compute the skip features of every encoder stage.

        Args:
            x_t: Noisy images shaped (batch, img_channels, res, res).
            t: The timesteps, one per image or a single integer.

        Returns:
            One feature map per stage, highest resolution first.

        Raises:
            ShapeError: The images don't match the architecture.
        """
        self._check_images(x_t)
        return self.encoder(x_t, self.embed_time(t, x_t.shape[0]))

    def mid(self, h_enc: Sequence[torch.Tensor], t) -> torch.Tensor:
        """Compute the middle feature from the lowest-resolution skip."""
        self._check_features(h_enc)
        return self.mid_block(
            h_enc[-1], self.embed_time(t, h_enc[-1].shape[0]))

    def mask_logits(self, h_mid: torch.Tensor,
                    h_enc: Sequence[torch.Tensor], t) -> torch.Tensor:
        """Compute the K region logits before the softmax."""
        self._check_mid(h_mid)
        self._check_features(h_enc)
        return self.mask_head(
            h_mid, h_enc, self.embed_time(t, h_mid.shape[0]))

    def generate_masks(self, h_mid: torch.Tensor,
                       h_enc: Sequence[torch.Tensor], t) -> torch.Tensor:
        """Compute K soft region masks that sum to one at every pixel."""
        return torch.softmax(self.mask_logits(h_mid, h_enc, t), dim=1)

    def _mask_skips(self, h_enc: Sequence[torch.Tensor],
                    m_k: torch.Tensor) -> List[torch.Tensor]:
        """Multiply each skip feature by a mask resized to its resolution."""
        return [
            h * downsample_mask(m_k, 2**stage)
            for stage, h in enumerate(h_enc)]

    @staticmethod
    def _region(m_k: torch.Tensor) -> torch.Tensor:
        """Shape a single-region mask as (batch, 1, height, width)."""
        if m_k.dim() == 3:
            m_k = m_k.unsqueeze(1)
        if m_k.dim() != 4 or m_k.shape[1] != 1:
            raise ShapeError(
                "region mask shape mismatch: expected (*, 1, H, W), "
                "got {}".format(tuple(m_k.shape)))
        return m_k

    def _branch_decoder(self, k: int) -> nn.Module:
        if self.spec.variant == "unshared":
            return self.decoder[k]
        return self.decoder

    def decode_branch(self, h_mid: torch.Tensor,
                      h_enc: Sequence[torch.Tensor], m_k: torch.Tensor, t,
                      k=0) -> torch.Tensor:
        """Predict the noise of one region.

        The middle feature is passed unmasked. Every skip feature, including
        the full-resolution one, is multiplied by the region mask.

        Args:
            h_mid: The middle feature.
            h_enc: The skip features.
            m_k: One full-resolution mask channel.
            t: The timesteps.
            k: The branch index. Only selects a decoder for the "unshared"
                variant.

        Raises:
            ConfigError: The model is the "concat" variant, which has no
                per-region branches.
        """
        if self.spec.variant == "concat":
            raise ConfigError(
                "the concat variant has no per-region decoder branches",
                field="model.variant")
        self._check_mid(h_mid)
        self._check_features(h_enc)
        temb = self.embed_time(t, h_mid.shape[0])
        return self._branch_decoder(k)(
            h_mid, self._mask_skips(h_enc, self._region(m_k)), temb)

    def _features(self, x_t: torch.Tensor, t):
        """Run the encoder, middle block and mask generator once."""
        self._check_images(x_t)
        temb = self.embed_time(t, x_t.shape[0])
        h_enc = self.encoder(x_t, temb)
        h_mid = self.mid_block(h_enc[-1], temb)
        m = torch.softmax(self.mask_head(h_mid, h_enc, temb), dim=1)
        return temb, h_enc, h_mid, m

    def predict_masks(self, x_t: torch.Tensor, t) -> torch.Tensor:
        """Compute the region masks without running any decoder branch."""
        return self._features(x_t, t)[3]

    def predict_noise(self, x_t: torch.Tensor,
                      t) -> Tuple[torch.Tensor, torch.Tensor]:
        """Predict the noise in x_t with the model's decoding scheme.

        For the primary "shared" scheme the output is the sum over regions
        of each branch's prediction weighted by its mask.

        Returns:
            The noise prediction and the region masks.
        """
        temb, h_enc, h_mid, m = self._features(x_t, t)
        variant = self.spec.variant
        num_regions = self.spec.num_regions

        if variant == "concat":
            m_mid = downsample_mask(m, 2 ** (len(h_enc) - 1))
            skips = [
                torch.cat([h, downsample_mask(m, 2**stage)], dim=1)
                for stage, h in enumerate(h_enc)]
            return self.decoder(
                torch.cat([h_mid, m_mid], dim=1), skips, temb), m

        eps_hat = None
        # Branches are summed in a fixed order so results are reproducible.
        for k in range(num_regions):
            m_k = m[:, k:k + 1]
            if variant == "mask_mid":
                m_low = downsample_mask(m_k, 2 ** (len(h_enc) - 1))
                branch = self.decoder(h_mid * m_low, h_enc, temb)
            else:
                branch = self._branch_decoder(k)(
                    h_mid, self._mask_skips(h_enc, m_k), temb)
            weighted = branch * m_k
            eps_hat = weighted if eps_hat is None else eps_hat + weighted
        return eps_hat, m

    def predict_noise_variant(
            self, x_t: torch.Tensor, t,
            variant: str) -> Tuple[torch.Tensor, torch.Tensor]:
        """Predict noise with an explicitly named decoding scheme.

        Raises:
            ConfigError: The model wasn't built for that scheme.
        """
        if variant not in VARIANTS:
            raise ConfigError(
                "model.variant: must be one of {}".format(", ".join(VARIANTS)),
                field="model.variant")
        if variant != self.spec.variant:
            raise ConfigError(
                "model.variant: the weights were built for '{0}', not "
                "'{1}'".format(self.spec.variant, variant),
                field="model.variant")
        return self.predict_noise(x_t, t)

    def forward(self, x_t: torch.Tensor,
                t) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.predict_noise(x_t, t)


def build_model(spec: ArchSpec, seed: Optional[int] = None) -> FactorizedUNet:
    """Build a model, optionally initializing it from a fixed seed."""
    if seed is None:
        return FactorizedUNet(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FactorizedUNet(spec)


def count_parameters(module: nn.Module) -> int:
    """Count the scalar parameters of a module."""
    return sum(param.numel() for param in module.parameters())
