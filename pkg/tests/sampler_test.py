"""Test sampler.py.

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
import dataclasses

import pytest
import torch

from regiondiff.diffusion import (
    build_linear_schedule, reverse_step, schedule_from_betas)
from regiondiff.unet import ArchSpec, FactorizedUNet, build_model
from regiondiff.sampler import (
    default_t_seg, generate, hard_labels, mask_trajectory, segment,
    segment_dataset)
from regiondiff.exceptions import NumericalError, RangeError

MICRO_SPEC = ArchSpec(
    base_channels=4, stage_multipliers=(1, 2), res_blocks_per_stage=1,
    num_regions=2, resolution=8)


def _model(**changes) -> FactorizedUNet:
    return build_model(
        dataclasses.replace(MICRO_SPEC, **changes), seed=0).eval()


def _images(num_images=5, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(num_images, 3, 8, 8, generator=generator) * 2 - 1


def _simplex(masks: torch.Tensor) -> bool:
    return bool(torch.allclose(
        masks.sum(dim=1), torch.ones_like(masks[:, 0]), atol=1e-5)) \
        and bool(((masks >= 0) & (masks <= 1)).all())


@pytest.fixture
def schedule():
    yield build_linear_schedule(10, 1e-3, 0.2)


class TestSegment:
    def test_single_region(self, schedule):
        """With one region, every pixel gets label zero."""
        result = segment(
            _images(), 3, _model(num_regions=1), schedule,
            torch.Generator().manual_seed(0))
        assert torch.equal(result.hard, torch.zeros(5, 8, 8, dtype=torch.long))

    def test_deterministic(self, schedule):
        """The same seed gives the same result."""
        model = _model()
        first = segment(
            _images(), 3, model, schedule, torch.Generator().manual_seed(4))
        second = segment(
            _images(), 3, model, schedule, torch.Generator().manual_seed(4))
        assert torch.equal(first.soft, second.soft)
        assert torch.equal(first.hard, second.hard)
        assert first.t_used == 3

    def test_result_shapes(self, schedule):
        """Soft masks are a simplex per pixel and hard labels are their argmax.
        """
        result = segment(
            _images(), 3, _model(num_regions=3), schedule,
            torch.Generator().manual_seed(0))
        assert tuple(result.soft.shape) == (5, 3, 8, 8)
        assert _simplex(result.soft)
        assert torch.equal(result.hard, result.soft.argmax(dim=1))
        assert result.noise is None

    def test_with_noise(self, schedule):
        """The noise prediction is returned on request."""
        result = segment(
            _images(), 3, _model(), schedule,
            torch.Generator().manual_seed(0), with_noise=True)
        assert tuple(result.noise.shape) == (5, 3, 8, 8)

    def test_averaged_draws(self, schedule):
        """Averaging several noise draws still gives valid masks."""
        result = segment(
            _images(), 3, _model(), schedule,
            torch.Generator().manual_seed(0), draws=3)
        assert _simplex(result.soft)

    @pytest.mark.parametrize("t_seg", [0, 11])
    def test_timestep_out_of_range(self, schedule, t_seg):
        """The segmentation timestep must be in [1, T]."""
        with pytest.raises(RangeError):
            segment(
                _images(), t_seg, _model(), schedule,
                torch.Generator().manual_seed(0))

    def test_no_draws(self, schedule):
        """At least one noise draw is needed."""
        with pytest.raises(RangeError):
            segment(
                _images(), 3, _model(), schedule,
                torch.Generator().manual_seed(0), draws=0)


class TestSegmentDataset:
    def test_batch_size_independent(self, schedule):
        """Per-image random streams make results independent of batching."""
        model = _model()
        images = _images(num_images=7)
        whole = segment_dataset(images, 3, model, schedule, seed=2,
                                batch_size=64)
        pieces = segment_dataset(images, 3, model, schedule, seed=2,
                                 batch_size=3)
        assert torch.allclose(whole.soft, pieces.soft, atol=1e-6)

    def test_seed_matters(self, schedule):
        """Different seeds draw different noise."""
        model = _model()
        images = _images()
        first = segment_dataset(images, 3, model, schedule, seed=0)
        second = segment_dataset(images, 3, model, schedule, seed=1)
        assert not torch.equal(first.soft, second.soft)

    def test_empty(self, schedule):
        """An empty dataset gives empty masks of the right shape."""
        result = segment_dataset(
            torch.zeros(0, 3, 8, 8), 3, _model(), schedule, seed=0)
        assert tuple(result.soft.shape) == (0, 2, 8, 8)
        assert tuple(result.hard.shape) == (0, 8, 8)


def test_hard_labels_ties():
    """Ties go to the lowest channel."""
    soft = torch.full((1, 3, 2, 2), 1 / 3)
    assert torch.equal(hard_labels(soft), torch.zeros(1, 2, 2, dtype=torch.long))


@pytest.mark.parametrize("T,expected", [(1000, 30), (200, 6), (10, 1)])
def test_default_t_seg(T, expected):
    """The segmentation timestep scales with the schedule length."""
    assert default_t_seg(T) == expected


class TestGenerate:
    def test_single_step(self):
        """A one-step chain is a single denoising step without noise."""
        schedule = schedule_from_betas([0.3])
        model = _model()
        calls = []
        model.encoder.register_forward_hook(
            lambda module, inputs, output: calls.append(1))
        result = generate(2, model, schedule, torch.Generator().manual_seed(6))
        assert len(calls) == 1

        x_1 = torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(6))
        with torch.no_grad():
            eps_hat, masks = model.predict_noise(x_1, 1)
        expected = reverse_step(x_1, eps_hat, 1, None, schedule).clamp(-1, 1)
        assert torch.allclose(result.images, expected)
        assert torch.allclose(result.masks.soft, masks)
        assert result.steps == 1
        assert result.masks.t_used == 1

    def test_deterministic(self, schedule):
        """The same seed gives bitwise-identical samples."""
        model = _model()
        first = generate(3, model, schedule, torch.Generator().manual_seed(1))
        second = generate(3, model, schedule, torch.Generator().manual_seed(1))
        assert torch.equal(first.images, second.images)
        assert torch.equal(first.masks.soft, second.masks.soft)

    def test_untrained_long_chain(self):
        """Random weights survive a full-length chain with valid outputs."""
        schedule = build_linear_schedule(200, 1e-4, 0.07)
        result = generate(
            2, _model(num_regions=3), schedule,
            torch.Generator().manual_seed(0))
        assert bool(torch.isfinite(result.images).all())
        assert float(result.images.abs().max()) <= 1
        assert _simplex(result.masks.soft)
        assert result.steps == 200

    def test_non_finite(self, schedule):
        """A chain that diverges stops with the offending timestep."""
        model = _model()
        with torch.no_grad():
            model.decoder.conv_out.bias.fill_(float("inf"))
        with pytest.raises(NumericalError) as error:
            generate(1, model, schedule, torch.Generator().manual_seed(0))
        assert error.value.snapshot["t"] == 10

    def test_no_samples(self, schedule):
        """At least one sample must be requested."""
        with pytest.raises(RangeError):
            generate(0, _model(), schedule, torch.Generator())


class TestMaskTrajectory:
    def test_record_count(self, schedule):
        """Records are kept every record_every steps, ending at t = 1."""
        records = mask_trajectory(
            2, _model(), schedule, torch.Generator().manual_seed(0), 3)
        assert [record.t for record in records] == [10, 7, 4, 1]
        for record in records:
            assert tuple(record.image.shape) == (2, 3, 8, 8)
            assert _simplex(record.masks)

    def test_final_record_matches_generate(self, schedule):
        """Recording only the last step reproduces generate()."""
        model = _model()
        records = mask_trajectory(
            2, model, schedule, torch.Generator().manual_seed(8), 10)
        result = generate(2, model, schedule, torch.Generator().manual_seed(8))

        assert len(records) == 1
        assert records[0].t == 1
        assert torch.equal(records[0].image, result.images)
        assert torch.equal(records[0].masks, result.masks.soft)

    def test_every_step(self, schedule):
        """Recording every step gives T records."""
        records = mask_trajectory(
            1, _model(), schedule, torch.Generator().manual_seed(0), 1)
        assert [record.t for record in records] == list(range(10, 0, -1))

    def test_bad_interval(self, schedule):
        """The recording interval must be positive."""
        with pytest.raises(RangeError):
            mask_trajectory(
                1, _model(), schedule, torch.Generator().manual_seed(0), 0)
