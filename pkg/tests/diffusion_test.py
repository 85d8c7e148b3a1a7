"""Test diffusion.py.

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
import decimal

import pytest
import torch

from regiondiff.diffusion import (
    build_linear_schedule, forward_diffuse, reverse_step, sample_timesteps,
    schedule_from_betas, terminal_snr_beta_end)
from regiondiff.exceptions import (
    ConfigError, ContractError, RangeError, ShapeError)


def _extended_product(values):
    """Multiply floats exactly enough to serve as an oracle."""
    with decimal.localcontext() as context:
        context.prec = 60
        product = decimal.Decimal(1)
        for value in values:
            product *= decimal.Decimal(float(value))
        return float(product)


class TestSchedule:
    @pytest.fixture
    def schedule(self):
        yield build_linear_schedule(1000, 1e-4, 0.02)

    def test_first_step(self, schedule):
        """The first entries match the start of the range."""
        assert schedule.at("beta", 1) == pytest.approx(1e-4, rel=1e-12)
        assert schedule.at("alpha_bar", 1) == pytest.approx(0.9999, rel=1e-12)

    def test_endpoints_inclusive(self, schedule):
        """The variance increments run from beta_start to beta_end."""
        assert schedule.at("beta", 1000) == pytest.approx(0.02, rel=1e-12)
        assert schedule.T == 1000

    def test_alpha_bar_matches_extended_product(self, schedule):
        """Stored cumulative products match an extended-precision product."""
        for t in (1, 10, 500, 1000):
            expected = _extended_product(schedule.alpha[:t].tolist())
            assert schedule.at("alpha_bar", t) == pytest.approx(
                expected, rel=1e-10)
        assert schedule.at("alpha_bar", 1000) == pytest.approx(4.0e-5, rel=0.1)

    def test_monotonic(self, schedule):
        """The cumulative products strictly decrease and stay in (0, 1)."""
        alpha_bar = schedule.alpha_bar
        assert bool((alpha_bar[1:] < alpha_bar[:-1]).all())
        assert bool(((alpha_bar > 0) & (alpha_bar < 1)).all())
        assert bool((schedule.beta[1:] >= schedule.beta[:-1]).all())

    def test_tables_are_float64(self, schedule):
        """Every table is stored in double precision."""
        for table in (schedule.beta, schedule.alpha, schedule.alpha_bar,
                      schedule.sigma):
            assert table.dtype == torch.float64

    def test_sigma_beta_mode(self, schedule):
        """By default, the squared reverse noise scale equals beta."""
        assert torch.allclose(schedule.sigma ** 2, schedule.beta)

    def test_sigma_posterior_mode(self):
        """The posterior noise scale vanishes at the first step."""
        schedule = build_linear_schedule(
            10, 1e-3, 0.1, sigma_mode="posterior")
        assert schedule.at("sigma", 1) == 0
        beta2 = schedule.at("beta", 2)
        expected = (1 - schedule.at("alpha_bar", 1)) / (
            1 - schedule.at("alpha_bar", 2)) * beta2
        assert schedule.at("sigma", 2) ** 2 == pytest.approx(expected)

    def test_two_step_hand_product(self):
        """A constant two-step schedule has the hand-computed products."""
        schedule = build_linear_schedule(2, 0.5, 0.5)
        assert schedule.alpha_bar.tolist() == pytest.approx([0.5, 0.25])

    def test_immutable(self, schedule):
        """Schedules can't be modified after construction."""
        with pytest.raises(AttributeError):
            schedule.T = 5

    def test_single_step_from_betas(self):
        """An explicit one-step schedule is allowed."""
        schedule = schedule_from_betas([0.3])
        assert schedule.T == 1
        assert schedule.at("alpha_bar", 1) == pytest.approx(0.7)

    @pytest.mark.parametrize("T,beta_start,beta_end,field", [
        (1, 1e-4, 0.02, "diffusion.T"),
        (10, 0, 0.02, "diffusion.beta_start"),
        (10, 0.02, 0.01, "diffusion.beta_end"),
        (10, 1e-4, 1.0, "diffusion.beta_end")])
    def test_invalid_range(self, T, beta_start, beta_end, field):
        """Out-of-range parameters name the offending field."""
        with pytest.raises(ConfigError) as error:
            build_linear_schedule(T, beta_start, beta_end)
        assert error.value.field == field

    def test_bad_sigma_mode(self):
        """An unknown noise-scale mode is a configuration error."""
        with pytest.raises(ConfigError):
            build_linear_schedule(10, 1e-4, 0.02, sigma_mode="learned")

    def test_at_out_of_range(self, schedule):
        """Looking up timestep zero is a range error."""
        with pytest.raises(RangeError):
            schedule.at("beta", 0)

    def test_dict_rebuilds_tables(self, schedule):
        """A stored description rebuilds exactly the same tables."""
        vals = schedule.to_dict()
        rebuilt = schedule.from_dict(vals)
        assert vals["T"] == 1000
        assert vals["beta_end"] == pytest.approx(0.02, rel=1e-12)
        assert torch.equal(rebuilt.alpha_bar, schedule.alpha_bar)
        assert torch.equal(rebuilt.sigma, schedule.sigma)
        assert rebuilt.matches(schedule)

    @pytest.mark.parametrize("other", [
        build_linear_schedule(999, 1e-4, 0.02),
        build_linear_schedule(1000, 1e-4, 0.021),
        build_linear_schedule(1000, 1e-4, 0.02, sigma_mode="posterior")])
    def test_mismatch(self, schedule, other):
        """Schedules that differ in any parameter don't match."""
        assert not schedule.matches(other)
        assert not other.matches(schedule)


def test_terminal_snr_beta_end():
    """A shorter schedule reaches the same terminal signal level."""
    reference = build_linear_schedule(1000, 1e-4, 0.02)
    beta_end = terminal_snr_beta_end(200, 1e-4)
    short = build_linear_schedule(200, 1e-4, beta_end)

    assert 0.02 < beta_end < 1
    assert short.at("alpha_bar", 200) == pytest.approx(
        reference.at("alpha_bar", 1000), rel=1e-8)


def test_terminal_snr_beta_end_unreachable():
    """A schedule that loses too much signal at any beta_end is an error."""
    with pytest.raises(ConfigError):
        terminal_snr_beta_end(10000, 0.01)


class TestForwardDiffuse:
    @pytest.fixture
    def schedule(self):
        yield build_linear_schedule(1000, 1e-4, 0.02)

    def test_zero_noise(self, schedule):
        """Without noise, the images are only scaled."""
        x0 = torch.linspace(-1, 1, 2 * 3 * 4 * 4, dtype=torch.float64).view(
            2, 3, 4, 4)
        t = torch.tensor([1, 700])
        x_t = forward_diffuse(x0, t, torch.zeros_like(x0), schedule)

        for index, step in enumerate(t.tolist()):
            scale = math.sqrt(schedule.at("alpha_bar", step))
            assert torch.allclose(x_t[index], scale * x0[index])

    def test_scalar_arithmetic(self):
        """A quarter of the signal left gives 0.5 + sqrt(0.75)."""
        schedule = build_linear_schedule(2, 0.5, 0.5)
        x0 = torch.ones(1, 1, 2, 2, dtype=torch.float64)
        x_t = forward_diffuse(x0, torch.tensor([2]), torch.ones_like(x0),
                              schedule)
        assert torch.allclose(
            x_t, torch.full_like(x0, 0.5 + math.sqrt(0.75)))

    def test_per_element_timesteps(self, schedule):
        """Each batch element is noised to its own timestep."""
        x0 = torch.ones(3, 1, 2, 2, dtype=torch.float64)
        eps = torch.zeros_like(x0)
        x_t = forward_diffuse(x0, torch.tensor([1, 500, 1000]), eps, schedule)
        assert x_t[0, 0, 0, 0] > x_t[1, 0, 0, 0] > x_t[2, 0, 0, 0]

    def test_linear(self, schedule):
        """Scaling both the images and the noise scales the output."""
        generator = torch.Generator().manual_seed(3)
        x0 = torch.rand(2, 3, 4, 4, generator=generator, dtype=torch.float64)
        eps = torch.randn(2, 3, 4, 4, generator=generator, dtype=torch.float64)
        t = torch.tensor([50, 400])

        scaled = forward_diffuse(2.5 * x0, t, 2.5 * eps, schedule)
        assert torch.allclose(
            scaled, 2.5 * forward_diffuse(x0, t, eps, schedule))

    def test_moments(self, schedule):
        """Noised values have the mean and variance of the forward process."""
        generator = torch.Generator().manual_seed(0)
        draws = 10**4
        x0 = torch.full((draws, 1, 1, 1), 0.5, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64)
        t = torch.full((draws,), 100)
        x_t = forward_diffuse(x0, t, eps, schedule)

        alpha_bar = schedule.at("alpha_bar", 100)
        assert float(x_t.mean()) == pytest.approx(
            math.sqrt(alpha_bar) * 0.5, rel=0.05)
        assert float(x_t.var()) == pytest.approx(1 - alpha_bar, rel=0.05)

    def test_timestep_out_of_range(self, schedule):
        """Timesteps outside [1, T] are a range error."""
        x0 = torch.zeros(2, 1, 2, 2)
        with pytest.raises(RangeError):
            forward_diffuse(x0, torch.tensor([0, 3]), x0, schedule)
        with pytest.raises(RangeError):
            forward_diffuse(x0, torch.tensor([1, 1001]), x0, schedule)

    def test_shape_mismatch(self, schedule):
        """Noise with the wrong shape is a shape error."""
        with pytest.raises(ShapeError):
            forward_diffuse(
                torch.zeros(2, 1, 2, 2), torch.tensor([1, 1]),
                torch.zeros(2, 1, 2, 3), schedule)


class TestReverseStep:
    @pytest.fixture
    def schedule(self):
        yield build_linear_schedule(1000, 1e-4, 0.02)

    def test_final_step(self, schedule):
        """The final step matches a direct scalar evaluation."""
        x_1 = torch.tensor([0.3], dtype=torch.float64).view(1, 1, 1, 1)
        eps_hat = torch.tensor([-0.7], dtype=torch.float64).view(1, 1, 1, 1)
        result = reverse_step(x_1, eps_hat, 1, None, schedule)

        alpha_bar = schedule.at("alpha_bar", 1)
        expected = (0.3 - (1e-4 / math.sqrt(1 - alpha_bar)) * -0.7) \
            / math.sqrt(0.9999)
        assert float(result) == pytest.approx(expected, rel=1e-9)

    def test_zero_prediction(self, schedule):
        """With no predicted noise, the step only rescales."""
        x_t = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        result = reverse_step(
            x_t, torch.zeros_like(x_t), 200, torch.zeros_like(x_t), schedule)
        assert torch.allclose(
            result, x_t / math.sqrt(schedule.at("alpha", 200)))

    def test_true_noise_two_steps(self):
        """Denoising with the true noise matches the hand-computed value."""
        schedule = build_linear_schedule(2, 0.5, 0.5)
        x0 = torch.ones(1, 1, 1, 1, dtype=torch.float64)
        eps = torch.ones_like(x0)
        x_2 = forward_diffuse(x0, torch.tensor([2]), eps, schedule)
        result = reverse_step(x_2, eps, 2, None, schedule)

        expected = math.sqrt(2) * (
            0.5 + math.sqrt(0.75) - 0.5 / math.sqrt(0.75))
        assert float(result) == pytest.approx(expected, rel=1e-12)
        assert result.shape == x0.shape

    def test_noise_added(self, schedule):
        """The noise is scaled by sigma."""
        x_t = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        z = torch.ones_like(x_t)
        result = reverse_step(x_t, torch.zeros_like(x_t), 10, z, schedule)
        assert torch.allclose(
            result, torch.full_like(x_t, schedule.at("sigma", 10)))

    def test_noise_at_final_step(self, schedule):
        """Noise at t = 1 violates the sampling contract."""
        x_t = torch.zeros(1, 1, 2, 2)
        with pytest.raises(ContractError):
            reverse_step(
                x_t, torch.zeros_like(x_t), 1, torch.ones_like(x_t), schedule)

    def test_zero_noise_at_final_step(self, schedule):
        """All-zero noise at t = 1 is allowed."""
        x_t = torch.ones(1, 1, 2, 2, dtype=torch.float64)
        result = reverse_step(
            x_t, torch.zeros_like(x_t), 1, torch.zeros_like(x_t), schedule)
        assert torch.allclose(result, x_t / math.sqrt(0.9999))

    def test_out_of_range(self, schedule):
        """Timesteps outside [1, T] are a range error."""
        x_t = torch.zeros(1, 1, 2, 2)
        with pytest.raises(RangeError):
            reverse_step(x_t, x_t, 1001, None, schedule)


class TestSampleTimesteps:
    def test_degenerate_range(self):
        """With a single step, every draw is 1."""
        generator = torch.Generator().manual_seed(5)
        assert sample_timesteps(4, 1, generator).tolist() == [1, 1, 1, 1]

    def test_deterministic(self):
        """The same seed gives the same draws."""
        first = sample_timesteps(32, 100, torch.Generator().manual_seed(9))
        second = sample_timesteps(32, 100, torch.Generator().manual_seed(9))
        assert torch.equal(first, second)

    def test_uniform(self):
        """Every value in [1, T] is drawn about equally often."""
        draws, T = 10**5, 10
        t = sample_timesteps(draws, T, torch.Generator().manual_seed(0))
        counts = torch.bincount(t, minlength=T + 1)

        assert counts[0] == 0
        assert int(t.min()) >= 1 and int(t.max()) <= T
        expected = draws / T
        stddev = math.sqrt(draws * (1 / T) * (1 - 1 / T))
        for count in counts[1:].tolist():
            assert abs(count - expected) < 4 * stddev

    def test_empty_batch(self):
        """A batch size of zero is a range error."""
        with pytest.raises(RangeError):
            sample_timesteps(0, 10, torch.Generator())
