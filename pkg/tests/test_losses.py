import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from helpers import fm_oracle, micro_bundle, rec_oracle, stroke_oracle
from sketchbridge import losses
from sketchbridge.errors import NegativeWeight, PsiNotFrozen, ShapeMismatch
from sketchbridge.losses import LossBreakdown, LossWeights, total_g_loss
from sketchbridge.networks import (
    DiscriminatorSpec,
    MultiScaleDiscriminator,
    PerceptualExtractor,
    StrokeClassifier,
    StrokeClassifierSpec,
    freeze,
)


class ForcedD(nn.Module):
    """Stub discriminator: fixed score grids, real vs fake told apart by a pixel tag."""

    def __init__(self, p_real, p_fake, n_scales=2):
        super().__init__()
        self.p_real, self.p_fake, self.n_scales = p_real, p_fake, n_scales

    def forward(self, z, img):
        is_real = img[:, 0, 0, 0] > 0.5
        p = torch.where(is_real, torch.tensor(self.p_real), torch.tensor(self.p_fake))
        grid = p.view(-1, 1, 1).expand(-1, 3, 3).double()
        return [(grid, [grid]) for _ in range(self.n_scales)]


def real_fake(batch=2):
    real = torch.ones(batch, 1, 8, 8)
    fake = torch.zeros(batch, 1, 8, 8)
    return torch.zeros_like(real), real, fake


class TestAdversarial:
    def test_discriminator_optimum(self):
        z, real, fake = real_fake()
        v = losses.adv_loss_d(ForcedD(1.0, 0.0), z, real, fake)
        assert float(v) == pytest.approx(-2 * math.log(1 - 1e-8), abs=1e-7)
        assert abs(float(v)) < 1e-6

    def test_half_everywhere(self):
        z, real, fake = real_fake()
        assert float(losses.adv_loss_d(ForcedD(0.5, 0.5), z, real, fake)) == pytest.approx(
            4 * math.log(2), abs=1e-12)
        assert float(losses.adv_loss_g(ForcedD(0.5, 0.5), z, fake)) == pytest.approx(
            2 * math.log(2), abs=1e-12)

    def test_generator_optimum(self):
        z, _, fake = real_fake()
        assert abs(float(losses.adv_loss_g(ForcedD(0.3, 1.0), z, fake))) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_swap_symmetry(self, p, q):
        # D(real) = p, D(fake) = q versus the mirrored outputs on swapped inputs
        a = losses.adv_d_from_scores([torch.tensor([p])] * 2, [torch.tensor([q])] * 2)
        b = losses.adv_d_from_scores([torch.tensor([1 - q])] * 2, [torch.tensor([1 - p])] * 2)
        assert float(a) == pytest.approx(float(b), rel=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01))
    def test_g_loss_monotone(self, p, dp):
        lo = losses.adv_g_from_scores([torch.tensor([p]), torch.tensor([0.5])])
        hi = losses.adv_g_from_scores([torch.tensor([p + dp]), torch.tensor([0.5])])
        assert float(hi) < float(lo)

    def test_clamped_log_is_finite(self):
        v = losses.adv_g_from_scores([torch.tensor([0.0]), torch.tensor([0.0])])
        assert math.isfinite(float(v))


def small_D():
    torch.manual_seed(0)
    D = MultiScaleDiscriminator(DiscriminatorSpec(base_channels=4, channel_cap=8)).double()
    return D.requires_grad_(False)


class TestFeatureMatching:
    def test_identity(self):
        y = torch.rand(2, 1, 64, 64, dtype=torch.float64)
        assert float(losses.fm_loss(small_D(), torch.rand_like(y), y, y.clone())) == 0.0

    def test_matches_rewalk_oracle(self):
        g = torch.Generator().manual_seed(1)
        z, yr, yf = (torch.rand(2, 1, 64, 64, generator=g, dtype=torch.float64)
                     for _ in range(3))
        D = small_D()
        assert float(losses.fm_loss(D, z, yr, yf)) == pytest.approx(
            fm_oracle(D, z, yr, yf), rel=1e-10)

    def test_homogeneity(self):
        a = [(None, [torch.zeros(1, 3, 4, 4)])]
        b = [(None, [torch.full((1, 3, 4, 4), 0.25)])]
        c = [(None, [torch.full((1, 3, 4, 4), 0.5)])]
        assert float(losses.fm_from_outputs(a, c)) == pytest.approx(
            2 * float(losses.fm_from_outputs(a, b)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            losses.fm_loss(small_D(), torch.rand(1, 1, 64, 64), torch.rand(1, 1, 64, 64),
                           torch.rand(1, 1, 32, 32))


class TestReconstruction:
    def test_identity_and_symmetry(self):
        phi = PerceptualExtractor().double()
        a = torch.rand(1, 1, 64, 64, dtype=torch.float64)
        b = torch.rand(1, 1, 64, 64, dtype=torch.float64)
        assert float(losses.rec_loss(phi, a, a.clone())) == 0.0
        assert float(losses.rec_loss(phi, a, b)) == pytest.approx(
            float(losses.rec_loss(phi, b, a)), rel=1e-12)

    def test_matches_oracle(self):
        phi = PerceptualExtractor().double()
        g = torch.Generator().manual_seed(2)
        a = torch.rand(2, 1, 64, 64, generator=g, dtype=torch.float64)
        b = torch.rand(2, 1, 64, 64, generator=g, dtype=torch.float64)
        assert float(losses.rec_loss(phi, a, b)) == pytest.approx(rec_oracle(phi, a, b),
                                                                  rel=1e-10)


def frozen_psi(patch=16):
    torch.manual_seed(3)
    return freeze(StrokeClassifier(StrokeClassifierSpec(patch_size=patch)).double())


class TestStroke:
    def test_identity(self):
        y = torch.rand(1, 1, 48, 48, dtype=torch.float64)
        assert float(losses.stroke_loss(frozen_psi(), y, y.clone())) == 0.0

    def test_matches_per_patch_oracle(self):
        g = torch.Generator().manual_seed(4)
        a = torch.rand(2, 1, 40, 56, generator=g, dtype=torch.float64)
        b = torch.rand(2, 1, 40, 56, generator=g, dtype=torch.float64)
        psi = frozen_psi()
        assert float(losses.stroke_loss(psi, a, b)) == pytest.approx(
            stroke_oracle(psi, a, b), rel=1e-10)

    def test_patch_order_irrelevant(self):
        g = torch.Generator().manual_seed(5)
        a = torch.rand(1, 1, 48, 48, generator=g, dtype=torch.float64)
        b = torch.rand(1, 1, 48, 48, generator=g, dtype=torch.float64)
        psi = frozen_psi()
        base = float(losses.stroke_loss(psi, a, b))
        perm = torch.randperm(9, generator=g)
        assert float(losses.stroke_loss(psi, a, b, order=perm)) == pytest.approx(base, rel=1e-12)

    def test_requires_frozen(self):
        psi = StrokeClassifier(StrokeClassifierSpec(patch_size=16))
        y = torch.rand(1, 1, 32, 32)
        with pytest.raises(PsiNotFrozen):
            losses.stroke_loss(psi, y, y)

    def test_tile_geometry(self):
        x = torch.arange(2 * 6 * 9, dtype=torch.float64).view(1, 2, 6, 9)
        tiles = losses.tile_patches(x, 3)
        assert tiles.shape == (1, 6, 2, 3, 3)
        assert torch.equal(tiles[0, 4], x[0, :, 3:6, 3:6])


class TestTotal:
    def test_default_weights_unit_components(self):
        assert total_g_loss(1, 1, 1, 1) == 111.002

    def test_derived_example(self):
        assert total_g_loss(0.5, 0.01, 0.2, 3.0) == pytest.approx(3.506, abs=1e-12)

    def test_zero_weights(self):
        assert total_g_loss(0.7, 5, 6, 7, LossWeights(0, 0, 0)) == 0.7

    def test_negative_weight(self):
        with pytest.raises(NegativeWeight):
            LossWeights(lambda_str=-1)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10),
           st.sampled_from(range(4)), st.floats(0.01, 1))
    def test_linear_in_each_component(self, a, b, c, d, which, delta):
        w = LossWeights()
        parts = [a, b, c, d]
        coef = [1.0, w.lambda_fm, w.lambda_rec, w.lambda_str][which]
        bumped = list(parts)
        bumped[which] += delta
        diff = total_g_loss(*bumped, w) - total_g_loss(*parts, w)
        assert diff == pytest.approx(coef * delta, rel=1e-9, abs=1e-9)

    def test_breakdown_total(self):
        b = LossBreakdown(0.1, 0.5, 0.01, 0.2, 3.0)
        assert b.total_g == total_g_loss(0.5, 0.01, 0.2, 3.0)


def test_losses_vanish_on_micro_bundle():
    bundle = micro_bundle(0)
    bundle.D.requires_grad_(False)
    y = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    z = torch.rand_like(y)
    assert float(losses.fm_loss(bundle.D, z, y, y.clone())) == 0.0
    assert float(losses.rec_loss(bundle.phi, y, y.clone())) == 0.0
    assert float(losses.stroke_loss(bundle.psi, y, y.clone())) == 0.0
