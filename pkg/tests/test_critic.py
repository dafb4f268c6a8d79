import numpy as np
import pytest
import torch
import torch.nn as nn

from oracles import finite_diff_grads
from ptdehaze.critic import Critic, build_critic, critic_score, gradient_penalty
from ptdehaze.errors import ShapeError


class UnitLinearCritic(nn.Module):
    """C(x) = <w, x> / ||w||: gradient norm is exactly 1 everywhere."""

    def __init__(self, shape, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(*shape, generator=g, dtype=torch.float64)
        self.w = nn.Parameter(w / w.norm())

    def forward(self, x):
        return (x * self.w).flatten(1).sum(dim=1)


class ZeroCritic(nn.Module):

    def forward(self, x):
        return x.flatten(1).sum(dim=1) * 0.0


class TestScore:

    def test_finite_scalar(self):
        critic = build_critic(seed=0)
        score = critic_score(torch.rand(3, 32, 32), critic)
        assert score.dim() == 0
        assert torch.isfinite(score)

    def test_batch_matches_per_image(self):
        critic = build_critic(seed=1)
        batch = torch.rand(4, 3, 32, 32)
        batched = critic_score(batch, critic)
        singles = torch.stack([critic_score(batch[i], critic) for i in range(4)])
        assert torch.allclose(batched, singles, atol=1e-6)

    def test_wrong_channels_rejected(self):
        critic = build_critic(seed=0)
        with pytest.raises(ShapeError):
            critic(torch.rand(1, 4, 32, 32))

    def test_eval_determinism(self):
        critic = build_critic(seed=2)
        x = torch.rand(2, 3, 32, 32)
        assert torch.equal(critic_score(x, critic), critic_score(x, critic))

    def test_no_output_bounding(self):
        # scores scale with input magnitude instead of saturating
        critic = build_critic(seed=3)
        x = torch.rand(1, 3, 32, 32)
        s1 = critic_score(x, critic)
        s2 = critic_score(x * 100, critic)
        assert abs(float(s2)) > abs(float(s1))


class TestGradientPenalty:

    def test_unit_gradient_gives_zero(self):
        critic = UnitLinearCritic((3, 8, 8))
        real = torch.rand(4, 3, 8, 8, dtype=torch.float64)
        penalty = gradient_penalty(critic, real, real.clone(),
                                   torch.Generator().manual_seed(0))
        assert float(penalty.detach()) < 1e-10

    def test_zero_critic_gives_one(self):
        critic = ZeroCritic()
        real = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        fake = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        penalty = gradient_penalty(critic, real, fake, torch.Generator().manual_seed(1))
        assert float(penalty.detach()) == 1.0

    def test_shape_mismatch_rejected(self):
        critic = build_critic(seed=0)
        with pytest.raises(ShapeError):
            gradient_penalty(critic, torch.rand(2, 3, 16, 16), torch.rand(3, 3, 16, 16))

    def test_matches_finite_difference_oracle(self):
        torch.manual_seed(4)
        critic = Critic(channels=(4, 8)).double()
        real = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        fake = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        seed = 5
        penalty = gradient_penalty(critic, real, fake,
                                   torch.Generator().manual_seed(seed))

        # rebuild the same interpolates, then differentiate the critic numerically
        u = torch.rand(2, 1, 1, 1, generator=torch.Generator().manual_seed(seed),
                       dtype=torch.float64)
        mixed = u * real + (1.0 - u) * fake
        norms = []
        for i in range(2):
            sample = mixed[i:i + 1].clone()
            grads = finite_diff_grads(
                lambda s=sample: critic(s).sum(), [sample], h=1e-6)
            norms.append(grads[0].norm())
        fd_penalty = torch.stack([(n - 1.0) ** 2 for n in norms]).mean()
        rel_err = abs(float(penalty.detach()) - float(fd_penalty)) / max(float(fd_penalty), 1e-12)
        assert rel_err < 1e-4

    def test_swap_symmetry_with_mirrored_u(self):
        # swapping real/fake while mirroring u reproduces the same interpolates
        critic = Critic(channels=(4, 8)).double()
        real = torch.rand(3, 3, 8, 8, dtype=torch.float64)
        fake = torch.rand(3, 3, 8, 8, dtype=torch.float64)
        u = torch.rand(3, 1, 1, 1, generator=torch.Generator().manual_seed(6),
                       dtype=torch.float64)

        def penalty_at(batch_a, batch_b, mix):
            mixed = (mix * batch_a + (1 - mix) * batch_b).requires_grad_(True)
            scores = critic(mixed)
            grads, = torch.autograd.grad(scores.sum(), mixed)
            return ((grads.flatten(1).norm(2, dim=1) - 1.0) ** 2).mean()

        direct = penalty_at(real, fake, u)
        mirrored = penalty_at(fake, real, 1.0 - u)
        assert torch.allclose(direct, mirrored, atol=1e-12)


class TestArchitecture:

    def test_encoder_downsamples_four_times(self):
        critic = build_critic(seed=0)
        # 10 convs (2 per level, 5 levels) and a scalar head
        assert len(critic.convs) == 10
        assert critic.head.out_features == 1

    def test_batch_of_scores(self):
        critic = build_critic(seed=0)
        with torch.no_grad():
            out = critic(torch.rand(5, 3, 32, 32))
        assert tuple(out.shape) == (5,)
        assert torch.isfinite(out).all()
