"""Wasserstein critic: the backbone's plain convolutional encoder.

Scores a 3-channel image with an unbounded real number (no sigmoid). No
normalization layers: the gradient penalty assumes per-sample gradients,
which batch norm would couple.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

CRITIC_CHANNELS = (16, 32, 64, 128, 256)
CONVS_PER_LEVEL = 2


class Critic(nn.Module):

    def __init__(self, channels=CRITIC_CHANNELS):
        super().__init__()
        self.channels = tuple(channels)
        layers = []
        in_ch = 3
        for ch in self.channels:
            for _ in range(CONVS_PER_LEVEL):
                layers.append(nn.Conv2d(in_ch, ch, kernel_size=3, padding=1))
                in_ch = ch
        self.convs = nn.ModuleList(layers)
        self.head = nn.Linear(self.channels[-1], 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"critic expects Nx3xHxW input, got {tuple(x.shape)}")
        n_levels = len(self.channels)
        for i, conv in enumerate(self.convs):
            x = F.silu(conv(x))
            end_of_level = (i + 1) % CONVS_PER_LEVEL == 0
            last_level = i >= (n_levels - 1) * CONVS_PER_LEVEL
            if end_of_level and not last_level and min(x.shape[-2:]) >= 2:
                x = F.max_pool2d(x, 2, stride=2)
        x = x.mean(dim=(2, 3))
        return self.head(x).squeeze(1)


def build_critic(channels=CRITIC_CHANNELS, seed: int = 0) -> Critic:
    torch.manual_seed(seed)
    return Critic(channels)


def critic_score(img: torch.Tensor, model: Critic) -> torch.Tensor:
    """Eval-mode scores: a scalar for 3xHxW input, a vector for Nx3xHxW."""
    single = img.dim() == 3
    if single:
        img = img.unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            scores = model(img)
    finally:
        model.train(was_training)
    return scores[0] if single else scores


def gradient_penalty(model: Critic, real: torch.Tensor, fake: torch.Tensor,
                     rng: torch.Generator | None = None) -> torch.Tensor:
    """Mean squared deviation of the critic's gradient norm from 1.

    Evaluated at per-sample uniform interpolates between real and fake;
    keeps the graph so the penalty itself is differentiable.
    """
    if real.shape != fake.shape:
        raise ShapeError(f"real/fake batch shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    u = torch.rand(real.shape[0], 1, 1, 1, generator=rng, dtype=real.dtype)
    mixed = (u * real + (1.0 - u) * fake).detach().requires_grad_(True)
    scores = model(mixed)
    grads, = torch.autograd.grad(scores.sum(), mixed, create_graph=True)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()
