"""Pooling transformer block: an attention-free ViT-style block.

Two residual sub-blocks operating on c x h x w feature maps:
  Y = X + AvgPool3x3/s1(BN(X))
  Z = Y + Conv1x1_c(Swish(Conv1x1_{c*r}(BN(Y))))
The stride-1 average pool replaces self-attention as the token mixer;
replicate padding keeps the spatial shape and avoids boundary dimming.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

# torch momentum = 1 - decay; running stats decay at 0.99
BN_MOMENTUM = 0.01


def avg_pool_3x3_same(x: torch.Tensor) -> torch.Tensor:
    """3x3 stride-1 average pool with replicate padding (shape-preserving)."""
    return F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)


class PoolingTransformerBlock(nn.Module):

    def __init__(self, channels: int, mlp_ratio: int = 4):
        super().__init__()
        if channels < 1:
            raise ParameterError(f"channels must be >= 1, got {channels}")
        if mlp_ratio < 1:
            raise ParameterError(f"mlp_ratio must be >= 1, got {mlp_ratio}")
        self.channels = channels
        self.mlp_ratio = mlp_ratio
        self.norm1 = nn.BatchNorm2d(channels, momentum=BN_MOMENTUM)
        self.norm2 = nn.BatchNorm2d(channels, momentum=BN_MOMENTUM)
        self.fc1 = nn.Conv2d(channels, channels * mlp_ratio, kernel_size=1)
        self.fc2 = nn.Conv2d(channels * mlp_ratio, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(
                f"expected NCHW input with C={self.channels}, got {tuple(x.shape)}"
            )
        y = x + avg_pool_3x3_same(self.norm1(x))
        z = y + self.fc2(F.silu(self.fc1(self.norm2(y))))
        return z


def ptb_init(channels: int, mlp_ratio: int = 4, rng_seed: int = 0) -> PoolingTransformerBlock:
    """Build a block with deterministic fan-in-scaled uniform conv init."""
    torch.manual_seed(rng_seed)
    return PoolingTransformerBlock(channels, mlp_ratio)


def ptb_forward(x: torch.Tensor, block: PoolingTransformerBlock,
                training: bool = False) -> torch.Tensor:
    """Run a block in the requested mode without mutating its previous mode.

    Mode only controls batch-norm statistics; gradient tracking follows the
    caller's autograd context as usual.
    """
    was_training = block.training
    block.train(training)
    try:
        return block(x)
    finally:
        block.train(was_training)
