"""Training objectives and their weighted combination.

Generator side: adversarial score, perceptual feature distance, haze-density
weighted pixel distance, and the decaying hint term. Critic side: score
difference plus the gradient penalty. Feature-space terms use mean-square
distance, the transmission-aware term mean-absolute; all reductions are
means so the weights stay resolution-independent.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import NumericError, ParameterError, ShapeError


@dataclass
class LossWeights:
    adv: float = 100.0
    per: float = 100.0
    trans: float = 100.0
    hint: float = 100.0
    critic: float = 1.0

    def __post_init__(self):
        for name in ("adv", "per", "trans", "hint", "critic"):
            if getattr(self, name) < 0:
                raise ParameterError(f"loss weight {name} must be nonnegative")


def _check_finite(value: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NumericError(f"{name} is not finite")
    return value


def adversarial_loss(score_fake: torch.Tensor) -> torch.Tensor:
    """Negated critic score of the generated image (batch mean)."""
    score = torch.as_tensor(score_fake)
    _check_finite(score, "critic score")
    return -score.mean()


def perceptual_loss(fake: torch.Tensor, clean: torch.Tensor, extractor,
                    reduction: str = "mse") -> torch.Tensor:
    if fake.shape != clean.shape:
        raise ShapeError(f"fake/clean shapes differ: {tuple(fake.shape)} vs {tuple(clean.shape)}")
    return _feature_distance(extractor(fake), extractor(clean), reduction)


def hint_loss(adapted: torch.Tensor, hint: torch.Tensor, reduction: str = "mse") -> torch.Tensor:
    if adapted.shape != hint.shape:
        raise ShapeError(f"adapted/hint shapes differ: {tuple(adapted.shape)} vs {tuple(hint.shape)}")
    return _feature_distance(adapted, hint, reduction)


def _feature_distance(a: torch.Tensor, b: torch.Tensor, reduction: str) -> torch.Tensor:
    diff = a - b
    if reduction == "mse":
        return diff.square().mean()
    if reduction == "mae":
        return diff.abs().mean()
    raise ParameterError(f"reduction must be 'mse' or 'mae', got {reduction!r}")


def transmission_loss(fake: torch.Tensor, clean: torch.Tensor, tau: torch.Tensor,
                      reduction: str = "mae") -> torch.Tensor:
    """Distance between tau-weighted images; tau broadcasts over channels."""
    if fake.shape != clean.shape:
        raise ShapeError(f"fake/clean shapes differ: {tuple(fake.shape)} vs {tuple(clean.shape)}")
    if tau.dim() == fake.dim() - 1:
        tau = tau.unsqueeze(-3)
    if tau.shape[-2:] != fake.shape[-2:]:
        raise ShapeError(f"tau spatial dims {tuple(tau.shape[-2:])} do not match "
                         f"image {tuple(fake.shape[-2:])}")
    return _feature_distance(tau * fake, tau * clean, reduction)


@dataclass
class LossParts:
    adv: torch.Tensor
    per: torch.Tensor
    trans: torch.Tensor
    hint: torch.Tensor | None = None


def integral_loss(parts: LossParts, weights: LossWeights, lam: float) -> torch.Tensor:
    """Weighted sum of the generator objectives with the hint term scaled by lam.

    At lam == 0 the hint term is dropped entirely (not multiplied by zero), so
    no gradient ever flows through the hint path in Stage II.
    """
    include_hint = lam > 0.0 and weights.hint > 0.0
    named = [("adversarial", parts.adv), ("perceptual", parts.per),
             ("transmission", parts.trans)]
    if include_hint:
        if parts.hint is None:
            raise ParameterError("hint part is required while lambda*hint_weight > 0")
        named.append(("hint", parts.hint))
    for name, value in named:
        _check_finite(torch.as_tensor(value), f"{name} loss")
    total = (weights.adv * parts.adv + weights.per * parts.per
             + weights.trans * parts.trans)
    if include_hint:
        total = total + lam * weights.hint * parts.hint
    return total


def critic_loss(score_real: torch.Tensor, score_fake: torch.Tensor,
                weights: LossWeights, gp: float = 0.0, gp_coeff: float = 0.0,
                orientation: str = "paper") -> torch.Tensor:
    """Critic objective plus the gradient-penalty term.

    "paper" keeps the printed sign, w_C*(C(real) - C(fake)); "wgan" is the
    conventional orientation w_C*(C(fake) - C(real)) that actually drives
    real scores above fake ones when minimized.
    """
    real = torch.as_tensor(score_real)
    fake = torch.as_tensor(score_fake)
    _check_finite(real, "critic score (real)")
    _check_finite(fake, "critic score (fake)")
    gap = real.mean() - fake.mean()
    if orientation == "wgan":
        gap = -gap
    elif orientation != "paper":
        raise ParameterError(f"orientation must be 'paper' or 'wgan', got {orientation!r}")
    total = weights.critic * gap + gp_coeff * torch.as_tensor(gp)
    return _check_finite(total, "critic loss")


# ---------------------------------------------------------------------------
# Perceptual feature extractors

class StubExtractor(nn.Module):
    """Identity features: perceptual loss degenerates to plain pixel MSE."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


class Vgg16Features(nn.Module):
    """Frozen ImageNet VGG16 truncated at its third-stage 3x3 conv."""

    # ImageNet channel statistics
    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)
    CONV3_3_INDEX = 14

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import VGG16_Weights, vgg16
            features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
        except Exception as exc:
            raise RuntimeError(
                "pretrained VGG16 is unavailable (torchvision missing or weights "
                "not downloadable); use the 'stub' extractor instead"
            ) from exc
        self.slice = nn.Sequential(*[features[i] for i in range(self.CONV3_3_INDEX + 1)])
        for p in self.slice.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1))
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.slice((x - self.mean) / self.std)


def make_extractor(kind: str) -> nn.Module:
    if kind == "stub":
        return StubExtractor()
    if kind == "vgg16":
        return Vgg16Features()
    raise ParameterError(f"unknown perceptual extractor {kind!r}")
