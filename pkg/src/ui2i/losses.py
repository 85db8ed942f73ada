"""Training objectives: least-squares adversarial losses with triangle class
targets, cycle and identity L1 terms, the pixelwise cross-domain N-pair
contrastive loss, and the weighted total."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import AbsnConv2d

# Class targets for the domain discriminator: vertices of a 2-D triangle for
# real / fake / identity, and scalar domain targets for the content
# discriminator.
TARGET_REAL = (math.sqrt(3) / 2, 0.0)
TARGET_FAKE = (-math.sqrt(3) / 6, 0.5)
TARGET_IDENTITY = (-math.sqrt(3) / 6, -0.5)
TARGET_DOMAIN_A = 1.0
TARGET_DOMAIN_B = 0.0


@dataclass
class LossWeights:
    lambda_cyc: float
    lambda_id: float
    lambda_cl: float
    tau: float = 0.07

    def __post_init__(self):
        if min(self.lambda_cyc, self.lambda_id, self.lambda_cl) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


SEGMENTATION_WEIGHTS = LossWeights(lambda_cyc=10.0, lambda_id=1.0, lambda_cl=0.1)
UNMIXING_WEIGHTS = LossWeights(lambda_cyc=5.0, lambda_id=0.0, lambda_cl=0.1)


def coordinate_mse(pred: torch.Tensor, target) -> torch.Tensor:
    """Mean over patches and batch of the squared Euclidean distance between
    2-channel patch predictions and a fixed 2-D class coordinate."""
    if pred.shape[1] != 2:
        raise ValueError(f"expected a 2-channel coordinate map, got {pred.shape[1]}")
    t = pred.new_tensor(target).view(1, 2, 1, 1)
    return ((pred - t) ** 2).sum(dim=1).mean()


def adv_loss_domain_disc(real, fake, identity_a=None, identity_b=None,
                         three_class=True) -> torch.Tensor:
    """Least-squares loss for the domain discriminator.

    Three-class mode pulls real pairs to the real coordinate, fake pairs to
    the fake coordinate, and both identity pairs to the identity coordinate;
    two-class mode uses scalar targets 1 (real) / 0 (fake).
    """
    if three_class:
        if identity_a is None or identity_b is None:
            raise ValueError("three-class mode requires both identity-pair outputs")
        return (coordinate_mse(real, TARGET_REAL)
                + coordinate_mse(fake, TARGET_FAKE)
                + coordinate_mse(identity_a, TARGET_IDENTITY)
                + coordinate_mse(identity_b, TARGET_IDENTITY))
    return ((real - 1.0) ** 2).mean() + (fake ** 2).mean()


def adv_loss_content_disc(score_a, score_b) -> torch.Tensor:
    """Least-squares loss pushing A-feature scores to 1 and B-feature scores to 0."""
    return ((score_a - TARGET_DOMAIN_A) ** 2).mean() + ((score_b - TARGET_DOMAIN_B) ** 2).mean()


def adv_loss_generators(fake, content_score_a, content_score_b,
                        identity_a=None, identity_b=None,
                        three_class=True) -> torch.Tensor:
    """Generator-side adversarial loss: fake (and identity) patch predictions
    are pushed toward the real target, content scores toward the midpoint of
    the two domain targets."""
    mid = (TARGET_DOMAIN_A + TARGET_DOMAIN_B) / 2
    content = ((content_score_a - mid) ** 2).mean() + ((content_score_b - mid) ** 2).mean()
    if three_class:
        if identity_a is None or identity_b is None:
            raise ValueError("three-class mode requires both identity-pair outputs")
        return (coordinate_mse(fake, TARGET_REAL)
                + coordinate_mse(identity_a, TARGET_REAL)
                + coordinate_mse(identity_b, TARGET_REAL)
                + content)
    return ((fake - 1.0) ** 2).mean() + content


def cycle_loss(x, y, x_cyc, y_cyc) -> torch.Tensor:
    """L1 reconstruction error of both translation round trips."""
    if x.shape != x_cyc.shape or y.shape != y_cyc.shape:
        raise ValueError("cycle reconstruction shape mismatch")
    return (x - x_cyc).abs().mean() + (y - y_cyc).abs().mean()


def identity_loss(x, x_id, y, y_id) -> torch.Tensor:
    """L1 penalty keeping each generator close to the identity on its own
    target domain. Only meaningful when the domains share a channel count."""
    if x.shape[1] != y.shape[1]:
        raise ValueError(
            "identity loss undefined for domains with different channel counts; "
            "disable it instead")
    if x.shape != x_id.shape or y.shape != y_id.shape:
        raise ValueError("identity image shape mismatch")
    return (x - x_id).abs().mean() + (y - y_id).abs().mean()


class ContrastiveProjection(nn.Module):
    """Per-pixel projection head for bottleneck features: two 1x1 mappings
    with a ReLU between, then l2 normalization to unit vectors."""

    def __init__(self, in_channels: int, width: int = 256):
        super().__init__()
        self.fc1 = AbsnConv2d(in_channels, width, 1, normalize=False)
        self.fc2 = AbsnConv2d(width, width, 1, normalize=False)

    def forward(self, z):
        h = self.fc2(F.relu(self.fc1(z)))
        norm = h.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return h / norm


def contrastive_loss(anchor, positive, negatives, tau,
                     max_negatives=256, generator=None) -> torch.Tensor:
    """Pixelwise N-pair loss for one anchor configuration.

    The positive similarity is taken at the pixel-aligned location of
    ``positive``; every pixel of every map in ``negatives`` acts as a
    negative for every anchor pixel (randomly subsampled to
    ``max_negatives`` vectors when the pool is larger).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if positive.shape != anchor.shape:
        raise ValueError("anchor and positive maps must have the same shape")
    s_pos = (anchor * positive).sum(dim=1)  # (B, H, W)
    pool = torch.cat([n.flatten(2) for n in negatives], dim=2)  # (B, D, N)
    n_total = pool.shape[2]
    if max_negatives is not None and n_total > max_negatives:
        idx = torch.randperm(n_total, generator=generator)[:max_negatives]
        pool = pool[:, :, idx.to(pool.device)]
    s_neg = torch.einsum("bdhw,bdn->bhwn", anchor, pool)
    logits = torch.cat([s_pos.unsqueeze(-1), s_neg], dim=-1) / tau
    return (torch.logsumexp(logits, dim=-1) - s_pos / tau).mean()


# Anchor configurations: (anchor, positive, negatives) over the projected
# bottleneck features of the current sample pair, the extra images x1/y1,
# the fake images, and (when computable) the A-side identity image.
ANCHOR_CONFIGS = (
    ("x", "fake_b", ("x1", "y", "y1", "fake_a")),
    ("y", "fake_a", ("y1", "x", "x1", "fake_b")),
    ("fake_a", "y", ("y1", "x", "x1", "fake_b")),
    ("identity_a", "x", ("x1", "y", "y1", "fake_a")),
)


def contrastive_total(projected: dict, tau, max_negatives=256,
                      generator=None) -> torch.Tensor:
    """Average the N-pair loss over the anchor configurations available in
    ``projected`` (the identity-anchored configuration is skipped when
    identity images are not constructed)."""
    losses = []
    for anchor_key, pos_key, neg_keys in ANCHOR_CONFIGS:
        if anchor_key not in projected:
            continue
        losses.append(contrastive_loss(
            projected[anchor_key], projected[pos_key],
            [projected[k] for k in neg_keys],
            tau, max_negatives=max_negatives, generator=generator))
    return torch.stack(losses).mean()


def total_loss(adv, cyc, ident, contrast, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the generator objective's components."""
    total = adv + weights.lambda_cyc * cyc + weights.lambda_cl * contrast
    if ident is not None:
        total = total + weights.lambda_id * ident
    return total
