"""Scalar training objectives and the adversarial gradient coupling.

The composite objective is

    total = l_bb + l_inst + lambda1 * l_percep + lambda2 * l_ce

where l_bb is smooth-L1 box regression, l_inst focal instance
classification, l_percep a feature-space reconstruction distance between
the input patch and its homogenized version, and l_ce the domain
classifier's cross entropy. The domain term becomes adversarial through
`grad_reverse`, which is the identity forward and multiplies the upstream
gradient by -strength on the way back, so the homogenizer is pushed to
*increase* domain confusion while the classifier itself still learns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_tensor_container, write_tensor_container
from .errors import DivergenceError

# Probabilities are clamped away from {0, 1} before any logarithm.
PROB_EPSILON = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the perceptual and domain terms in the total loss."""

    lambda1: float = 10.0
    lambda2: float = 25.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class LossBreakdown:
    """One training step's loss components and their weighted total."""

    l_bb: float
    l_inst: float
    l_percep: float
    l_ce: float
    total: float


def total_loss(l_bb: float, l_inst: float, l_percep: float, l_ce: float,
               weights: LossWeights) -> LossBreakdown:
    """Combine components into a LossBreakdown; the total is recomputed in
    float64 so logged rows recombine exactly. Non-finite components signal
    divergence."""
    comps = (float(l_bb), float(l_inst), float(l_percep), float(l_ce))
    if not all(math.isfinite(c) for c in comps):
        raise DivergenceError(f"non-finite loss component: bb={comps[0]}, inst={comps[1]}, "
                              f"percep={comps[2]}, ce={comps[3]}")
    total = comps[0] + comps[1] + weights.lambda1 * comps[2] + weights.lambda2 * comps[3]
    return LossBreakdown(*comps, total)


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean over elements of 0.5*d^2/beta for |d| < beta, else |d| - beta/2."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    d = (pred - target).abs()
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).mean()


def focal_loss(pred_probs: torch.Tensor, targets: torch.Tensor,
               params: FocalParams = FocalParams(),
               num_positives: int | None = None) -> torch.Tensor:
    """Focal loss over binary targets, normalized by the positive count.

    pred_probs are probabilities (clamped to (eps, 1-eps) internally);
    targets must be 0/1. When `num_positives` is None it defaults to the
    number of 1-entries in `targets`; the divisor is floored at 1 so empty
    patches stay finite.
    """
    if pred_probs.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_probs.shape)} vs {tuple(targets.shape)}")
    if not torch.all((targets == 0) | (targets == 1)):
        raise ValueError("focal targets must be 0 or 1")
    p = pred_probs.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
    is_pos = targets == 1
    p_t = torch.where(is_pos, p, 1.0 - p)
    alpha_t = torch.where(is_pos, torch.full_like(p, params.alpha),
                          torch.full_like(p, 1.0 - params.alpha))
    loss = -(alpha_t * (1.0 - p_t).pow(params.gamma) * p_t.log()).sum()
    if num_positives is None:
        num_positives = int(is_pos.sum().item())
    return loss / max(1, num_positives)


def domain_cross_entropy(logits: torch.Tensor, domain_ids) -> torch.Tensor:
    """Mean -log softmax(logits)[domain] over the batch.

    Accepts a (D,) vector with a scalar id or a (B, D) batch with (B,) ids.
    """
    if logits.dim() == 1:
        logits = logits[None]
    ids = torch.as_tensor(domain_ids, dtype=torch.long, device=logits.device).reshape(-1)
    if ids.shape[0] != logits.shape[0]:
        raise ValueError(f"got {logits.shape[0]} logit rows but {ids.shape[0]} domain ids")
    if ids.numel() and (ids.min() < 0 or ids.max() >= logits.shape[1]):
        raise ValueError(f"domain id out of range for {logits.shape[1]} domains")
    return -F.log_softmax(logits, dim=1).gather(1, ids[:, None]).mean()


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor,
                    extractor: "FeatureExtractor") -> torch.Tensor:
    """Mean squared feature-map distance, averaged over the extractor's
    configured layers. The extractor stays frozen; gradients only flow into
    x and x_hat."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    feats_a = extractor(x)
    feats_b = extractor(x_hat)
    layer_losses = [F.mse_loss(a, b) for a, b in zip(feats_a, feats_b)]
    return torch.stack(layer_losses).mean()


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, strength):
        ctx.strength = strength
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.strength * grad_output, None


def grad_reverse(x: torch.Tensor, strength: float = 1.0) -> torch.Tensor:
    """Identity forward; backward multiplies the upstream gradient by
    -strength. strength 0 detaches the producers from this branch."""
    if strength < 0:
        raise ValueError(f"strength must be >= 0, got {strength}")
    return _GradReverse.apply(x, strength)


class FeatureExtractor(nn.Module):
    """Fixed convolutional feature stack for the perceptual loss.

    Three conv -> SiLU -> avgpool blocks with deterministic seeded weights;
    the parameters are frozen and never registered with any optimizer.
    Kernels are centered to zero spatial mean, so the features respond to
    local structure rather than flat color offsets: the reconstruction
    anchor protects semantic content while leaving room for the adversarial
    coupling to normalize global appearance. `feature_layers` selects which
    block outputs enter the loss. Weights can be exported/imported through
    the tensor container format (layer-ordered arrays with shape headers),
    so an externally trained extractor can be dropped in.
    """

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64), in_channels: int = 3,
                 seed: int = 0, feature_layers: tuple[int, ...] = (0, 1, 2),
                 init_gain: float = 2.0):
        super().__init__()
        if any(i < 0 or i >= len(channels) for i in feature_layers):
            raise ValueError(f"feature_layers {feature_layers} out of range "
                             f"for {len(channels)} blocks")
        self.channels = tuple(channels)
        self.in_channels = in_channels
        self.feature_layers = tuple(feature_layers)
        self.init_gain = init_gain
        self.convs = nn.ModuleList()
        gen = torch.Generator().manual_seed(seed)
        prev = in_channels
        for ch in channels:
            conv = nn.Conv2d(prev, ch, kernel_size=3, padding=1)
            std = init_gain * math.sqrt(2.0 / (prev * 9))
            with torch.no_grad():
                w = torch.randn(conv.weight.shape, generator=gen) * std
                conv.weight.copy_(w - w.mean(dim=(2, 3), keepdim=True))
                conv.bias.zero_()
            self.convs.append(conv)
            prev = ch
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.avg_pool2d(F.silu(conv(x)), 2)
            feats.append(x)
        return [feats[i] for i in self.feature_layers]

    def save_weights(self, path) -> None:
        tensors = {}
        for i, conv in enumerate(self.convs):
            tensors[f"block{i}.weight"] = conv.weight.detach().numpy()
            tensors[f"block{i}.bias"] = conv.bias.detach().numpy()
        write_tensor_container(path, tensors, meta={
            "kind": "feature_extractor",
            "channels": list(self.channels),
            "in_channels": self.in_channels,
        })

    def load_weights(self, path) -> None:
        meta, tensors = read_tensor_container(path)
        if tuple(meta.get("channels", ())) != self.channels:
            raise ValueError(f"extractor weights at {path} have channels "
                             f"{meta.get('channels')}, expected {list(self.channels)}")
        with torch.no_grad():
            for i, conv in enumerate(self.convs):
                conv.weight.copy_(torch.from_numpy(tensors[f"block{i}.weight"]))
                conv.bias.copy_(torch.from_numpy(tensors[f"block{i}.bias"]))
