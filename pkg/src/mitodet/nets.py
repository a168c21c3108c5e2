"""The three networks and their combined training forward pass.

A U-Net homogenizer translates patches into a common appearance space; a
small convolutional domain classifier sits behind a gradient reversal so
its training signal pushes the homogenizer to erase scanner cues; an
anchor-based detector with a two-level feature pyramid consumes the
homogenized image. `DetectionPipeline.forward_train` wires all of it into
the composite loss.

The domain head normally attaches to the homogenizer *output*; the
"latent" placement (head on the U-Net bottleneck) is kept as an ablation,
in which case no domain gradient can reach the decoder at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import boxgeom
from .boxgeom import AnchorConfig
from .errors import ConfigError
from .losses import (FeatureExtractor, FocalParams, LossBreakdown, LossWeights,
                     domain_cross_entropy, focal_loss, grad_reverse,
                     perceptual_loss, smooth_l1, total_loss)

# The detector backbone emits pyramid levels at these strides; anchor
# strides must match them.
BACKBONE_STRIDES = (8, 16)

HEAD_DECODER = "decoder"
HEAD_LATENT = "latent"


@dataclass(frozen=True)
class ModelConfig:
    """Sizes and wiring of the homogenizer, domain head and detector."""

    unet_depth: int = 4
    unet_base_channels: int = 16
    num_domains: int = 3
    num_classes: int = 2
    anchor_strides: tuple[int, ...] = BACKBONE_STRIDES
    anchor_scales: tuple[float, ...] = (1.0, 1.5, 2.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    detector_channels: int = 64
    domain_head_channels: int = 32
    grl_strength: float = 1.0
    domain_head_placement: str = HEAD_DECODER
    homogenizer_enabled: bool = True
    feature_layers: tuple[int, ...] = (0, 1, 2)
    extractor_channels: tuple[int, ...] = (16, 32, 64)
    extractor_seed: int = 0
    extractor_gain: float = 2.0

    def __post_init__(self):
        if self.unet_depth < 1:
            raise ConfigError(f"unet_depth must be >= 1, got {self.unet_depth}")
        if self.unet_base_channels < 1 or self.detector_channels < 2 \
                or self.domain_head_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.num_domains < 2:
            raise ConfigError(f"num_domains must be >= 2, got {self.num_domains}")
        if self.num_classes != 2:
            raise ConfigError("the detector is defined for exactly two classes")
        if tuple(self.anchor_strides) != BACKBONE_STRIDES:
            raise ConfigError(f"anchor_strides must be {BACKBONE_STRIDES} to match the "
                              f"detector's pyramid levels, got {self.anchor_strides}")
        if self.domain_head_placement not in (HEAD_DECODER, HEAD_LATENT):
            raise ConfigError(f"unknown domain_head_placement "
                              f"'{self.domain_head_placement}'")
        if self.grl_strength < 0:
            raise ConfigError("grl_strength must be >= 0")

    @property
    def anchor_cfg(self) -> AnchorConfig:
        return AnchorConfig(tuple(self.anchor_strides), tuple(self.anchor_scales),
                            tuple(self.anchor_ratios))

    @property
    def bottleneck_channels(self) -> int:
        return self.unet_base_channels * 2 ** self.unet_depth


@dataclass
class DetectorOutput:
    """Per-anchor class logits (B, A, K) and box offsets (B, A, 4), with A
    matching boxgeom.generate_anchors for the input size."""

    class_logits: torch.Tensor
    box_offsets: torch.Tensor


@dataclass
class ForwardBundle:
    """Everything a training step produces besides the scalar breakdown."""

    homogenized: torch.Tensor
    domain_logits: torch.Tensor | None
    detector_out: DetectorOutput
    total: torch.Tensor  # scalar, differentiable


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


def _conv_block(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        _norm(out_ch),
        nn.SiLU(),
    )


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(_conv_block(in_ch, out_ch), _conv_block(out_ch, out_ch))


class Homogenizer(nn.Module):
    """U-Net with concatenated skips, nearest-neighbor upsampling and a
    logistic output so values stay in [0, 1]."""

    def __init__(self, depth: int = 4, base_channels: int = 16, in_channels: int = 3):
        super().__init__()
        self.depth = depth
        c = base_channels
        self.stem = _double_conv(in_channels, c)
        self.downs = nn.ModuleList(
            [_double_conv(c * 2 ** i, c * 2 ** (i + 1)) for i in range(depth)])
        self.ups = nn.ModuleList(
            [_conv_block(c * 2 ** (i + 1), c * 2 ** i) for i in reversed(range(depth))])
        self.decs = nn.ModuleList(
            [_double_conv(c * 2 ** (i + 1), c * 2 ** i) for i in reversed(range(depth))])
        self.out_conv = nn.Conv2d(c, in_channels, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (homogenized image in [0,1], bottleneck feature map)."""
        size = 2 ** self.depth
        if x.shape[-2] % size or x.shape[-1] % size:
            raise ConfigError(f"input {tuple(x.shape[-2:])} not divisible by 2^depth={size}")
        skips = []
        h = self.stem(x)
        for down in self.downs:
            skips.append(h)
            h = down(F.max_pool2d(h, 2))
        latent = h
        for up, dec in zip(self.ups, self.decs):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = dec(torch.cat([h, skips.pop()], dim=1))
        return torch.sigmoid(self.out_conv(h)), latent

    def encoder_parameters(self) -> Iterator[nn.Parameter]:
        """Stem and down path, i.e. everything producing the bottleneck."""
        yield from self.stem.parameters()
        for m in self.downs:
            yield from m.parameters()

    def decoder_parameters(self) -> Iterator[nn.Parameter]:
        for m in self.ups:
            yield from m.parameters()
        for m in self.decs:
            yield from m.parameters()
        yield from self.out_conv.parameters()


class DomainHead(nn.Module):
    """Three stride-2 conv blocks, global average pooling, one linear."""

    def __init__(self, in_channels: int, num_domains: int, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.blocks = nn.Sequential(
            _conv_block(in_channels, c, stride=2),
            _conv_block(c, 2 * c, stride=2),
            _conv_block(2 * c, 4 * c, stride=2),
        )
        self.fc = nn.Linear(4 * c, num_domains)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(x)
        return self.fc(h.mean(dim=(2, 3)))


class _ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.n1 = _norm(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.n2 = _norm(ch)

    def forward(self, x):
        h = F.silu(self.n1(self.conv1(x)))
        h = self.n2(self.conv2(h))
        return F.silu(x + h)


class Detector(nn.Module):
    """Small residual backbone, two-level feature pyramid (strides 8 and
    16), and class/box subnets shared across levels, retina style."""

    def __init__(self, anchor_cfg: AnchorConfig, num_classes: int = 2,
                 channels: int = 64, in_channels: int = 3, tower_depth: int = 4):
        super().__init__()
        self.anchor_cfg = anchor_cfg
        self.num_classes = num_classes
        half = channels // 2
        self.stem = _conv_block(in_channels, half, stride=2)          # stride 2
        self.stage1 = nn.Sequential(_conv_block(half, half, stride=2),
                                    _ResidualBlock(half))             # stride 4
        self.stage2 = nn.Sequential(_conv_block(half, channels, stride=2),
                                    _ResidualBlock(channels))         # stride 8
        self.stage3 = nn.Sequential(_conv_block(channels, channels, stride=2),
                                    _ResidualBlock(channels))         # stride 16
        self.lateral2 = nn.Conv2d(channels, channels, 1)
        self.lateral3 = nn.Conv2d(channels, channels, 1)
        self.smooth2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.smooth3 = nn.Conv2d(channels, channels, 3, padding=1)

        k = anchor_cfg.anchors_per_cell
        self.cls_tower = nn.Sequential(*[_conv_block(channels, channels)
                                         for _ in range(tower_depth)])
        self.box_tower = nn.Sequential(*[_conv_block(channels, channels)
                                         for _ in range(tower_depth)])
        self.cls_head = nn.Conv2d(channels, k * num_classes, 3, padding=1)
        self.box_head = nn.Conv2d(channels, k * 4, 3, padding=1)
        # rare-positive prior so untrained focal loss is not swamped by negatives
        prior = 0.01
        nn.init.constant_(self.cls_head.bias, -math.log((1.0 - prior) / prior))
        nn.init.zeros_(self.box_head.bias)

    def forward(self, x: torch.Tensor) -> DetectorOutput:
        h = self.stem(x)
        h = self.stage1(h)
        c2 = self.stage2(h)
        c3 = self.stage3(c2)
        p3 = self.lateral3(c3)
        p2 = self.lateral2(c2) + F.interpolate(p3, scale_factor=2, mode="nearest")
        levels = [self.smooth2(p2), self.smooth3(p3)]  # strides 8, 16

        k = self.anchor_cfg.anchors_per_cell
        cls_out, box_out = [], []
        for lvl in levels:
            b, _, gh, gw = lvl.shape
            cls = self.cls_head(self.cls_tower(lvl))
            box = self.box_head(self.box_tower(lvl))
            # (B, k*K, H, W) -> (B, H*W*k, K), matching generate_anchors order
            cls = cls.view(b, k, self.num_classes, gh, gw) \
                     .permute(0, 3, 4, 1, 2).reshape(b, gh * gw * k, self.num_classes)
            box = box.view(b, k, 4, gh, gw) \
                     .permute(0, 3, 4, 1, 2).reshape(b, gh * gw * k, 4)
            cls_out.append(cls)
            box_out.append(box)
        return DetectorOutput(torch.cat(cls_out, dim=1), torch.cat(box_out, dim=1))


class DetectionPipeline(nn.Module):
    """Homogenizer + adversarial domain head + detector, or just the
    detector when the homogenizer is disabled (the raw-image baseline)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.detector = Detector(cfg.anchor_cfg, cfg.num_classes,
                                 cfg.detector_channels)
        if cfg.homogenizer_enabled:
            self.homogenizer = Homogenizer(cfg.unet_depth, cfg.unet_base_channels)
            head_in = 3 if cfg.domain_head_placement == HEAD_DECODER \
                else cfg.bottleneck_channels
            self.domain_head = DomainHead(head_in, cfg.num_domains,
                                          cfg.domain_head_channels)
            self.extractor = FeatureExtractor(cfg.extractor_channels,
                                              seed=cfg.extractor_seed,
                                              feature_layers=cfg.feature_layers,
                                              init_gain=cfg.extractor_gain)
        else:
            self.homogenizer = None
            self.domain_head = None
            self.extractor = None
        self._anchor_cache: dict[tuple[int, int], np.ndarray] = {}

    def anchors_for(self, height: int, width: int) -> np.ndarray:
        key = (height, width)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = boxgeom.generate_anchors(
                self.cfg.anchor_cfg, height, width)
        return self._anchor_cache[key]

    def homogenize(self, x: torch.Tensor) -> torch.Tensor:
        """Identity when the homogenizer is disabled; otherwise the U-Net
        output, same shape as the input, values in [0, 1]."""
        if not torch.isfinite(x).all():
            raise ValueError("input image contains non-finite values")
        if self.homogenizer is None:
            return x
        return self.homogenizer(x)[0]

    def classify_domain(self, h: torch.Tensor, strength: float | None = None) -> torch.Tensor:
        """Domain logits from the (gradient-reversed) head input: the
        homogenized image for decoder placement, the bottleneck for latent
        placement."""
        if self.domain_head is None:
            raise ConfigError("model was built without a domain head")
        if strength is None:
            strength = self.cfg.grl_strength
        return self.domain_head(grad_reverse(h, strength))

    def detect(self, h: torch.Tensor) -> DetectorOutput:
        out = self.detector(h)
        expected = self.cfg.anchor_cfg.num_anchors(h.shape[-2], h.shape[-1])
        assert out.class_logits.shape[1] == expected
        return out

    def predict_domain(self, x: torch.Tensor) -> torch.Tensor:
        """Domain logits for raw inputs via the configured head placement;
        inference only, no gradient coupling."""
        if self.homogenizer is None:
            raise ConfigError("model was built without a domain head")
        h, latent = self.homogenizer(x)
        inp = h if self.cfg.domain_head_placement == HEAD_DECODER else latent
        return self.domain_head(inp)

    def _detector_targets(self, anchors: np.ndarray, gt_boxes: np.ndarray,
                          gt_classes: np.ndarray, pos_threshold: float,
                          neg_threshold: float):
        asn = boxgeom.match_anchors(anchors, gt_boxes, pos_threshold, neg_threshold)
        num_anchors = anchors.shape[0]
        cls_target = np.zeros((num_anchors, self.cfg.num_classes), dtype=np.float32)
        pos = asn.positive_mask
        if pos.any():
            cls_target[pos, gt_classes[asn.gt_index[pos]]] = 1.0
        include = ~asn.ignore_mask
        box_target = np.zeros((int(pos.sum()), 4), dtype=np.float32)
        if pos.any():
            box_target = boxgeom.encode_boxes(anchors[pos],
                                              gt_boxes[asn.gt_index[pos]]).astype(np.float32)
        return pos, include, cls_target, box_target, asn.num_positives

    def forward_train(self, images: torch.Tensor, domain_indices: torch.Tensor,
                      annotations: Sequence[tuple[np.ndarray, np.ndarray]],
                      labeled_mask: torch.Tensor, weights: LossWeights,
                      focal_params: FocalParams = FocalParams(),
                      smooth_l1_beta: float = 1.0,
                      pos_threshold: float = 0.5, neg_threshold: float = 0.4,
                      grl_strength: float | None = None
                      ) -> tuple[LossBreakdown, ForwardBundle]:
        """One training forward pass over a batch.

        `annotations[i]` is a ((G,4) box array, (G,) class array) pair;
        samples with labeled_mask False (unlabeled-source domains)
        contribute only the perceptual and domain terms.
        """
        batch = images.shape[0]
        if len(annotations) != batch or domain_indices.shape[0] != batch:
            raise ValueError("batch size mismatch between images, domains, annotations")
        zero = torch.zeros((), dtype=images.dtype, device=images.device)

        if self.homogenizer is not None:
            homog, latent = self.homogenizer(images)
            l_percep = perceptual_loss(images, homog, self.extractor)
            head_input = homog if self.cfg.domain_head_placement == HEAD_DECODER else latent
            domain_logits = self.classify_domain(head_input, grl_strength)
            l_ce = domain_cross_entropy(domain_logits, domain_indices)
        else:
            homog, domain_logits = images, None
            l_percep, l_ce = zero, zero

        det_out = self.detect(homog)
        probs = torch.sigmoid(det_out.class_logits)
        anchors = self.anchors_for(images.shape[-2], images.shape[-1])

        inst_terms, bb_terms = [], []
        for i in range(batch):
            if not bool(labeled_mask[i]):
                continue
            gt_boxes, gt_classes = annotations[i]
            gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
            gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
            pos, include, cls_target, box_target, npos = self._detector_targets(
                anchors, gt_boxes, gt_classes, pos_threshold, neg_threshold)
            include_t = torch.from_numpy(include)
            target_t = torch.from_numpy(cls_target).to(images.dtype)
            inst_terms.append(focal_loss(probs[i][include_t], target_t[include_t],
                                         focal_params, num_positives=npos))
            if npos > 0:
                pos_t = torch.from_numpy(pos)
                bb_terms.append(smooth_l1(det_out.box_offsets[i][pos_t],
                                          torch.from_numpy(box_target).to(images.dtype),
                                          beta=smooth_l1_beta))
        l_inst = torch.stack(inst_terms).mean() if inst_terms else zero
        l_bb = torch.stack(bb_terms).mean() if bb_terms else zero

        total = l_bb + l_inst + weights.lambda1 * l_percep + weights.lambda2 * l_ce
        breakdown = total_loss(l_bb.item(), l_inst.item(), l_percep.item(),
                               l_ce.item(), weights)
        bundle = ForwardBundle(homogenized=homog, domain_logits=domain_logits,
                               detector_out=det_out, total=total)
        return breakdown, bundle


def build_model(cfg: ModelConfig, seed: int = 0) -> DetectionPipeline:
    """Deterministically initialized pipeline: same config and seed give
    bit-identical parameters."""
    torch.manual_seed(seed)
    return DetectionPipeline(cfg)


def parameter_count(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters()
               if not trainable_only or p.requires_grad)
