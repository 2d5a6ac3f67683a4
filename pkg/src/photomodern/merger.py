"""Merging of multiple stylization results and U-Net refinement.

A spatial attention module turns each reference's correlation matrix into a
per-pixel selection weight; softmax across references makes the weights a
per-pixel convex combination of the stylized features.  The merged feature
is projected to an intermediate image and refined by a U-Net.  The number
of references is a runtime value: nothing here depends on it at training
time.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import PSTNet
from .imageops import clamp01, laplacian_split, resize, to_image, to_tensor, validate_image
from .stylecode import StylePredictor, StylizedResult, stylize_single_t

UNET_ENCODER_WIDTHS = (64, 128, 256, 512, 512, 512, 512)  # first conv + 6 downsamples
MERGE_HIDDEN = 64


def _conv3(c_in: int, c_out: int) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, kernel_size=3, padding=1, padding_mode="replicate")


class SpatialAttention(nn.Module):
    """Correlation matrix -> per-pixel selection weight in (0, 1).

    The matrix is reduced over its style-position axis with max and mean,
    reshaped to the deepest level's grid, passed through a 7x7 conv and a
    sigmoid, and bilinearly upsampled to the stylized-feature resolution.
    """

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size=7, padding=3, padding_mode="replicate")

    def forward(self, cm: torch.Tensor, grid: tuple[int, int],
                out_size: tuple[int, int]) -> torch.Tensor:
        n, p, _ = cm.shape
        if p != grid[0] * grid[1]:
            raise ValueError(f"matrix with {p} positions does not fit grid {grid}")
        reduced = torch.stack([cm.max(dim=2).values, cm.mean(dim=2)], dim=1)
        maps = reduced.reshape(n, 2, grid[0], grid[1])
        w = torch.sigmoid(self.conv(maps))
        if tuple(out_size) != tuple(grid):
            w = F.interpolate(w, size=out_size, mode="bilinear", align_corners=False)
        return w


class MergeHead(nn.Module):
    """Project the attention-merged feature to the intermediate image."""

    def __init__(self, feature_channels: int, hidden: int = MERGE_HIDDEN):
        super().__init__()
        self.conv1 = _conv3(feature_channels, hidden)
        self.conv2 = _conv3(hidden, hidden)
        self.proj = nn.Conv2d(hidden, 3, kernel_size=1)

    def forward(self, merged_feature: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.conv1(merged_feature), 0.2)
        x = F.leaky_relu(self.conv2(x), 0.2)
        return (torch.tanh(self.proj(x)) + 1.0) * 0.5


class MergeOutput(NamedTuple):
    image: torch.Tensor           # intermediate merged image, N x 3 x H x W
    merged_feature: torch.Tensor  # convex combination of stylized features
    weights_raw: torch.Tensor     # R x 1 x H x W sigmoid attention maps
    weights: torch.Tensor         # R x 1 x H x W, softmax-normalized over R


class RefineUNet(nn.Module):
    """U-Net refiner; depth is truncated so the bottleneck stays >= 2 px.

    Encoder activations are leaky ReLU (0.2), decoder activations ReLU,
    instance norm throughout, and a conv + Tanh output head.  `depth` is
    the number of 2x downsamplings; inputs must be divisible by 2**depth.
    """

    def __init__(self, depth: int = 6, dropout: float = 0.0,
                 widths: Sequence[int] = UNET_ENCODER_WIDTHS):
        super().__init__()
        if not 1 <= depth <= len(widths) - 1:
            raise ValueError(f"depth must be in [1, {len(widths) - 1}]")
        self.depth = depth
        self.widths = tuple(widths[: depth + 1])
        self.stem = _conv3(3, self.widths[0])
        self.downs = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(self.widths[i], self.widths[i + 1], 4, stride=2, padding=1),
                nn.InstanceNorm2d(self.widths[i + 1], affine=True),
                nn.LeakyReLU(0.2),
            )
            for i in range(depth))
        self.ups = nn.ModuleList(
            _SkipUp(self.widths[i] + self.widths[i - 1], self.widths[i - 1], dropout)
            for i in range(depth, 0, -1))
        self.head = _conv3(self.widths[0], 3)

    def min_input(self) -> int:
        return 2 ** (self.depth + 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        h, w = img.shape[-2:]
        if min(h, w) < self.min_input():
            raise ValueError(f"input {h}x{w} below the {self.min_input()} px minimum "
                             f"for depth {self.depth}")
        if h % (1 << self.depth) or w % (1 << self.depth):
            raise ValueError(f"input size {h}x{w} must be divisible by {1 << self.depth}")
        x = F.leaky_relu(self.stem(img * 2.0 - 1.0), 0.2)
        skips = [x]
        for down in self.downs:
            x = down(x)
            skips.append(x)
        for i, up in enumerate(self.ups):
            x = up(x, skips[self.depth - 1 - i])
        return (torch.tanh(self.head(x)) + 1.0) * 0.5


class _SkipUp(nn.Module):
    """Upsample, concat the level-matched encoder skip, convolve."""

    def __init__(self, c_in: int, c_out: int, dropout: float):
        super().__init__()
        self.conv = _conv3(c_in, c_out)
        self.norm = nn.InstanceNorm2d(c_out, affine=True)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else None

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.norm(self.conv(torch.cat([x, skip], dim=1)))
        if self.dropout is not None:
            x = self.dropout(x)
        return F.relu(x)


def unet_depth_for(size: int, max_depth: int = len(UNET_ENCODER_WIDTHS) - 1) -> int:
    """Deepest truncation whose bottleneck is still >= 2 px for `size` inputs."""
    return max(1, min(max_depth, int(math.log2(size)) - 1))


def normalize_and_merge(raw_weights: torch.Tensor,
                        features: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax the R x 1 x H x W maps across references and take the per-pixel
    convex combination of the features."""
    weights = torch.softmax(raw_weights, dim=0)
    merged = sum(weights[i] * features[i] for i in range(len(features)))
    return merged, weights


def merge_results(attention: SpatialAttention, head: MergeHead,
                  results: Sequence[StylizedResult],
                  grid: tuple[int, int]) -> MergeOutput:
    """Attention-weighted merge of stylized features into an intermediate image."""
    if len(results) == 0:
        raise ValueError("merge needs at least one stylization result")
    shape = results[0].feature.shape
    if any(r.feature.shape != shape for r in results):
        raise ValueError("stylized features must share one shape")
    out_size = shape[-2:]
    raw = torch.cat([attention(r.correlation, grid, out_size) for r in results], dim=0)
    merged, weights = normalize_and_merge(raw, [r.feature for r in results])
    return MergeOutput(image=head(merged), merged_feature=merged,
                       weights_raw=raw, weights=weights)


class ModernizeResult(NamedTuple):
    image: torch.Tensor          # final refined output
    merged: torch.Tensor         # intermediate merged image
    weights: torch.Tensor        # R x 1 x H x W normalized attention
    weights_raw: torch.Tensor
    per_reference: list[StylizedResult]


class ModernizerNet(nn.Module):
    """Full pipeline: shared single stylization + merge + refinement."""

    def __init__(self, pst: PSTNet, predictor: StylePredictor,
                 unet_depth: int = 5, unet_dropout: float = 0.0):
        super().__init__()
        self.pst = pst
        self.predictor = predictor
        self.attention = SpatialAttention()
        self.merge_head = MergeHead(pst.widths[0])
        self.refiner = RefineUNet(depth=unet_depth, dropout=unet_dropout)

    def required_multiple(self) -> int:
        return max(8, 1 << self.refiner.depth)

    def modernize_t(self, content: torch.Tensor, content_high: torch.Tensor,
                    refs: Sequence[torch.Tensor]) -> ModernizeResult:
        if len(refs) == 0:
            raise ValueError("at least one reference is required")
        results = [stylize_single_t(self.pst, self.predictor, content, content_high, r)
                   for r in refs]
        grid = (content.shape[-2] // 8, content.shape[-1] // 8)
        merged = merge_results(self.attention, self.merge_head, results, grid)
        refined = self.refiner(merged.image)
        return ModernizeResult(image=refined, merged=merged.image,
                               weights=merged.weights, weights_raw=merged.weights_raw,
                               per_reference=results)


def modernize(net: ModernizerNet, content: np.ndarray,
              refs: Sequence[np.ndarray]) -> dict:
    """Numpy convenience wrapper: resizes references, pads, runs, crops back.

    Returns dict with `image`, `merged`, `weights` (R x H x W numpy arrays in
    [0,1]) and `stylized` (per-reference images).
    """
    content = validate_image(content)
    h, w = content.shape[:2]
    refs = [validate_image(r) for r in refs]
    refs = [r if r.shape[:2] == (h, w) else clamp01(resize(r, h, w, mode="bilinear"))
            for r in refs]
    m = net.required_multiple()
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        pad = ((0, ph), (0, pw), (0, 0))
        content = np.pad(content, pad, mode="reflect")
        refs = [np.pad(r, pad, mode="reflect") for r in refs]
    _, high = laplacian_split(content)
    with torch.no_grad():
        result = net.modernize_t(to_tensor(content), to_tensor(high),
                                 [to_tensor(r) for r in refs])
    crop = (slice(0, h), slice(0, w))
    return {
        "image": to_image(result.image)[crop],
        "merged": to_image(result.merged)[crop],
        "weights": result.weights[:, 0].numpy()[:, : h, : w],
        "stylized": [to_image(r.image)[crop] for r in result.per_reference],
    }
