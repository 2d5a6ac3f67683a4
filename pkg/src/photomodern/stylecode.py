"""Style-code prediction for single-reference stylization.

Given encoder pyramids of a content/reference pair and the reference's
decoder tap features, this subnet predicts per-level adain statistics:
local window stats are extracted and refined, aligned onto the content
through a non-local correlation matrix, smoothed by residual blocks, and
fused with the reference's global channel statistics.  The fused codes
drive the backbone's decoder-side adain taps.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ADAIN_EPS, DecodeResult, PSTNet, adain, channel_stats, split_input
from .imageops import local_mean_t, local_std_t, to_image

apply_adain = adain  # adain consumes the predicted codes; defined with the backbone

EMBED_CHANNELS = 64  # per encoder level; 4 levels concatenate to 256
SIGMA_EPS = ADAIN_EPS
TAP_LEVELS = (2, 1)


class StyleCode(NamedTuple):
    mu: torch.Tensor     # N x C x H' x W'
    sigma: torch.Tensor  # same shape, strictly positive at producer heads


class StylizedResult(NamedTuple):
    feature: torch.Tensor      # stylized decoder feature, N x C x H x W
    correlation: torch.Tensor  # N x P x P row-stochastic matrix
    image: torch.Tensor        # stylized image, N x 3 x H x W in [0, 1]


def local_stats(feat: torch.Tensor, k: int = 3) -> tuple[torch.Tensor, torch.Tensor]:
    """Pre-refinement local mean/std maps of a feature (k x k windows)."""
    return local_mean_t(feat, k), local_std_t(feat, k, SIGMA_EPS)


def global_code(feat: torch.Tensor) -> StyleCode:
    """Channel-wise scalar mean/std, spatially repeated to the feature size."""
    mu, sigma = channel_stats(feat, SIGMA_EPS)
    return StyleCode(mu.expand_as(feat).contiguous(), sigma.expand_as(feat).contiguous())


def _conv3(c_in: int, c_out: int) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, kernel_size=3, padding=1, padding_mode="replicate")


class MapRefiner(nn.Module):
    """Two 3x3 convs refining one statistics map; optional softplus positivity."""

    def __init__(self, channels: int, positive: bool):
        super().__init__()
        self.conv1 = _conv3(channels, channels)
        self.conv2 = _conv3(channels, channels)
        self.positive = positive

    def forward(self, x):
        x = self.conv2(F.relu(self.conv1(x)))
        if self.positive:
            x = F.softplus(x) + SIGMA_EPS
        return x


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = _conv3(channels, channels)
        self.conv2 = _conv3(channels, channels)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class CodeFusion(nn.Module):
    """Concatenate aligned and global maps, project back to C channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.mu_proj = nn.Sequential(_conv3(2 * channels, channels), nn.ReLU(),
                                     _conv3(channels, channels))
        self.sigma_proj = nn.Sequential(_conv3(2 * channels, channels), nn.ReLU(),
                                        _conv3(channels, channels))

    def forward(self, aligned: StyleCode, global_: StyleCode) -> StyleCode:
        if aligned.mu.shape[2:] != global_.mu.shape[2:]:
            raise ValueError(f"aligned {tuple(aligned.mu.shape[2:])} and global "
                             f"{tuple(global_.mu.shape[2:])} codes differ spatially")
        mu = self.mu_proj(torch.cat([aligned.mu, global_.mu], dim=1))
        sigma = F.softplus(self.sigma_proj(torch.cat([aligned.sigma, global_.sigma], dim=1)))
        return StyleCode(mu, sigma + SIGMA_EPS)


class StylePredictor(nn.Module):
    """Local/global code extraction, non-local alignment, refinement, fusion."""

    def __init__(self, widths: tuple[int, int, int, int], embed_channels: int = EMBED_CHANNELS):
        super().__init__()
        self.widths = tuple(widths)
        # tap j=2 carries widths[2] channels, tap j=1 carries widths[1]
        self.tap_channels = {2: widths[2], 1: widths[1]}
        self.local_mu = nn.ModuleDict(
            {str(j): MapRefiner(c, positive=False) for j, c in self.tap_channels.items()})
        self.local_sigma = nn.ModuleDict(
            {str(j): MapRefiner(c, positive=True) for j, c in self.tap_channels.items()})
        # shared 1x1 projections, applied to content and style pyramids alike
        self.embed = nn.ModuleList(
            [nn.Conv2d(c, embed_channels, kernel_size=1) for c in widths])
        self.embed_dim = embed_channels * len(widths)
        self.refine1 = nn.Sequential(*[ResidualBlock(2 * self.tap_channels[1]) for _ in range(3)])
        self.refine2 = nn.Sequential(*[ResidualBlock(2 * self.tap_channels[2]) for _ in range(2)])
        self.fuse = nn.ModuleDict({str(j): CodeFusion(c) for j, c in self.tap_channels.items()})

    # -- code extraction ----------------------------------------------------

    def extract_local_codes(self, taps: dict[int, torch.Tensor]) -> dict[int, StyleCode]:
        out = {}
        for j in TAP_LEVELS:
            mean_map, std_map = local_stats(taps[j])
            out[j] = StyleCode(self.local_mu[str(j)](mean_map),
                               self.local_sigma[str(j)](std_map))
        return out

    def extract_global_codes(self, taps: dict[int, torch.Tensor]) -> dict[int, StyleCode]:
        return {j: global_code(taps[j]) for j in TAP_LEVELS}

    # -- non-local alignment --------------------------------------------------

    def correlate(self, content_feats: list[torch.Tensor],
                  style_feats: list[torch.Tensor]) -> torch.Tensor:
        """Row-stochastic content-position x style-position affinity matrix."""
        size = content_feats[-1].shape[-2:]
        q = self._embed_pyramid(content_feats, size)
        k = self._embed_pyramid(style_feats, size)
        logits = torch.bmm(q, k.transpose(1, 2)) * (self.embed_dim ** 0.5)
        return torch.softmax(logits, dim=-1)

    def _embed_pyramid(self, feats: list[torch.Tensor], size) -> torch.Tensor:
        parts = []
        for conv, feat in zip(self.embed, feats):
            e = conv(feat)
            if e.shape[-2:] != tuple(size):
                e = F.interpolate(e, size=size, mode="nearest")
            parts.append(e)
        emb = torch.cat(parts, dim=1)                      # N x D x h4 x w4
        emb = emb.flatten(2).transpose(1, 2)               # N x P x D
        return F.normalize(emb, dim=-1, eps=1e-8)

    def align_codes(self, code: StyleCode, cm: torch.Tensor,
                    grid: tuple[int, int]) -> StyleCode:
        """Carry style-position codes onto content positions via the matrix."""
        return StyleCode(self._align_map(code.mu, cm, grid),
                         self._align_map(code.sigma, cm, grid))

    @staticmethod
    def _align_map(m: torch.Tensor, cm: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        n, c, h, w = m.shape
        small = F.interpolate(m, size=grid, mode="nearest") if (h, w) != tuple(grid) else m
        flat = small.flatten(2).transpose(1, 2)            # N x P x C (style positions)
        moved = torch.bmm(cm, flat)                        # N x P x C (content positions)
        out = moved.transpose(1, 2).reshape(n, c, grid[0], grid[1])
        if (h, w) != tuple(grid):
            out = F.interpolate(out, size=(h, w), mode="nearest")
        return out

    def refine_codes(self, aligned: dict[int, StyleCode]) -> dict[int, StyleCode]:
        out = {}
        for j, blocks in ((1, self.refine1), (2, self.refine2)):
            c = aligned[j].mu.shape[1]
            refined = blocks(torch.cat([aligned[j].mu, aligned[j].sigma], dim=1))
            out[j] = StyleCode(refined[:, :c], refined[:, c:])
        return out

    def fuse_codes(self, refined: StyleCode, global_: StyleCode, level: int) -> StyleCode:
        return self.fuse[str(level)](refined, global_)

    # -- full pipeline ----------------------------------------------------------

    def predict_codes(self, content_feats: list[torch.Tensor],
                      style_taps: dict[int, torch.Tensor],
                      style_feats: list[torch.Tensor]
                      ) -> tuple[dict[int, StyleCode], torch.Tensor]:
        local = self.extract_local_codes(style_taps)
        global_ = self.extract_global_codes(style_taps)
        cm = self.correlate(content_feats, style_feats)
        grid = tuple(content_feats[-1].shape[-2:])
        aligned = {j: self.align_codes(local[j], cm, grid) for j in TAP_LEVELS}
        refined = self.refine_codes(aligned)
        fused = {j: self.fuse_codes(refined[j], global_[j], j) for j in TAP_LEVELS}
        return fused, cm


def stylize_single_t(pst: PSTNet, predictor: StylePredictor,
                     content: torch.Tensor, content_high: torch.Tensor,
                     style: torch.Tensor) -> StylizedResult:
    """Tensor-level single-reference stylization (differentiable end to end)."""
    c_feats = pst.encode(content)
    s_feats = pst.encode(style)
    s_dec: DecodeResult = pst.decode(s_feats)
    codes, cm = predictor.predict_codes(c_feats, s_dec.taps, s_feats)
    c_dec = pst.decode(c_feats, high=content_high, codes=codes)
    return StylizedResult(feature=c_dec.feature, correlation=cm, image=c_dec.image)


def stylize_single(pst: PSTNet, predictor: StylePredictor,
                   content, style) -> tuple[StylizedResult, object]:
    """Numpy image in, (result, numpy stylized image) out; inference only."""
    c_t, c_high = split_input(content)
    s_t, _ = split_input(style)
    with torch.no_grad():
        result = stylize_single_t(pst, predictor, c_t, c_high, s_t)
    return result, to_image(result.image)
