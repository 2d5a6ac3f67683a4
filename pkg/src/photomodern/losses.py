"""Training objectives: masked/plain L1, perceptual, contextual, edge-aware
smoothness, and least-squares adversarial losses with a patch discriminator.

Perceptual features come from a pluggable extractor exposing `relu3_1` and
`relu4_1`.  When no pretrained weights are configured, a frozen seed-fixed
random conv stack with the same layer names keeps the whole pipeline
runnable offline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CONTEXTUAL_BANDWIDTH = 0.1
CONTEXTUAL_MAX_POSITIONS = 4096
SMOOTHNESS_ALPHA = 10.0
_EPS = 1e-5

_LUMA = (0.299, 0.587, 0.114)


@dataclass
class LossWeights:
    """Relative weights; stage-2 uses (masked, perceptual, contextual),
    stage-3 uses (l1, perceptual, smooth, adv)."""

    masked: float = 1.0
    perceptual: float = 1.0
    contextual: float = 1.0
    l1: float = 2.0
    smooth: float = 3.0
    adv: float = 0.2


# ---------------------------------------------------------------------------
# feature extractors

class FallbackExtractor(nn.Module):
    """Frozen random conv stack standing in for pretrained VGG features."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(),
                                    nn.Conv2d(16, 16, 3, padding=1), nn.ReLU())
        self.block2 = nn.Sequential(nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(),
                                    nn.Conv2d(32, 32, 3, padding=1), nn.ReLU())
        self.block3 = nn.Sequential(nn.Conv2d(32, 64, 3, padding=1), nn.ReLU())
        self.block4 = nn.Sequential(nn.Conv2d(64, 96, 3, padding=1), nn.ReLU())
        gen = torch.Generator().manual_seed(seed)
        for p in self.parameters():
            if p.ndim > 1:
                fan_in = p[0].numel()
                p.data.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            else:
                p.data.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, img: torch.Tensor) -> dict[str, torch.Tensor]:
        x = (img - 0.5) / 0.25
        x = self.block1(x)
        x = self.block2(F.avg_pool2d(x, 2))
        r3 = self.block3(F.avg_pool2d(x, 2))       # H/4, named to mirror VGG taps
        r4 = self.block4(F.avg_pool2d(r3, 2))      # H/8
        return {"relu3_1": r3, "relu4_1": r4}


class Vgg19Extractor(nn.Module):
    """relu3_1/relu4_1 features of VGG-19 loaded from a local weights file."""

    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: str):
        super().__init__()
        from torchvision.models import vgg19

        net = vgg19(weights=None)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        self.to_relu3_1 = net.features[:12]
        self.to_relu4_1 = net.features[12:21]
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.register_buffer("mean", torch.tensor(self._MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self._STD).view(1, 3, 1, 1))

    def forward(self, img: torch.Tensor) -> dict[str, torch.Tensor]:
        x = (img - self.mean) / self.std
        r3 = self.to_relu3_1(x)
        return {"relu3_1": r3, "relu4_1": self.to_relu4_1(r3)}


def make_extractor(weights_path: str | None = None, seed: int = 0) -> nn.Module:
    if weights_path:
        return Vgg19Extractor(weights_path)
    return FallbackExtractor(seed)


# ---------------------------------------------------------------------------
# pixel losses

def masked_l1(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over the masked pixels (per channel)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if mask.ndim == 2:
        mask = mask[None, None]
    mask = mask.to(pred.dtype)
    count = mask.sum() * pred.shape[1]
    if count.item() == 0:
        warnings.warn("masked_l1 called with an empty mask; returning 0")
        return pred.sum() * 0.0
    return ((pred - gt).abs() * mask).sum() / count


def l1_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return (pred - gt).abs().mean()


# ---------------------------------------------------------------------------
# feature-space losses

def perceptual_loss(pred: torch.Tensor, gt: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Mean squared relu4_1 feature distance."""
    fp = extractor(pred)["relu4_1"]
    with torch.no_grad():
        fg = extractor(gt)["relu4_1"]
    return F.mse_loss(fp, fg)


def contextual_loss(pred: torch.Tensor, gt: torch.Tensor, extractor: nn.Module,
                    bandwidth: float = CONTEXTUAL_BANDWIDTH,
                    max_positions: int = CONTEXTUAL_MAX_POSITIONS) -> torch.Tensor:
    """Contextual similarity over relu3_1 and relu4_1, summed.

    Cosine distances between all feature-position pairs are converted to
    affinities (softmax with the given bandwidth after nearest-neighbour
    normalization); the loss is -log of the mean best affinity.
    """
    fp = extractor(pred)
    with torch.no_grad():
        fg = extractor(gt)
    total = pred.sum() * 0.0
    for name in ("relu3_1", "relu4_1"):
        total = total + _contextual_level(fp[name], fg[name], bandwidth, max_positions)
    return total


def _contextual_level(x: torch.Tensor, y: torch.Tensor, h: float,
                      max_positions: int) -> torch.Tensor:
    x = _subsample_positions(x.flatten(2), max_positions)   # N x C x Px
    y = _subsample_positions(y.flatten(2), max_positions)
    mu = y.mean(dim=2, keepdim=True)
    xn = F.normalize(x - mu, dim=1, eps=1e-8)
    yn = F.normalize(y - mu, dim=1, eps=1e-8)
    sim = torch.bmm(xn.transpose(1, 2), yn)                  # N x Px x Py
    dist = 1.0 - sim
    dist_norm = dist / (dist.min(dim=2, keepdim=True).values + _EPS)
    weight = torch.exp((1.0 - dist_norm) / h)
    affinity = weight / weight.sum(dim=2, keepdim=True)
    best = affinity.max(dim=1).values                        # per target position
    return -torch.log(best.mean(dim=1).clamp_min(1e-12)).mean()


def _subsample_positions(flat: torch.Tensor, cap: int) -> torch.Tensor:
    p = flat.shape[2]
    if p <= cap:
        return flat
    idx = torch.linspace(0, p - 1, cap, device=flat.device).round().long()
    return flat[:, :, idx]


def smoothness_loss(pred: torch.Tensor, alpha: float = SMOOTHNESS_ALPHA) -> torch.Tensor:
    """Total variation damped near the image's own luminance edges."""
    lum = (_LUMA[0] * pred[:, 0] + _LUMA[1] * pred[:, 1] + _LUMA[2] * pred[:, 2])[:, None]
    # forward differences, cropped to the common (H-1) x (W-1) grid
    dx = (pred[:, :, :, 1:] - pred[:, :, :, :-1])[:, :, :-1, :]
    dy = (pred[:, :, 1:, :] - pred[:, :, :-1, :])[:, :, :, :-1]
    gx = (lum[:, :, :, 1:] - lum[:, :, :, :-1])[:, :, :-1, :]
    gy = (lum[:, :, 1:, :] - lum[:, :, :-1, :])[:, :, :, :-1]
    tv = dx.abs().sum(dim=1) + dy.abs().sum(dim=1)
    weight = torch.exp(-alpha * (gx.abs() + gy.abs()))[:, 0]
    return (tv * weight).mean()


# ---------------------------------------------------------------------------
# adversarial

class PatchDiscriminator(nn.Module):
    """PatchGAN discriminator; n_layers=3 gives the 70x70 receptive field,
    n_layers=2 the truncated desk-scale variant."""

    def __init__(self, n_layers: int = 3, base: int = 64):
        super().__init__()
        layers = [nn.Conv2d(3, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        ch = base
        for i in range(1, n_layers):
            layers += [nn.Conv2d(ch, min(base * 2 ** i, 512), 4, stride=2, padding=1),
                       nn.InstanceNorm2d(min(base * 2 ** i, 512), affine=True),
                       nn.LeakyReLU(0.2)]
            ch = min(base * 2 ** i, 512)
        nxt = min(base * 2 ** n_layers, 512)
        layers += [nn.Conv2d(ch, nxt, 4, stride=1, padding=1),
                   nn.InstanceNorm2d(nxt, affine=True),
                   nn.LeakyReLU(0.2),
                   nn.Conv2d(nxt, 1, 4, stride=1, padding=1)]
        self.body = nn.Sequential(*layers)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.body(img * 2.0 - 1.0)


def lsgan_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((d_fake - 1.0) ** 2).mean()


def lsgan_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((d_real - 1.0) ** 2).mean() + 0.5 * (d_fake ** 2).mean()


def adversarial_losses(pred: torch.Tensor, gt: torch.Tensor,
                       disc: nn.Module) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator, discriminator) least-squares objectives."""
    g_loss = lsgan_g_loss(disc(pred))
    d_loss = lsgan_d_loss(disc(gt), disc(pred.detach()))
    return g_loss, d_loss


# ---------------------------------------------------------------------------
# stage objectives

def stage2_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor,
                weights: LossWeights, extractor: nn.Module
                ) -> tuple[torch.Tensor, dict[str, float]]:
    """Single-stylization objective: masked L1 + perceptual + contextual."""
    zero = pred.sum() * 0.0
    parts = {
        "masked_l1": masked_l1(pred, gt, mask) if weights.masked else zero,
        "perceptual": perceptual_loss(pred, gt, extractor) if weights.perceptual else zero,
        "contextual": contextual_loss(pred, gt, extractor) if weights.contextual else zero,
    }
    total = (weights.masked * parts["masked_l1"]
             + weights.perceptual * parts["perceptual"]
             + weights.contextual * parts["contextual"])
    return total, {k: float(v.detach()) for k, v in parts.items()}


def stage3_loss(pred: torch.Tensor, gt: torch.Tensor, weights: LossWeights,
                extractor: nn.Module, disc: nn.Module
                ) -> tuple[torch.Tensor, torch.Tensor, dict[str, float]]:
    """Merging-refinement objective; returns (generator total, d_loss, parts)."""
    zero = pred.sum() * 0.0
    g_adv, d_loss = adversarial_losses(pred, gt, disc) if weights.adv else (zero, zero)
    parts = {
        "l1": l1_loss(pred, gt) if weights.l1 else zero,
        "perceptual": perceptual_loss(pred, gt, extractor) if weights.perceptual else zero,
        "smooth": smoothness_loss(pred) if weights.smooth else zero,
        "adv": g_adv,
    }
    total = (weights.l1 * parts["l1"] + weights.perceptual * parts["perceptual"]
             + weights.smooth * parts["smooth"] + weights.adv * parts["adv"])
    return total, d_loss, {k: float(v.detach()) for k, v in parts.items()}
