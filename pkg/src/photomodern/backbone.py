"""Photorealistic style-transfer backbone.

A 4-level VGG-style encoder-decoder.  The only skip connection is the
image's level-0 Laplacian high band, re-added at the output; feature
stylization (AdaIN, or WCT for inference-only comparison) is applied
inside the last two decoder blocks, on the upsampled feature entering
each block's convolutions.  Images cross the API in [0, 1]; tensors run
in [-1, 1] behind a Tanh output head.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imageops import laplacian_split, to_image, to_tensor

DEFAULT_WIDTHS = (16, 32, 64, 128)
ADAIN_EPS = 1e-5

CHECKPOINT_MAGIC = "photomodern-checkpoint"
CHECKPOINT_VERSION = 1


def channel_stats(feat: torch.Tensor, eps: float = ADAIN_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel scalar mean/std of an N x C x H x W feature (population std)."""
    mean = feat.mean(dim=(2, 3), keepdim=True)
    var = feat.var(dim=(2, 3), keepdim=True, unbiased=False)
    return mean, torch.sqrt(var + eps)


def adain(feat: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
          eps: float = ADAIN_EPS) -> torch.Tensor:
    """Renormalize `feat` to the target statistics.

    The content feature is normalized with its per-channel scalar stats and
    denormalized with the (optionally spatially-varying) target maps.
    """
    if mu.shape[1] != feat.shape[1] or sigma.shape[1] != feat.shape[1]:
        raise ValueError(f"style code channels {mu.shape[1]} != feature channels {feat.shape[1]}")
    for code in (mu, sigma):
        if code.shape[2:] not in ((1, 1), feat.shape[2:]):
            raise ValueError(f"style code spatial size {tuple(code.shape[2:])} does not match "
                             f"feature {tuple(feat.shape[2:])}")
    c_mean, c_std = channel_stats(feat, eps)
    return sigma * (feat - c_mean) / c_std + mu


@torch.no_grad()
def wct(content: torch.Tensor, style: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Whitening-coloring transform (non-differentiable alternative to adain)."""
    n, c, h, w = content.shape
    out = torch.empty_like(content)
    for i in range(n):
        fc = content[i].reshape(c, -1).double()
        fs = style[i].reshape(c, -1).double()
        mc, ms = fc.mean(1, keepdim=True), fs.mean(1, keepdim=True)
        fc, fs = fc - mc, fs - ms
        cov_c = fc @ fc.T / max(fc.shape[1] - 1, 1) + eps * torch.eye(c, dtype=torch.float64)
        cov_s = fs @ fs.T / max(fs.shape[1] - 1, 1) + eps * torch.eye(c, dtype=torch.float64)
        ec, vc = torch.linalg.eigh(cov_c)
        es, vs = torch.linalg.eigh(cov_s)
        whiten = vc @ torch.diag(ec.clamp_min(eps).rsqrt()) @ vc.T
        color = vs @ torch.diag(es.clamp_min(eps).sqrt()) @ vs.T
        out[i] = (color @ whiten @ fc + ms).reshape(c, h, w).to(content.dtype)
    return out


def _conv3(c_in: int, c_out: int) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, kernel_size=3, padding=1, padding_mode="replicate")


class EncoderLevel(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = _conv3(c_in, c_out)
        self.conv2 = _conv3(c_out, c_out)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        return F.relu(self.conv2(x))


class DecoderBlock(nn.Module):
    """Upsample x2 then two convs; the upsampled feature is the stylization tap."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = _conv3(c_in, c_out)
        self.conv2 = _conv3(c_out, c_out)

    def forward(self, x, transform=None):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        tap = x
        if transform is not None:
            x = transform(x)
        x = F.relu(self.conv1(x))
        return F.relu(self.conv2(x)), tap


class DecodeResult(NamedTuple):
    image: torch.Tensor          # N x 3 x H x W in [0, 1]
    low: torch.Tensor            # decoded low band, before the high band is re-added
    feature: torch.Tensor        # last decoder block output (pre projection head)
    taps: dict[int, torch.Tensor]  # post-upsample features of blocks 2 and 1


class PSTNet(nn.Module):
    """Encoder-decoder with a Laplacian level-0 skip and decoder-side stylization."""

    def __init__(self, widths: tuple[int, int, int, int] = DEFAULT_WIDTHS):
        super().__init__()
        if len(widths) != 4 or any(a >= b for a, b in zip(widths, widths[1:])):
            raise ValueError("widths must be 4 strictly increasing channel counts")
        self.widths = tuple(widths)
        c1, c2, c3, c4 = widths
        self.enc1 = EncoderLevel(3, c1)
        self.enc2 = EncoderLevel(c1, c2)
        self.enc3 = EncoderLevel(c2, c3)
        self.enc4 = EncoderLevel(c3, c4)
        self.dec3 = DecoderBlock(c4, c3)
        self.dec2 = DecoderBlock(c3, c2)
        self.dec1 = DecoderBlock(c2, c1)
        self.head = _conv3(c1, 3)

    # channel counts of the stylization taps (post-upsample inputs of dec2/dec1)
    def tap_channels(self) -> dict[int, int]:
        return {2: self.widths[2], 1: self.widths[1]}

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Multi-level features of an N x 3 x H x W tensor in [0, 1]."""
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"input size {h}x{w} must be divisible by 8; pad the image first")
        x = x * 2.0 - 1.0
        f1 = self.enc1(x)
        f2 = self.enc2(F.max_pool2d(f1, 2))
        f3 = self.enc3(F.max_pool2d(f2, 2))
        f4 = self.enc4(F.max_pool2d(f3, 2))
        return [f1, f2, f3, f4]

    def decode(
        self,
        feats: list[torch.Tensor],
        high: torch.Tensor | None = None,
        codes: dict[int, tuple[torch.Tensor, torch.Tensor]] | None = None,
        transforms: dict[int, Callable[[torch.Tensor], torch.Tensor]] | None = None,
    ) -> DecodeResult:
        """Decode the deepest feature back to an image.

        `codes` maps tap level (1 or 2) to (mu, sigma) maps for adain;
        `transforms` maps tap level to an arbitrary feature transform (used
        for the WCT comparison).  `high` is the level-0 high band to re-add.
        """
        if codes and transforms:
            raise ValueError("pass either adain codes or feature transforms, not both")
        tf = {}
        if codes:
            tf = {j: (lambda t, c=codes[j]: adain(t, c[0], c[1])) for j in codes}
        elif transforms:
            tf = dict(transforms)
        x = feats[-1]
        x, _ = self.dec3(x)
        x, tap2 = self.dec2(x, tf.get(2))
        x, tap1 = self.dec1(x, tf.get(1))
        feature = x
        low = (torch.tanh(self.head(x)) + 1.0) * 0.5
        if high is None:
            image = low.clamp(0.0, 1.0)
        else:
            if high.shape != low.shape:
                raise ValueError(f"high band shape {tuple(high.shape)} != decoded {tuple(low.shape)}")
            image = (low + high).clamp(0.0, 1.0)
        return DecodeResult(image=image, low=low, feature=feature, taps={2: tap2, 1: tap1})

    def forward(self, x: torch.Tensor, high: torch.Tensor | None = None) -> torch.Tensor:
        """Plain reconstruction pass."""
        return self.decode(self.encode(x), high=high).image


def split_input(img: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """Image -> (full tensor, level-0 high band tensor), both 1 x 3 x H x W."""
    _, high = laplacian_split(img)
    return to_tensor(img), to_tensor(high)


def reconstruct(net: PSTNet, img: np.ndarray) -> np.ndarray:
    """decode(encode(img)) with the high-band skip; numpy in/out."""
    x, high = split_input(img)
    with torch.no_grad():
        out = net.decode(net.encode(x), high=high).image
    return to_image(out)


def stylize_global(net: PSTNet, content: np.ndarray, style: np.ndarray,
                   transform: str = "adain") -> np.ndarray:
    """Whole-image stylization from the style's decoder-tap channel statistics."""
    c_t, c_high = split_input(content)
    s_t, _ = split_input(style)
    with torch.no_grad():
        style_taps = net.decode(net.encode(s_t)).taps
        feats = net.encode(c_t)
        if transform == "adain":
            codes = {j: channel_stats(style_taps[j]) for j in style_taps}
            out = net.decode(feats, high=c_high, codes=codes).image
        elif transform == "wct":
            tfs = {j: (lambda t, s=style_taps[j]: wct(t, s)) for j in style_taps}
            out = net.decode(feats, high=c_high, transforms=tfs).image
        else:
            raise ValueError("transform must be 'adain' or 'wct'")
    return to_image(out)


# ---------------------------------------------------------------------------
# checkpoint container

def save_checkpoint(path, *, stage: str, weights: dict[str, dict], config: dict,
                    epoch: int = 0, step: int = 0, optimizer_state: dict | None = None,
                    rng_state: dict | None = None) -> None:
    """Write a versioned checkpoint holding named weight groups + config snapshot."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "epoch": int(epoch),
        "step": int(step),
        "config": dict(config),
        "weights": weights,
        "optimizer_state": optimizer_state,
        "rng_state": rng_state,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a photomodern checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return payload
