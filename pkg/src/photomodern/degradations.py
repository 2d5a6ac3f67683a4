"""Unstructured degradation operators and color jittering.

Each operator takes (image, rng) and is a pure function of its inputs: the
same seed always produces byte-identical output.  Outputs are clamped to
[0, 1].  The four degradations are kept in a registry so additional ones
(e.g. scratch synthesis) can be plugged into the synthetic-data pipeline
without touching it.
"""

from __future__ import annotations

import io

import numpy as np
import torchvision.transforms.functional as tvf
from PIL import Image as PILImage

from .imageops import clamp01, gaussian_blur, resize, to_image, to_tensor, validate_image

BLUR_KERNEL_SIZES = (3, 5, 7)
BLUR_SIGMA_RANGE = (0.004, 0.02)  # fraction of min(H, W); "absolute" = pixels
GAUSS_NOISE_RANGE = (0.02, 0.04)
SPECKLE_NOISE_RANGE = (0.02, 0.08)
JPEG_QUALITY_RANGE = (40, 100)
JITTER_MAGNITUDES = (0.2, 0.2, 0.4, 0.4)  # brightness, contrast, saturation, hue


def degrade_blur(
    img: np.ndarray,
    rng: np.random.Generator,
    sigma_range: tuple[float, float] = BLUR_SIGMA_RANGE,
    sigma_mode: str = "fraction",
) -> np.ndarray:
    """Gaussian blur with kernel size drawn from {3,5,7} and random sigma.

    `sigma_mode="fraction"` scales the sigma range by min(H, W);
    `"absolute"` uses it as pixels directly.
    """
    img = validate_image(img)
    k = int(rng.choice(BLUR_KERNEL_SIZES))
    lo, hi = sigma_range
    if sigma_mode == "fraction":
        scale = min(img.shape[0], img.shape[1])
        lo, hi = lo * scale, hi * scale
    elif sigma_mode != "absolute":
        raise ValueError("sigma_mode must be 'fraction' or 'absolute'")
    sigma = float(rng.uniform(lo, hi))
    return clamp01(gaussian_blur(img, k, sigma))


def degrade_noise(
    img: np.ndarray,
    rng: np.random.Generator,
    gaussian_range: tuple[float, float] = GAUSS_NOISE_RANGE,
    speckle_range: tuple[float, float] = SPECKLE_NOISE_RANGE,
    kind: str | None = None,
) -> np.ndarray:
    """Additive Gaussian or multiplicative speckle noise (50/50 unless forced)."""
    img = validate_image(img)
    if kind is None:
        kind = "speckle" if rng.random() < 0.5 else "gaussian"
    if kind not in ("gaussian", "speckle"):
        raise ValueError("kind must be 'gaussian' or 'speckle'")
    lo, hi = speckle_range if kind == "speckle" else gaussian_range
    sigma = float(rng.uniform(lo, hi))
    noise = rng.normal(0.0, 1.0, size=img.shape).astype(np.float32) * sigma
    out = img + img * noise if kind == "speckle" else img + noise
    return clamp01(out)


def degrade_resize_artifact(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bicubic downsample to half size, then nearest/bilinear upsample back."""
    img = validate_image(img)
    h, w = img.shape[:2]
    if h < 16 or w < 16:
        raise ValueError("image too small for half-size resizing (need >= 16 px)")
    up_mode = "nearest" if rng.random() < 0.5 else "bilinear"
    small = clamp01(resize(img, h // 2, w // 2, mode="bicubic"))
    return clamp01(resize(small, h, w, mode=up_mode))


def degrade_jpeg(
    img: np.ndarray,
    rng: np.random.Generator,
    quality_range: tuple[int, int] = JPEG_QUALITY_RANGE,
) -> np.ndarray:
    """JPEG encode/decode round trip at a random quality.

    Chroma subsampling is disabled so quality 100 stays within codec
    rounding error (<= 2/255) of the input.
    """
    img = validate_image(img)
    quality = int(rng.integers(quality_range[0], quality_range[1] + 1))
    data = (img * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    try:
        PILImage.fromarray(data).save(buf, format="JPEG", quality=quality, subsampling=0)
        buf.seek(0)
        with PILImage.open(buf) as im:
            out = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:  # pragma: no cover - codec failures are environmental
        raise RuntimeError(f"JPEG round trip failed: {exc}") from exc
    return clamp01(out)


def adjust_colors(
    img: np.ndarray,
    brightness_factor: float = 1.0,
    contrast_factor: float = 1.0,
    saturation_factor: float = 1.0,
    hue_shift: float = 0.0,
    order: tuple[str, ...] = ("brightness", "contrast", "saturation", "hue"),
) -> np.ndarray:
    """Apply brightness/contrast/saturation/hue adjustments in the given order."""
    t = to_tensor(validate_image(img))[0]
    for name in order:
        if name == "brightness":
            t = tvf.adjust_brightness(t, brightness_factor)
        elif name == "contrast":
            t = tvf.adjust_contrast(t, contrast_factor)
        elif name == "saturation":
            t = tvf.adjust_saturation(t, saturation_factor)
        elif name == "hue":
            t = tvf.adjust_hue(t, hue_shift)
        else:
            raise ValueError(f"unknown color op {name!r}")
    return to_image(t)


def color_jitter(
    img: np.ndarray,
    rng: np.random.Generator,
    magnitudes: tuple[float, float, float, float] = JITTER_MAGNITUDES,
) -> np.ndarray:
    """Random-order color jitter; factors are uniform in [1-m, 1+m] per channel op,
    the hue shift uniform in [-m_hue, +m_hue] of the hue circle."""
    img = validate_image(img)
    b, c, s, h = magnitudes
    factors = {
        "brightness": 1.0 + float(rng.uniform(-b, b)),
        "contrast": 1.0 + float(rng.uniform(-c, c)),
        "saturation": 1.0 + float(rng.uniform(-s, s)),
        "hue": float(rng.uniform(-h, h)),
    }
    order = [("brightness", "contrast", "saturation", "hue")[i] for i in rng.permutation(4)]
    return adjust_colors(
        img,
        brightness_factor=factors["brightness"],
        contrast_factor=factors["contrast"],
        saturation_factor=factors["saturation"],
        hue_shift=factors["hue"],
        order=tuple(order),
    )


# Registry consumed by the synthetic-data pipeline; extend with
# `register_degradation` to train against new artifact types.
DEGRADATION_REGISTRY: dict[str, callable] = {
    "blur": degrade_blur,
    "noise": degrade_noise,
    "resize": degrade_resize_artifact,
    "jpeg": degrade_jpeg,
}


def register_degradation(name: str, fn) -> None:
    if name in DEGRADATION_REGISTRY:
        raise ValueError(f"degradation {name!r} already registered")
    DEGRADATION_REGISTRY[name] = fn
