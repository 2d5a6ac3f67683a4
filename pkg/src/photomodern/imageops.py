"""Image primitives shared by the whole pipeline.

Conventions:
  - an image is a float32 H x W x 3 array with values in [0, 1]
  - a label map is an integer H x W array, label 0 = unlabeled
  - feature arrays are C x H x W (numpy) or N x C x H x W (torch)

All filtering uses replicate padding so border statistics are not dragged
toward zero, and every operation that returns an image clamps to [0, 1].
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

MIN_SIDE = 8
STD_EPS = 1e-5

_RESIZE_MODES = ("nearest", "bilinear", "bicubic")


# ---------------------------------------------------------------------------
# validation / conversion

def validate_image(img: np.ndarray) -> np.ndarray:
    """Check the image contract (H x W x 3 float in [0,1], sides >= 8)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}, got {img.shape[:2]}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img.astype(np.float32, copy=False)


def validate_label_map(labels: np.ndarray, like: np.ndarray | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected H x W label map, got shape {labels.shape}")
    if labels.min() < 0:
        raise ValueError("labels must be non-negative (0 = unlabeled)")
    if like is not None and labels.shape != like.shape[:2]:
        raise ValueError(f"label map {labels.shape} does not match image {like.shape[:2]}")
    return labels.astype(np.int32, copy=False)


def clamp01(arr: np.ndarray) -> np.ndarray:
    return np.clip(arr, 0.0, 1.0).astype(np.float32, copy=False)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """H x W x C numpy -> 1 x C x H x W float32 tensor."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def to_image(t: torch.Tensor) -> np.ndarray:
    """1 x C x H x W (or C x H x W) tensor -> H x W x C float32 array in [0,1]."""
    if t.ndim == 4:
        t = t[0]
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return clamp01(arr)


class RegionMaskSet:
    """Disjoint binary masks that partition the labeled area of a label map."""

    def __init__(self, masks: list[np.ndarray], labeled_area: np.ndarray):
        masks = [np.asarray(m, dtype=bool) for m in masks]
        if not masks:
            raise ValueError("mask set must contain at least one mask")
        labeled_area = np.asarray(labeled_area, dtype=bool)
        stack = np.stack(masks)
        if stack.sum(axis=0).max() > 1:
            raise ValueError("masks overlap")
        if not np.array_equal(stack.any(axis=0), labeled_area):
            raise ValueError("mask union does not equal the labeled area")
        self.masks = masks
        self.labeled_area = labeled_area

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.masks[i]


# ---------------------------------------------------------------------------
# kernels and filtering

def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian sampled at integer offsets."""
    if size % 2 != 1:
        raise ValueError("kernel size must be odd")
    x = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def binomial_kernel1d(size: int = 5) -> np.ndarray:
    """Normalized binomial kernel (rows of Pascal's triangle); 5 taps = [1,4,6,4,1]/16."""
    row = np.array([1.0])
    for _ in range(size - 1):
        row = np.convolve(row, [1.0, 1.0])
    return (row / row.sum()).astype(np.float32)


def separable_filter_t(x: torch.Tensor, kernel: np.ndarray) -> torch.Tensor:
    """Apply a 1-D kernel along H then W of an N x C x H x W tensor (replicate pad)."""
    k = torch.as_tensor(kernel, dtype=x.dtype, device=x.device)
    pad = k.numel() // 2
    c = x.shape[1]
    kv = k.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kh = k.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    x = F.pad(x, (0, 0, pad, pad), mode="replicate")
    x = F.conv2d(x, kv, groups=c)
    x = F.pad(x, (pad, pad, 0, 0), mode="replicate")
    x = F.conv2d(x, kh, groups=c)
    return x


def gaussian_blur(img: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    """Gaussian-blur an H x W x C image (separable, replicate padding)."""
    t = to_tensor(img)
    out = separable_filter_t(t, gaussian_kernel1d(kernel_size, sigma))
    return out[0].numpy().transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# Laplacian level-0 split

def laplacian_split(
    img: np.ndarray, kernel_size: int = 5, sigma: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Split an image into its blurred low band and the level-0 high band.

    The default kernel is the 5x5 binomial; pass `sigma` for a Gaussian
    instead.  `low + high` reproduces the input exactly (real arithmetic).
    """
    img = validate_image(img)
    if sigma is None:
        kernel = binomial_kernel1d(kernel_size)
    else:
        kernel = gaussian_kernel1d(kernel_size, sigma)
    t = to_tensor(img)
    low = separable_filter_t(t, kernel)[0].numpy().transpose(1, 2, 0)
    high = img - low
    return low.astype(np.float32), high.astype(np.float32)


def laplacian_merge(low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """Re-add a level-0 high band to a processed low band and clamp to [0,1]."""
    low = np.asarray(low, dtype=np.float32)
    high = np.asarray(high, dtype=np.float32)
    if low.shape != high.shape:
        raise ValueError(f"shape mismatch: low {low.shape} vs high {high.shape}")
    return clamp01(low + high)


def laplacian_split_t(t: torch.Tensor, kernel_size: int = 5) -> tuple[torch.Tensor, torch.Tensor]:
    """Tensor-side split with the binomial kernel (N x C x H x W)."""
    low = separable_filter_t(t, binomial_kernel1d(kernel_size))
    return low, t - low


# ---------------------------------------------------------------------------
# local window statistics

def local_mean_t(x: torch.Tensor, k: int) -> torch.Tensor:
    """k x k window mean of an N x C x H x W tensor, replicate padding."""
    if k % 2 != 1:
        raise ValueError("window size must be odd")
    if k > min(x.shape[-2], x.shape[-1]):
        raise ValueError("window larger than the array")
    if k == 1:
        return x
    pad = k // 2
    return F.avg_pool2d(F.pad(x, (pad,) * 4, mode="replicate"), k, stride=1)


def local_std_t(x: torch.Tensor, k: int, eps: float = STD_EPS) -> torch.Tensor:
    """k x k window standard deviation; eps under the root keeps gradients finite."""
    mean = local_mean_t(x, k)
    mean_sq = local_mean_t(x * x, k)
    var = (mean_sq - mean * mean).clamp_min(0.0)
    return torch.sqrt(var + eps)


def local_mean(feat: np.ndarray, k: int) -> np.ndarray:
    """Numpy C x H x W wrapper over `local_mean_t`."""
    t = torch.from_numpy(np.ascontiguousarray(feat, dtype=np.float32))[None]
    return local_mean_t(t, k)[0].numpy()


def local_std(feat: np.ndarray, k: int, eps: float = STD_EPS) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(feat, dtype=np.float32))[None]
    return local_std_t(t, k, eps)[0].numpy()


# ---------------------------------------------------------------------------
# resizing

def resize(arr: np.ndarray, new_h: int, new_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize an H x W or H x W x C array with standard separable interpolation."""
    if mode not in _RESIZE_MODES:
        raise ValueError(f"mode must be one of {_RESIZE_MODES}")
    if new_h < 1 or new_w < 1:
        raise ValueError("target size must be positive")
    arr = np.asarray(arr)
    squeeze = arr.ndim == 2
    if arr.shape[:2] == (new_h, new_w):
        return arr.astype(np.float32, copy=True)
    t = to_tensor(arr.astype(np.float32))
    kwargs = {} if mode == "nearest" else {"align_corners": False}
    out = F.interpolate(t, size=(new_h, new_w), mode=mode, **kwargs)
    out = out[0].numpy().transpose(1, 2, 0)
    return out[:, :, 0] if squeeze else out


def resize_nearest_mask(mask: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Nearest-neighbor resize for boolean/integer masks (no value mixing)."""
    ys = (np.arange(new_h) * mask.shape[0] // new_h).clip(0, mask.shape[0] - 1)
    xs = (np.arange(new_w) * mask.shape[1] // new_w).clip(0, mask.shape[1] - 1)
    return mask[ys[:, None], xs[None, :]]


# ---------------------------------------------------------------------------
# file I/O

def load_image(path) -> np.ndarray:
    """Read a PNG/JPEG file as a float32 [0,1] H x W x 3 array."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return validate_image(arr)


def save_image(path, img: np.ndarray) -> None:
    img = clamp01(np.asarray(img))
    data = (img * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(data).save(path)


def load_label_map(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "P"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.ndim != 2:
        arr = arr[..., 0]
    return validate_label_map(arr)


def save_label_map(path, labels: np.ndarray) -> None:
    labels = validate_label_map(labels)
    if labels.max() > 255:
        PILImage.fromarray(labels.astype(np.int32), mode="I").save(path)
    else:
        PILImage.fromarray(labels.astype(np.uint8), mode="L").save(path)


def save_heatmap(path, weights: np.ndarray) -> None:
    """Write a single-channel [0,1] weight map as an 8-bit grayscale PNG."""
    data = (np.clip(weights, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path)
