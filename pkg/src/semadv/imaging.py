"""Color-space conversion, smoothing, image I/O and perturbation norms.

RGB images are ``H x W x 3`` float arrays in ``[0, 1]`` (sRGB). CIELAB images
carry an ``H x W`` lightness channel in ``[0, 100]`` and an ``H x W x 2``
chroma field. The torch variants of the conversions are differentiable and
operate on ``(N, C, H, W)`` tensors so the attack loops can push gradients
through them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

# sRGB primaries, D65 white point (2 degree observer)
_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

_DELTA = 6.0 / 29.0
_EPS = 1e-12


@dataclass
class LabImage:
    """An image split into CIELAB lightness and chroma."""

    L: np.ndarray
    ab: np.ndarray

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=np.float64)
        self.ab = np.asarray(self.ab, dtype=np.float64)
        if self.L.ndim == 3 and self.L.shape[-1] == 1:
            self.L = self.L[..., 0]
        if self.L.ndim != 2 or self.ab.shape != self.L.shape + (2,):
            raise ValueError(
                f"L must be HxW and ab HxWx2, got {self.L.shape} and {self.ab.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.L.shape


@dataclass
class NormReport:
    """Perturbation magnitude on a ``[0, 1]`` pixel scale.

    ``l0`` is the fraction of pixels changed in any channel by more than one
    8-bit level, ``l2`` the root-mean-square difference over all values and
    ``linf`` the largest absolute difference.
    """

    l0: float
    l2: float
    linf: float

    def as_dict(self) -> dict:
        return asdict(self)


def check_rgb(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


# torch conversions -----------------------------------------------------------


def _lab_f(t: torch.Tensor) -> torch.Tensor:
    cube = t.clamp(min=_DELTA**3).pow(1.0 / 3.0)
    lin = t / (3 * _DELTA**2) + 4.0 / 29.0
    return torch.where(t > _DELTA**3, cube, lin)


def _lab_finv(t: torch.Tensor) -> torch.Tensor:
    return torch.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def srgb_to_linear(c: torch.Tensor) -> torch.Tensor:
    high = ((c.clamp(min=0.04045) + 0.055) / 1.055) ** 2.4
    return torch.where(c > 0.04045, high, c / 12.92)


def linear_to_srgb(c: torch.Tensor) -> torch.Tensor:
    high = 1.055 * c.clamp(min=0.0031308) ** (1 / 2.4) - 0.055
    return torch.where(c > 0.0031308, high, 12.92 * c)


def _mix(mat: np.ndarray, x: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(mat, dtype=x.dtype, device=x.device)
    return torch.einsum("ij,njhw->nihw", m, x)


def rgb_to_lab_torch(rgb: torch.Tensor) -> torch.Tensor:
    """``(N, 3, H, W)`` sRGB in [0, 1] to ``(N, 3, H, W)`` Lab."""
    xyz = _mix(_RGB_TO_XYZ, srgb_to_linear(rgb))
    white = torch.as_tensor(D65_WHITE, dtype=rgb.dtype, device=rgb.device)
    f = _lab_f(xyz / white.view(1, 3, 1, 1))
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    return torch.cat([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], dim=1)


def lab_to_rgb_torch(lab: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """``(N, 3, H, W)`` Lab to sRGB; clamped to [0, 1] unless ``clamp=False``."""
    L, a, b = lab[:, 0:1], lab[:, 1:2], lab[:, 2:3]
    fy = (L + 16) / 116
    f = torch.cat([fy + a / 500, fy, fy - b / 200], dim=1)
    white = torch.as_tensor(D65_WHITE, dtype=lab.dtype, device=lab.device)
    xyz = _lab_finv(f) * white.view(1, 3, 1, 1)
    rgb = linear_to_srgb(_mix(_XYZ_TO_RGB, xyz))
    return rgb.clamp(0.0, 1.0) if clamp else rgb


# numpy front ends --------------------------------------------------------------


def rgb_to_lab(img) -> LabImage:
    img = check_rgb(img)
    x = torch.from_numpy(img).permute(2, 0, 1)[None]
    lab = rgb_to_lab_torch(x)[0].permute(1, 2, 0).numpy()
    return LabImage(lab[..., 0], lab[..., 1:])


def lab_to_rgb(lab: LabImage, clamp: bool = True) -> np.ndarray:
    x = np.concatenate([lab.L[..., None], lab.ab], axis=-1)
    x = torch.from_numpy(np.ascontiguousarray(x)).permute(2, 0, 1)[None]
    return lab_to_rgb_torch(x, clamp=clamp)[0].permute(1, 2, 0).numpy()


def gaussian_blur(channel, sigma: float) -> np.ndarray:
    """Gaussian smoothing with a kernel truncated at 4 sigma, reflective border."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    channel = np.asarray(channel, dtype=np.float64)
    return ndimage.gaussian_filter(channel, sigma=sigma, mode="reflect", truncate=4.0)


def lp_metrics(orig, adv) -> NormReport:
    orig = np.asarray(orig, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if orig.shape != adv.shape:
        raise ValueError(f"dimension mismatch: {orig.shape} vs {adv.shape}")
    delta = np.abs(adv - orig)
    if delta.size == 0:
        return NormReport(0.0, 0.0, 0.0)
    changed = (delta > 1.0 / 255.0).any(axis=-1)
    return NormReport(
        l0=float(changed.mean()),
        l2=float(np.sqrt(np.mean(delta**2))),
        linf=float(delta.max()),
    )


# I/O ------------------------------------------------------------------------------


def load_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read a PNG or JPEG into an ``H x W x 3`` float image.

    ``size`` is ``(height, width)``; resizing uses bicubic resampling.
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BICUBIC)
        return np.asarray(im, dtype=np.float64) / 255.0


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(img, path) -> Path:
    """Save losslessly with 8-bit quantization."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ValueError("adversarial images must be stored as PNG")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
    return path


def quantize(img) -> np.ndarray:
    """What an image looks like after a round trip through :func:`save_png`."""
    return to_uint8(img).astype(np.float64) / 255.0


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """``H x W x C`` array to a ``(1, C, H, W)`` tensor."""
    return torch.as_tensor(np.ascontiguousarray(img), dtype=dtype).permute(2, 0, 1)[None]


def to_numpy(x: torch.Tensor) -> np.ndarray:
    """``(1, C, H, W)`` tensor to an ``H x W x C`` float64 array."""
    return x.detach()[0].permute(1, 2, 0).to(torch.float64).cpu().numpy()
