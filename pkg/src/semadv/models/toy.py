"""Small synthetic networks that stand in for pretrained models in tests.

All of them run on ``16 x 16`` images in a fraction of a millisecond and are
fully determined by their seed, so the property suite needs no downloads.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..imaging import rgb_to_lab_torch
from .adapters import Captioner, Classifier, Colorizer, FeatureExtractor
from .colorizer import ab_bin_centers

TOY_SIZE = (16, 16)


def _seeded(module: nn.Module, seed: int, scale: float = 1.0) -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            fan_in = p[0].numel() if p.ndim > 1 else p.numel()
            p.copy_(torch.randn(p.shape, generator=gen) * scale / np.sqrt(fan_in))
    return module


class ToyConvNet(nn.Module):
    """Random-weight two-conv-layer classifier."""

    def __init__(self, n_classes=10, width=8, seed=0):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.Tanh(), nn.AvgPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.Tanh(),
        )
        self.head = nn.Linear(2 * width, n_classes)
        _seeded(self, seed, scale=2.0)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class PrototypeNet(nn.Module):
    """Nearest-prototype classifier on a coarse colour-and-texture summary.

    The image is pooled to a ``4 x 4`` grid of mean colours plus a per-cell
    high-frequency energy; logits are negative squared distances to one
    prototype per class after a fixed random projection. Different seeds give
    different projections and so imperfectly agreeing models, which is what
    transfer experiments need.
    """

    def __init__(self, prototypes: torch.Tensor, seed=0, temperature=0.05):
        super().__init__()
        self.register_buffer("prototypes", prototypes)
        gen = torch.Generator().manual_seed(1000 + seed)
        dim = prototypes.shape[1]
        proj = torch.eye(dim) + 0.3 * torch.randn(dim, dim, generator=gen) / np.sqrt(dim)
        self.register_buffer("proj", proj)
        self.temperature = temperature

    @staticmethod
    def summary(x):
        color = F.adaptive_avg_pool2d(x, 4)
        hf = x - F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
        energy = F.adaptive_avg_pool2d((hf**2).mean(dim=1, keepdim=True), 4)
        return torch.cat([color.flatten(1), 4.0 * energy.sqrt().flatten(1)], dim=1)

    def forward(self, x):
        z = self.summary(x) @ self.proj
        p = self.prototypes @ self.proj
        d = ((z[:, None, :] - p[None]) ** 2).sum(-1)
        return -d / self.temperature


class ABMeanNet(nn.Module):
    """Two classes separated by the image's mean ``a`` chroma: reddish is class 1."""

    def __init__(self, threshold=10.0, scale=0.5):
        super().__init__()
        self.threshold = threshold
        self.scale = scale

    def forward(self, x):
        lab = rgb_to_lab_torch(x.clamp(0, 1))
        mean_a = lab[:, 1].mean(dim=(1, 2))
        score = self.scale * (mean_a - self.threshold)
        return torch.stack([torch.zeros_like(score), score], dim=1)


def high_frequency_energy(x):
    lap = x - F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), 3, stride=1)
    return (lap**2).mean(dim=(1, 2, 3))


class HighFrequencyNet(nn.Module):
    """Two classes separated by mean squared Laplacian energy: busy is class 1."""

    def __init__(self, threshold=2e-3, scale=2000.0):
        super().__init__()
        self.threshold = threshold
        self.scale = scale

    def forward(self, x):
        score = self.scale * (high_frequency_energy(x) - self.threshold)
        return torch.stack([torch.zeros_like(score), score], dim=1)


def toy_stages(width=4, seed=0):
    chans = [width, int(1.5 * width), 2 * width, int(2.5 * width), 3 * width]
    stages, cin = [], 3
    for i, c in enumerate(chans):
        layers = [] if i == 0 else [nn.AvgPool2d(2)]
        layers += [nn.Conv2d(cin, c, 3, padding=1), nn.ReLU()]
        stages.append(nn.Sequential(*layers))
        cin = c
    for i, s in enumerate(stages):
        _seeded(s, seed + 17 * i, scale=1.5)
        with torch.no_grad():
            s[-2].bias.abs_()
    return stages, chans


class ToyColorizerNet(nn.Module):
    """Hint propagation by normalized convolution blended with a learned prior.

    The prior chroma comes from a small conv on the lightness channel; hints
    are spread with a fixed Gaussian weighted by the mask, and the blend
    weight grows with local mask density. The bin logits are the negative
    squared distance of the prediction to each bin center.
    """

    def __init__(self, bin_centers, seed=0, spread=1.5, temperature=15.0):
        super().__init__()
        self.prior = nn.Sequential(nn.Conv2d(1, 6, 3, padding=1), nn.Tanh(), nn.Conv2d(6, 2, 3, padding=1))
        _seeded(self.prior, seed, scale=1.0)
        self.gain = nn.Parameter(torch.tensor(4.0))
        r = int(np.ceil(3 * spread))
        k = torch.exp(-torch.arange(-r, r + 1, dtype=torch.float32) ** 2 / (2 * spread**2))
        k2 = torch.outer(k, k)
        self.register_buffer("kernel", (k2 / k2.sum())[None, None])
        self.register_buffer("centers_norm", torch.as_tensor(bin_centers, dtype=torch.float32) / 110.0)
        self.temperature = temperature

    def _spread(self, x):
        r = self.kernel.shape[-1] // 2
        c = x.shape[1]
        x = F.pad(x, (r, r, r, r), mode="reflect")
        return F.conv2d(x, self.kernel.to(x.dtype).expand(c, 1, -1, -1), groups=c)

    def forward(self, l_norm, ab_norm, mask):
        prior = 0.6 * torch.tanh(self.prior(l_norm))
        density = self._spread(mask)
        prop = self._spread(mask * ab_norm) / (density + 1e-3)
        blend = 1.0 - torch.exp(-self.gain * density)
        ab = blend * prop + (1.0 - blend) * prior
        c = self.centers_norm.to(ab.dtype)
        d2 = ((ab[:, None] - c[None, :, :, None, None]) ** 2).sum(dim=2)
        return ab, -d2 * self.temperature**2 / 2.0


class ToyCaptionNet(nn.Module):
    """Per-position logits linear in attention-weighted mean colour.

    Attention maps are fixed per position and do not depend on the image or on
    previous tokens.
    """

    def __init__(self, vocab_size=3, max_len=4, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.attn_logits = nn.Parameter(torch.randn(max_len, 4, 4, generator=gen))
        self.weight = nn.Parameter(3.0 * torch.randn(max_len, vocab_size, 3, generator=gen))
        self.bias = nn.Parameter(0.5 * torch.randn(max_len, vocab_size, generator=gen))

    def attention(self, h, w):
        a = F.interpolate(self.attn_logits[None], size=(h, w), mode="bilinear", align_corners=False)[0]
        return torch.softmax(a.flatten(1), dim=1).view(-1, h, w)

    def forward(self, x, tokens):
        attn = self.attention(*x.shape[-2:]).to(x.dtype)
        pooled = torch.einsum("thw,nchw->ntc", attn, x - 0.5)
        logits = torch.einsum("tvc,ntc->ntv", self.weight.to(x.dtype), pooled) + self.bias.to(x.dtype)
        return logits, attn[None].expand(x.shape[0], -1, -1, -1)


# factories ---------------------------------------------------------------------


def toy_templates(n_classes=10, seed=0, size=TOY_SIZE) -> torch.Tensor:
    """One clean image per class: a ``4 x 4`` colour layout plus textured noise."""
    gen = torch.Generator().manual_seed(seed)
    colors = 0.25 + 0.5 * torch.rand(n_classes, 3, 4, 4, generator=gen)
    amp = 0.02 + 0.2 * torch.rand(n_classes, 1, 4, 4, generator=gen)
    pattern = torch.randn(n_classes, 3, *size, generator=gen)
    base = F.interpolate(colors, size=size, mode="nearest")
    amp = F.interpolate(amp, size=size, mode="nearest")
    return (base + amp * pattern).clamp(0, 1)


def toy_prototypes(n_classes=10, seed=0) -> torch.Tensor:
    return PrototypeNet.summary(toy_templates(n_classes, seed))


def toy_classifier(seed=0) -> Classifier:
    return Classifier(ToyConvNet(seed=seed), f"toy-conv-{seed}", 10, input_size=TOY_SIZE)


def prototype_classifier(variant=0, n_classes=10, temperature=0.05) -> Classifier:
    net = PrototypeNet(toy_prototypes(n_classes), seed=variant, temperature=temperature)
    return Classifier(net, f"toy-proto-{variant}", n_classes, input_size=TOY_SIZE)


def ab_mean_classifier() -> Classifier:
    return Classifier(ABMeanNet(), "toy-abmean", 2)


def high_frequency_classifier() -> Classifier:
    return Classifier(HighFrequencyNet(), "toy-hf", 2)


def toy_extractor(seed=0, width=4) -> FeatureExtractor:
    stages, chans = toy_stages(width, seed)
    return FeatureExtractor(stages, "toy-extractor", chans)


def toy_colorizer(seed=0) -> Colorizer:
    centers = ab_bin_centers()
    return Colorizer(ToyColorizerNet(centers, seed=seed), "toy-colorizer", centers)


def toy_captioner(seed=0) -> Captioner:
    vocab = ["cat", "dog", "sign"]
    return Captioner(ToyCaptionNet(len(vocab), 4, seed), "toy-captioner", vocab, max_len=4)


def toy_dataset(n_per_class=2, n_classes=10, seed=0, noise=0.03):
    """Noisy copies of the class templates.

    Returns ``(images, labels)``; each image is ``16 x 16 x 3`` in [0, 1].
    """
    templates = toy_templates(n_classes)
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(n_classes):
        base = templates[c].permute(1, 2, 0).double().numpy()
        for _ in range(n_per_class):
            img = base + noise * rng.standard_normal(base.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
    return images, labels
