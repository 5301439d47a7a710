"""Uniform wrappers around the networks the attacks talk to.

Every adapter takes images as ``(N, 3, H, W)`` tensors in ``[0, 1]`` and owns
its own resizing and normalization, so attack code never has to know what a
particular backbone expects.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..imaging import check_rgb, to_tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

TAPS = ("R11", "R21", "R31", "R41", "R51")


class _Preprocess(nn.Module):
    def __init__(self, input_size=None, mean=None, std=None):
        super().__init__()
        self.input_size = tuple(input_size) if input_size is not None else None
        mean = torch.tensor(mean if mean is not None else (0.0, 0.0, 0.0))
        std = torch.tensor(std if std is not None else (1.0, 1.0, 1.0))
        self.register_buffer("mean", mean.view(1, 3, 1, 1))
        self.register_buffer("std", std.view(1, 3, 1, 1))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        if self.input_size is not None and tuple(x.shape[-2:]) != self.input_size:
            x = F.interpolate(x, size=self.input_size, mode="bilinear", align_corners=False)
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)


class Classifier(nn.Module):
    """A victim network producing ``label_count`` logits."""

    def __init__(self, net: nn.Module, tag: str, label_count: int,
                 input_size=None, mean=None, std=None):
        super().__init__()
        self.net = net
        self.tag = tag
        self.label_count = int(label_count)
        self.preprocess = _Preprocess(input_size, mean, std)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(self.preprocess(x))


class FeatureExtractor(nn.Module):
    """Exposes the five texture taps ``R11`` .. ``R51`` of a conv backbone.

    ``stages`` is a sequence of five modules; tap ``k`` is the output of
    running stages ``0..k`` in order.
    """

    def __init__(self, stages: Sequence[nn.Module], tag: str, channels: Sequence[int],
                 input_size=None, mean=None, std=None):
        super().__init__()
        if len(stages) != len(TAPS) or len(channels) != len(TAPS):
            raise ValueError("a feature extractor needs exactly five taps")
        self.stages = nn.ModuleList(stages)
        self.tag = tag
        self.channels = dict(zip(TAPS, channels))
        self.preprocess = _Preprocess(input_size, mean, std)
        self.eval()

    def forward(self, x: torch.Tensor, taps: Sequence[str] = TAPS) -> dict[str, torch.Tensor]:
        wanted = set(taps)
        unknown = wanted - set(TAPS)
        if unknown:
            raise KeyError(f"unknown layer taps {sorted(unknown)}")
        out = {}
        h = self.preprocess(x)
        for name, stage in zip(TAPS, self.stages):
            h = stage(h)
            if name in wanted:
                out[name] = h
            if len(out) == len(wanted):
                break
        return out


class Colorizer(nn.Module):
    """User-guided colorization network.

    ``net(l_norm, ab_norm, mask)`` must return ``(ab_norm_pred, logits)`` where
    the logits score ``Q`` quantized chroma bins per pixel. Inputs are in the
    network's normalized units: lightness ``(L - 50) / 100`` and chroma
    ``ab / ab_norm``.
    """

    def __init__(self, net: nn.Module, tag: str, bin_centers: torch.Tensor,
                 ab_norm: float = 110.0):
        super().__init__()
        self.net = net
        self.tag = tag
        self.ab_norm = float(ab_norm)
        self.register_buffer("bin_centers", torch.as_tensor(bin_centers, dtype=torch.float32))
        self.eval()

    @property
    def bin_count(self) -> int:
        return self.bin_centers.shape[0]

    def forward(self, L, hint_ab_norm, mask):
        """Lightness ``(N,1,H,W)``, normalized hints ``(N,2,H,W)``, mask ``(N,1,H,W)``.

        Returns the predicted chroma in AB units and the per-pixel bin
        distribution ``(N, Q, H, W)``.
        """
        if L.shape[-2:] != hint_ab_norm.shape[-2:] or L.shape[-2:] != mask.shape[-2:]:
            raise ValueError(
                f"colorizer inputs disagree on spatial size: L {tuple(L.shape)}, "
                f"hints {tuple(hint_ab_norm.shape)}, mask {tuple(mask.shape)}"
            )
        ab_norm, logits = self.net((L - 50.0) / 100.0, hint_ab_norm, mask)
        if logits.shape[-2:] != L.shape[-2:]:
            logits = F.interpolate(logits, size=L.shape[-2:], mode="bilinear", align_corners=False)
        return ab_norm * self.ab_norm, torch.softmax(logits, dim=1)


class Captioner(nn.Module):
    """Captioning model scored with teacher forcing.

    ``net(x, tokens)`` returns ``(logits, attention)``: logits ``(N, T, V)`` for
    every caption position given the preceding tokens, and attention maps
    ``(N, T, h, w)``.
    """

    def __init__(self, net: nn.Module, tag: str, vocab: Sequence[str], max_len: int,
                 input_size=None, mean=None, std=None, bos: int | None = None):
        super().__init__()
        self.net = net
        self.tag = tag
        self.vocab = list(vocab)
        self.max_len = int(max_len)
        self.bos = bos
        self.preprocess = _Preprocess(input_size, mean, std)
        self.eval()

    def forward(self, x, tokens):
        logits, attention = self.net(self.preprocess(x), tokens)
        if logits.shape[-1] != len(self.vocab):
            raise ValueError("captioner logits disagree with its vocabulary size")
        return logits, attention

    @torch.no_grad()
    def generate(self, x: torch.Tensor) -> list[int]:
        """Greedy decoding of a single image."""
        tokens = torch.zeros(1, self.max_len, dtype=torch.long, device=x.device)
        for t in range(self.max_len):
            logits, _ = self(x, tokens)
            tokens[0, t] = logits[0, t].argmax()
        return tokens[0].tolist()

    def encode(self, words: str | Sequence[str]) -> list[int]:
        if isinstance(words, str):
            words = words.split()
        index = {w: i for i, w in enumerate(self.vocab)}
        missing = [w for w in words if w not in index]
        if missing:
            raise KeyError(f"words not in vocabulary: {missing}")
        return [index[w] for w in words]

    def decode(self, tokens: Sequence[int]) -> str:
        return " ".join(self.vocab[t] for t in tokens)


# operations --------------------------------------------------------------------


def module_dtype(module: nn.Module) -> torch.dtype:
    for t in module.parameters():
        return t.dtype
    for t in module.buffers():
        if t.is_floating_point():
            return t.dtype
    return torch.float32


@torch.no_grad()
def classify(model: Classifier, img) -> tuple[np.ndarray, int]:
    img = check_rgb(img)
    dtype = module_dtype(model)
    logits = model(to_tensor(img, dtype))[0].double().numpy()
    return logits, int(np.argmax(logits))


@torch.no_grad()
def classify_batch(model: Classifier, images) -> np.ndarray:
    """Predicted labels for a list of (possibly differently sized) images."""
    return np.array([classify(model, img)[1] for img in images], dtype=int)


@torch.no_grad()
def colorize(model: Colorizer, L, hint_ab, mask) -> tuple[np.ndarray, np.ndarray]:
    """Run the colorizer on numpy inputs.

    ``L`` is ``H x W``, ``hint_ab`` ``H x W x 2`` in AB units and ``mask``
    ``H x W`` or ``H x W x 1``. Returns ``(ab, dist)`` with ``dist`` of shape
    ``H x W x Q``.
    """
    L = np.asarray(L, dtype=np.float64)
    hint_ab = np.asarray(hint_ab, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[..., None]
    if hint_ab.shape != L.shape + (2,) or mask.shape != L.shape + (1,):
        raise ValueError(
            f"dimension mismatch: L {L.shape}, hints {hint_ab.shape}, mask {mask.shape}"
        )
    dtype = model.bin_centers.dtype
    ab, dist = model(
        to_tensor(L[..., None], dtype),
        to_tensor(hint_ab, dtype) / model.ab_norm,
        to_tensor(mask, dtype),
    )
    return (ab[0].permute(1, 2, 0).double().numpy(),
            dist[0].permute(1, 2, 0).double().numpy())


@torch.no_grad()
def embed(extractor: FeatureExtractor, img) -> np.ndarray:
    """Average-pooled deepest-tap features, used for nearest-neighbour search."""
    img = check_rgb(img)
    dtype = module_dtype(extractor)
    feats = extractor(to_tensor(img, dtype), taps=("R51",))["R51"]
    return feats.mean(dim=(2, 3))[0].double().numpy()


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0 if nu == nv else 1.0
    return float(1.0 - np.dot(u, v) / (nu * nv))
