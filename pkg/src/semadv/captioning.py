"""Targeted attacks on image captioners.

Selected word positions are driven to target words, using either the
colorization pipeline (all pixels hinted with their true chroma, hints and
mask optimized) or texture matching as the perturbation mechanism. In
word-substitution mode the remaining positions are anchored to the original
caption with an extra cross-entropy term of weight one.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .cadv import AB_RANGE, HintSet
from .imaging import NormReport, check_rgb, lab_to_rgb_torch, lp_metrics, rgb_to_lab, to_numpy, to_tensor
from .models.adapters import Captioner, Colorizer, FeatureExtractor, cosine_distance, embed, module_dtype
from .results import AttackAborted
from .tadv import LAYER_PAIRS, TextureBank, _match_size, _taps, _texture_from_grams, gram_stats

logger = logging.getLogger(__name__)

MODES = ("word-substitution", "full-caption")
MECHANISMS = ("cadv", "tadv")


@dataclass
class CaptionTarget:
    positions: list[int]
    words: list[int]
    mode: str = "word-substitution"

    def __post_init__(self):
        self.positions = [int(p) for p in self.positions]
        self.words = [int(w) for w in self.words]
        if self.mode not in MODES:
            raise ValueError(f"unknown caption target mode {self.mode!r}")
        if len(self.positions) != len(self.words):
            raise ValueError("positions and target words differ in length")
        if not self.positions:
            raise ValueError("a caption target needs at least one position")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("target positions must be strictly increasing")
        if self.positions[0] < 0:
            raise ValueError("target positions must be non-negative")

    @classmethod
    def from_pairs(cls, captioner: Captioner, pairs: Sequence[tuple[int, str]]) -> "CaptionTarget":
        pairs = sorted(pairs)
        words = captioner.encode([w for _, w in pairs])
        return cls([p for p, _ in pairs], words, "word-substitution")

    @classmethod
    def from_caption(cls, captioner: Captioner, caption: str) -> "CaptionTarget":
        words = captioner.encode(caption)
        return cls(list(range(len(words))), words, "full-caption")

    def check_vocab(self, vocab_size: int):
        bad = [w for w in self.words if not 0 <= w < vocab_size]
        if bad:
            raise ValueError(f"target word ids {bad} outside a vocabulary of {vocab_size}")


@dataclass
class CaptionConfig:
    lr: float = 1e-4
    max_iters: int = 1000
    alpha: float = 250.0
    caption_weight: float = 1.0
    anchor_weight: float = 1.0
    layer_pairs: Sequence[tuple[str, str]] = LAYER_PAIRS
    history_size: int = 10
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.alpha <= 0:
            raise ValueError("lr and alpha must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        self.layer_pairs = tuple(tuple(p) for p in self.layer_pairs)


@dataclass
class CaptionAttackResult:
    mechanism: str
    original: np.ndarray
    adversarial: np.ndarray
    original_caption: list[int]
    caption: list[int]
    matches: list[bool]
    success: bool
    attention: dict[int, np.ndarray]
    norms: NormReport
    iterations: int = 0
    trace: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0


def caption_loss(logits: torch.Tensor, target: CaptionTarget) -> torch.Tensor:
    """Summed cross-entropy of the targeted positions; ``logits`` is ``(T, V)`` or ``(1, T, V)``."""
    if logits.ndim == 3:
        if logits.shape[0] != 1:
            raise ValueError("caption_loss handles one caption at a time")
        logits = logits[0]
    if max(target.positions) >= logits.shape[0]:
        raise ValueError(
            f"target position {max(target.positions)} beyond caption length {logits.shape[0]}"
        )
    target.check_vocab(logits.shape[1])
    pos = torch.tensor(target.positions)
    return F.cross_entropy(logits[pos], torch.tensor(target.words), reduction="sum")


def _desired(original: list[int], target: CaptionTarget) -> list[int]:
    want = list(original)
    for p, w in zip(target.positions, target.words):
        want[p] = w
    return want


def _anchor_loss(logits, original, target):
    free = [p for p in range(len(original)) if p not in set(target.positions)]
    if not free:
        return logits.new_zeros(())
    pos = torch.tensor(free)
    return F.cross_entropy(logits[0, pos], torch.tensor([original[p] for p in free]), reduction="sum")


def nearest_source(victim, bank: TextureBank, extractor: FeatureExtractor):
    """Bank image closest to the victim in embedding space, regardless of label."""
    if len(bank) == 0:
        raise ValueError("texture bank is empty")
    query = embed(extractor, victim)
    vecs = bank.embeddings(extractor)
    return bank.images[int(np.argmin([cosine_distance(query, v) for v in vecs]))]


def attack_caption(captioner: Captioner, image, target: CaptionTarget, mechanism: str,
                   cfg: CaptionConfig, colorizer: Colorizer | None = None,
                   extractor: FeatureExtractor | None = None, source=None) -> CaptionAttackResult:
    """Drive the targeted caption positions to their target words.

    ``cadv`` needs ``colorizer``; ``tadv`` needs ``extractor`` and a texture
    ``source`` (see :func:`nearest_source`).
    """
    start = time.perf_counter()
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
    image = check_rgb(image)
    target.check_vocab(len(captioner.vocab))
    if max(target.positions) >= captioner.max_len:
        raise ValueError(f"target position beyond the captioner's maximum length {captioner.max_len}")
    dtype = module_dtype(captioner)
    original_caption = captioner.generate(to_tensor(image, dtype))
    desired = _desired(original_caption, target)
    tokens = torch.tensor([desired])

    if mechanism == "cadv":
        if colorizer is None:
            raise ValueError("the cadv mechanism needs a colorizer")
        lab = rgb_to_lab(image)
        hints = HintSet.full(lab.ab)
        cdtype = module_dtype(colorizer)
        L = to_tensor(lab.L[..., None], cdtype)
        hint = (to_tensor(hints.hint_ab, cdtype) / colorizer.ab_norm).contiguous().requires_grad_(True)
        mask = to_tensor(hints.mask, cdtype).contiguous().requires_grad_(True)
        lo, hi = AB_RANGE[0] / colorizer.ab_norm, AB_RANGE[1] / colorizer.ab_norm
        params = [hint, mask]
        optimizer = torch.optim.Adam(params, lr=cfg.lr)

        def render():
            ab, _ = colorizer(L, hint, mask)
            return lab_to_rgb_torch(torch.cat([L, ab], dim=1)).to(dtype)

        def project():
            mask.clamp_(0.0, 1.0)
            hint.clamp_(lo, hi)

        def extra(rgb):
            return 0.0
    else:
        if extractor is None or source is None:
            raise ValueError("the tadv mechanism needs a feature extractor and a texture source")
        x = to_tensor(image, dtype).contiguous().requires_grad_(True)
        params = [x]
        src = _match_size(to_tensor(check_rgb(source), dtype), x)
        taps = _taps(cfg.layer_pairs)
        with torch.no_grad():
            source_grams = gram_stats(extractor(src, taps), cfg.layer_pairs)
        optimizer = torch.optim.LBFGS(params, lr=1.0, max_iter=1, history_size=cfg.history_size,
                                      line_search_fn="strong_wolfe", tolerance_grad=0.0,
                                      tolerance_change=0.0)

        def render():
            return x

        def project():
            x.clamp_(0.0, 1.0)

        def extra(rgb):
            feats = extractor(rgb, taps)
            return cfg.alpha * _texture_from_grams(gram_stats(feats, cfg.layer_pairs), source_grams, cfg.eps)

    def objective():
        rgb = render()
        logits, _ = captioner(rgb, tokens)
        loss = cfg.caption_weight * caption_loss(logits, target) + extra(rgb)
        if target.mode == "word-substitution":
            loss = loss + cfg.anchor_weight * _anchor_loss(logits, original_caption, target)
        if not torch.isfinite(loss):
            raise AttackAborted(f"non-finite caption objective: {loss.item()}")
        return loss

    def closure():
        optimizer.zero_grad()
        loss = objective()
        loss.backward(inputs=params)
        return loss

    trace = []
    prev = list(original_caption)
    stopped = False
    for it in range(cfg.max_iters + 1):
        with torch.no_grad():
            rgb = render().detach().clamp(0.0, 1.0)
        caption = captioner.generate(rgb)
        matched = all(caption[p] == w for p, w in zip(target.positions, target.words))
        trace.append({"iter": it, "caption": caption, "matched": matched})
        if matched and caption == prev:
            stopped = True
            break
        prev = caption
        if it == cfg.max_iters:
            break
        loss = optimizer.step(closure)
        trace[-1]["loss"] = loss.item()
        with torch.no_grad():
            project()

    adv = image.copy() if len(trace) == 1 and stopped else to_numpy(rgb)
    final = torch.as_tensor(adv, dtype=dtype).permute(2, 0, 1)[None]
    with torch.no_grad():
        caption = captioner.generate(final)
        _, attn = captioner(final, torch.tensor([caption]))
    matches = [caption[p] == w for p, w in zip(target.positions, target.words)]
    success = all(matches)
    if target.mode == "word-substitution":
        success = success and caption == desired
    return CaptionAttackResult(
        mechanism=mechanism,
        original=image,
        adversarial=adv,
        original_caption=original_caption,
        caption=caption,
        matches=matches,
        success=success,
        attention={p: attn[0, p].double().numpy() for p in target.positions},
        norms=lp_metrics(image, adv),
        iterations=len(trace) - 1,
        trace=trace,
        wall_clock=time.perf_counter() - start,
    )
