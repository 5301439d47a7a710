"""Texture attack.

The victim image is optimized directly with L-BFGS to match the cross-layer
Gram statistics of a texture source while a lightly weighted cross-entropy
term pulls the classifier toward the target class. A cross-layer Gram matrix
correlates the channels of one feature tap with the (nearest-upsampled)
channels of the next, coarser tap.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import check_rgb, load_image, lp_metrics, to_numpy, to_tensor
from .models.adapters import Classifier, FeatureExtractor, cosine_distance, embed, module_dtype
from .results import AttackAborted, AttackResult

logger = logging.getLogger(__name__)

LAYER_PAIRS = (("R11", "R21"), ("R21", "R31"), ("R31", "R41"), ("R41", "R51"))
STRATEGIES = ("random", "random-target", "nearest-target")


@dataclass
class TadvConfig:
    alpha: float = 250.0
    beta: float = 1e-3
    iters: int = 1
    steps_per_iter: int = 14
    conf_stop: float = 0.9
    layer_pairs: Sequence[tuple[str, str]] = LAYER_PAIRS
    source_strategy: str = "nearest-target"
    history_size: int = 10
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.iters not in (1, 3):
            raise ValueError(f"iters must be 1 or 3, got {self.iters}")
        if self.steps_per_iter < 1:
            raise ValueError("steps_per_iter must be positive")
        if self.source_strategy not in STRATEGIES:
            raise ValueError(f"unknown source strategy {self.source_strategy!r}")
        self.layer_pairs = tuple(tuple(p) for p in self.layer_pairs)


def cross_layer_gram(f_m: torch.Tensor, f_n: torch.Tensor) -> torch.Tensor:
    """Channel correlations between a tap and the next, coarser tap.

    Accepts ``(C, H, W)`` or ``(N, C, H, W)`` feature maps and returns
    ``(C_m, C_n)`` (or ``(N, C_m, C_n)``). ``f_n`` is nearest-upsampled to the
    spatial size of ``f_m`` before summing products over positions.
    """
    batched = f_m.ndim == 4
    if not batched:
        f_m, f_n = f_m[None], f_n[None]
    if f_m.ndim != 4 or f_n.ndim != 4 or f_m.shape[0] != f_n.shape[0]:
        raise ValueError(f"incompatible feature maps {tuple(f_m.shape)} and {tuple(f_n.shape)}")
    if f_n.shape[-2] > f_m.shape[-2] or f_n.shape[-1] > f_m.shape[-1]:
        raise ValueError("the second tap must not be spatially larger than the first")
    up = F.interpolate(f_n, size=f_m.shape[-2:], mode="nearest")
    if up.shape[-2:] != f_m.shape[-2:]:
        raise ValueError("upsampling failed to match spatial sizes")
    g = torch.einsum("nip,njp->nij", f_m.flatten(2), up.flatten(2))
    return g if batched else g[0]


def gram_stats(feats: dict, pairs) -> dict:
    return {pair: cross_layer_gram(feats[pair[0]], feats[pair[1]]) for pair in pairs}


def gram_normalizers(victim_grams: dict) -> dict:
    """Scalar standard deviation over all entries of each victim Gram matrix."""
    return {pair: float(g.detach().std(correction=0)) for pair, g in victim_grams.items()}


def _taps(pairs):
    return sorted({t for p in pairs for t in p})


def _texture_from_grams(victim_grams, source_grams, eps, normalizers=None):
    total = 0.0
    for pair, gv in victim_grams.items():
        gs = source_grams[pair]
        std = normalizers[pair] if normalizers is not None else gv.detach().std(correction=0)
        c = gv.shape[-1]
        total = total + ((gv - gs) ** 2).sum() / (std + eps) / c**2
    return total


def _as_batch(img, dtype):
    if isinstance(img, torch.Tensor):
        return img if img.ndim == 4 else img[None]
    return to_tensor(check_rgb(img), dtype)


def _match_size(src: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if src.shape[-2:] == like.shape[-2:]:
        return src
    return F.interpolate(src, size=like.shape[-2:], mode="bilinear", align_corners=False, antialias=True)


def texture_loss(victim, source, extractor: FeatureExtractor, cfg: TadvConfig,
                 normalizers: dict | None = None) -> torch.Tensor:
    """Std-normalized squared distance between cross-layer Gram statistics.

    ``victim`` and ``source`` are ``H x W x 3`` arrays or image tensors. The
    victim-side standard deviation is treated as a constant for gradients;
    ``normalizers`` pins it to given values instead of recomputing.
    """
    dtype = module_dtype(extractor)
    v = _as_batch(victim, dtype)
    s = _match_size(_as_batch(source, dtype), v)
    taps = _taps(cfg.layer_pairs)
    fv = extractor(v, taps)
    with torch.no_grad():
        fs = extractor(s, taps)
    for name, f in list(fv.items()) + list(fs.items()):
        if not torch.isfinite(f).all():
            raise AttackAborted(f"non-finite features at tap {name}")
    return _texture_from_grams(gram_stats(fv, cfg.layer_pairs), gram_stats(fs, cfg.layer_pairs),
                               cfg.eps, normalizers)


def texture_objective(x, source_grams, extractor, classifier, target, cfg, normalizers=None):
    """``alpha * texture + beta * cross-entropy`` for an image tensor ``x``."""
    feats = extractor(x, _taps(cfg.layer_pairs))
    tex = _texture_from_grams(gram_stats(feats, cfg.layer_pairs), source_grams, cfg.eps, normalizers)
    ce = F.cross_entropy(classifier(x), torch.tensor([target]))
    return cfg.alpha * tex + cfg.beta * ce, tex, ce


# texture source selection -----------------------------------------------------------


def content_hash(img) -> str:
    return hashlib.sha256(np.ascontiguousarray(np.asarray(img, dtype=np.float64)).tobytes()).hexdigest()


@dataclass
class TextureBank:
    """Labelled images texture sources are drawn from.

    On disk a bank is a directory holding the images plus ``index.csv`` with
    ``file,label`` rows; embeddings are cached next to it keyed by content hash.
    """

    images: list
    labels: list
    root: Path | None = None
    names: list = field(default_factory=list)
    _embeddings: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_directory(cls, root, size=None) -> "TextureBank":
        root = Path(root)
        index = root / "index.csv"
        if not index.exists():
            raise FileNotFoundError(f"texture bank index not found: {index}")
        images, labels, names = [], [], []
        with index.open(newline="") as fh:
            for row in csv.DictReader(fh):
                names.append(row["file"])
                images.append(load_image(root / row["file"], size))
                labels.append(int(row["label"]))
        return cls(images, labels, root, names)

    def _cache_path(self, tag):
        return None if self.root is None else self.root / f".embeddings-{tag}.npz"

    def embeddings(self, extractor: FeatureExtractor) -> np.ndarray:
        tag = extractor.tag
        if tag in self._embeddings:
            return self._embeddings[tag]
        cache = {}
        path = self._cache_path(tag)
        if path is not None and path.exists():
            with np.load(path) as data:
                cache = {k: data[k] for k in data.files}
        vecs, dirty = [], False
        for img in self.images:
            key = content_hash(img)
            if key not in cache:
                cache[key] = embed(extractor, img)
                dirty = True
            vecs.append(cache[key])
        if dirty and path is not None:
            np.savez(path, **cache)
        self._embeddings[tag] = np.stack(vecs) if vecs else np.zeros((0, 0))
        return self._embeddings[tag]


def select_texture_source(victim, target: int, bank: TextureBank, strategy: str,
                          seed: int = 0, extractor: FeatureExtractor | None = None):
    """Pick a texture source; returns ``(image, bank_index)``."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown source strategy {strategy!r}")
    if strategy == "random":
        eligible = np.arange(len(bank))
    else:
        eligible = np.flatnonzero(np.asarray(bank.labels) == target)
    if len(eligible) == 0:
        raise ValueError(f"no eligible texture sources for strategy {strategy!r} and target {target}")
    if strategy == "nearest-target":
        if extractor is None:
            raise ValueError("nearest-target selection needs a feature extractor")
        query = embed(extractor, victim)
        vecs = bank.embeddings(extractor)
        dists = [cosine_distance(query, vecs[i]) for i in eligible]
        idx = int(eligible[int(np.argmin(dists))])
    else:
        rng = np.random.default_rng(seed)
        idx = int(eligible[rng.integers(len(eligible))])
    return bank.images[idx], idx


# optimization ------------------------------------------------------------------------


def attack_texture(classifier: Classifier, victim, target: int, source, cfg: TadvConfig,
                   extractor: FeatureExtractor, label: int | None = None) -> AttackResult:
    """Rounds of ``steps_per_iter`` L-BFGS steps on the victim pixels."""
    start = time.perf_counter()
    victim = check_rgb(victim)
    if not 0 <= target < classifier.label_count:
        raise ValueError(f"target {target} outside the classifier's {classifier.label_count} labels")
    dtype = module_dtype(extractor)
    x = to_tensor(victim, dtype).contiguous().requires_grad_(True)
    src = _match_size(to_tensor(check_rgb(source), dtype), x)
    taps = _taps(cfg.layer_pairs)
    with torch.no_grad():
        source_grams = gram_stats(extractor(src, taps), cfg.layer_pairs)
    target_t = torch.tensor([target])

    trace = []
    for rnd in range(cfg.iters):
        opt = torch.optim.LBFGS(
            [x], lr=1.0, max_iter=cfg.steps_per_iter, max_eval=25 * cfg.steps_per_iter,
            tolerance_grad=0.0, tolerance_change=0.0, history_size=cfg.history_size,
            line_search_fn="strong_wolfe",
        )
        parts = {}

        def closure():
            opt.zero_grad()
            loss, tex, ce = texture_objective(x, source_grams, extractor, classifier, target, cfg)
            if not torch.isfinite(loss):
                raise AttackAborted(f"non-finite texture objective in round {rnd}: {loss.item()}")
            loss.backward()
            parts.update(loss=loss.item(), texture=tex.item(), ce=ce.item())
            return loss

        opt.step(closure)
        state = opt.state[x]
        steps = int(state.get("n_iter", 0))
        with torch.no_grad():
            x.clamp_(0.0, 1.0)
            probs = torch.softmax(classifier(x), dim=1)[0]
        conf, pred = float(probs[target]), int(probs.argmax())
        entry = {
            "round": rnd, "steps": steps, "func_evals": int(state.get("func_evals", 0)),
            "confidence": conf, "pred": pred, **parts,
        }
        if steps < cfg.steps_per_iter:
            entry["early_stop"] = "line search made no progress"
            logger.info("L-BFGS round %d stopped after %d of %d steps", rnd, steps, cfg.steps_per_iter)
        trace.append(entry)
        if conf > cfg.conf_stop:
            break

    adv = to_numpy(x)
    last = trace[-1]
    return AttackResult(
        method=f"tadv{cfg.alpha:g}_{cfg.iters}",
        original=victim,
        adversarial=adv,
        target=int(target),
        success=last["pred"] == target,
        confidence=last["confidence"],
        norms=lp_metrics(victim, adv),
        label=label,
        iterations=len(trace),
        trace=trace,
        wall_clock=time.perf_counter() - start,
        info={"rounds": len(trace), "steps": [t["steps"] for t in trace],
              "alpha": cfg.alpha, "beta": cfg.beta},
    )


def tadv_attack(classifier: Classifier, extractor: FeatureExtractor, victim, target: int,
                bank: TextureBank, cfg: TadvConfig, label: int | None = None) -> AttackResult:
    """Select a source with ``cfg.source_strategy`` and run :func:`attack_texture`."""
    source, idx = select_texture_source(victim, target, bank, cfg.source_strategy,
                                        seed=cfg.seed, extractor=extractor)
    result = attack_texture(classifier, victim, target, source, cfg, extractor, label=label)
    result.info["source_index"] = idx
    if bank.names:
        result.info["source"] = bank.names[idx]
    return result
