"""Colorization attack.

The victim image is split into lightness and chroma. A pretrained user-guided
colorizer re-colors the fixed lightness channel from a set of chroma hints
and a hint mask, and the attack searches over those hints and mask (or over a
private copy of the colorizer's weights) until the classifier reports the
target class.

Hints are seeded from ground-truth chroma at pixels drawn from the image's
least ambiguous color regions: chroma is blurred and clustered with K-Means,
each cluster is scored by the mean per-pixel entropy of the colorizer's bin
distribution, and hints come from the ``k`` lowest-entropy clusters.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans

from .imaging import LabImage, gaussian_blur, lab_to_rgb, lab_to_rgb_torch, lp_metrics, rgb_to_lab, to_tensor
from .models.adapters import Classifier, Colorizer, colorize, module_dtype
from .results import AttackAborted, AttackResult

logger = logging.getLogger(__name__)

AB_RANGE = (-128.0, 127.0)


@dataclass
class CadvConfig:
    k: int = 4
    n_hints: int = 50
    lr: float = 1e-4
    conf_delta: float = 0.05
    max_iters: int = 500
    sigma: float = 3.0
    n_clusters: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.k <= self.n_clusters:
            raise ValueError(f"k must lie in [1, {self.n_clusters}], got {self.k}")
        if self.n_hints < 0:
            raise ValueError("n_hints must be non-negative")
        if self.lr <= 0 or self.conf_delta <= 0 or self.sigma <= 0:
            raise ValueError("lr, conf_delta and sigma must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")


@dataclass
class EntropyMap:
    entropy: np.ndarray
    bin_count: int


@dataclass
class ClusterMap:
    assignment: np.ndarray
    centroids: np.ndarray
    requested: int

    @property
    def n_effective(self) -> int:
        return len(self.centroids)

    def pixels(self, cluster: int) -> np.ndarray:
        """Flat indices of the pixels assigned to ``cluster``."""
        return np.flatnonzero(self.assignment.ravel() == cluster)

    def mean_entropy(self, entropy: EntropyMap) -> np.ndarray:
        if entropy.entropy.shape != self.assignment.shape:
            raise ValueError("entropy map and cluster map disagree on shape")
        flat = self.assignment.ravel()
        sums = np.bincount(flat, weights=entropy.entropy.ravel(), minlength=self.n_effective)
        counts = np.bincount(flat, minlength=self.n_effective)
        return sums / counts


@dataclass
class HintSet:
    hint_ab: np.ndarray
    mask: np.ndarray
    positions: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def empty(cls, shape) -> "HintSet":
        h, w = shape
        return cls(np.zeros((h, w, 2)), np.zeros((h, w, 1)), [])

    @classmethod
    def full(cls, gt_ab) -> "HintSet":
        """Every pixel hinted with its ground-truth chroma."""
        h, w = gt_ab.shape[:2]
        positions = [(r, c) for r in range(h) for c in range(w)]
        return cls(np.array(gt_ab, dtype=np.float64), np.ones((h, w, 1)), positions)


def compute_entropy_map(dist, base: float | None = None, atol: float = 1e-4) -> EntropyMap:
    """Per-pixel Shannon entropy of an ``H x W x Q`` distribution (natural log by default)."""
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError(f"expected an H x W x Q distribution, got shape {p.shape}")
    if p.min() < 0:
        raise ValueError("distribution has negative entries")
    total = p.sum(axis=-1)
    if np.abs(total - 1.0).max() > atol:
        raise ValueError(
            f"distribution rows must sum to 1 within {atol}, worst is {total.flat[np.abs(total - 1).argmax()]}"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    q = p.shape[-1]
    h = np.clip(h, 0.0, np.log(q))
    if base is not None:
        h = h / np.log(base)
    return EntropyMap(h, q)


def cluster_ab(lab: LabImage, cfg: CadvConfig) -> ClusterMap:
    """K-Means over blurred per-pixel chroma.

    Duplicate centroids are merged, so images with fewer distinct chroma
    values than requested clusters yield fewer (effective) clusters.
    """
    a = gaussian_blur(lab.ab[..., 0], cfg.sigma)
    b = gaussian_blur(lab.ab[..., 1], cfg.sigma)
    points = np.stack([a.ravel(), b.ravel()], axis=1)
    distinct = len(np.unique(np.round(points, 6), axis=0))
    n = min(cfg.n_clusters, distinct)
    km = KMeans(n_clusters=n, init="k-means++", n_init=1, max_iter=300, tol=1e-4,
                random_state=cfg.seed).fit(points)
    labels = km.labels_
    # merge coincident centroids and drop empty clusters, keeping index order
    keys = np.round(km.cluster_centers_, 6)
    used = np.unique(labels)
    _, first, inverse = np.unique(keys[used], axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    remap = np.full(n, -1)
    remap[used] = rank[np.ravel(inverse)]
    assignment = remap[labels].reshape(lab.shape)
    centroids = np.stack([points[assignment.ravel() == c].mean(axis=0) for c in range(len(order))])
    if len(centroids) < cfg.n_clusters:
        logger.info("image yields %d effective chroma clusters (requested %d)",
                    len(centroids), cfg.n_clusters)
    return ClusterMap(assignment, centroids, cfg.n_clusters)


def lowest_entropy_clusters(clusters: ClusterMap, entropy: EntropyMap, k: int) -> np.ndarray:
    means = clusters.mean_entropy(entropy)
    if k > clusters.n_effective:
        logger.warning("k=%d exceeds the %d effective clusters; using all of them",
                       k, clusters.n_effective)
    return np.argsort(means, kind="stable")[:k]


def sample_hints(clusters: ClusterMap, entropy: EntropyMap, gt_ab, cfg: CadvConfig) -> HintSet:
    gt_ab = np.asarray(gt_ab, dtype=np.float64)
    shape = clusters.assignment.shape
    if gt_ab.shape != shape + (2,):
        raise ValueError(f"ground-truth chroma {gt_ab.shape} does not match clusters {shape}")
    hints = HintSet.empty(shape)
    if cfg.n_hints == 0:
        return hints
    chosen = lowest_entropy_clusters(clusters, entropy, cfg.k)
    pool = np.flatnonzero(np.isin(clusters.assignment.ravel(), chosen))
    if cfg.n_hints > len(pool):
        raise ValueError(
            f"requested {cfg.n_hints} hints but the {len(chosen)} lowest-entropy clusters "
            f"hold only {len(pool)} pixels (short by {cfg.n_hints - len(pool)})"
        )
    rng = np.random.default_rng(cfg.seed)
    picks = rng.choice(pool, size=cfg.n_hints, replace=False)
    rows, cols = np.unravel_index(picks, shape)
    hints.hint_ab[rows, cols] = gt_ab[rows, cols]
    hints.mask[rows, cols, 0] = 1.0
    hints.positions = list(zip(rows.tolist(), cols.tolist()))
    return hints


# optimization -----------------------------------------------------------------


def _render(colorizer, L, hint_norm, mask):
    ab, _ = colorizer(L, hint_norm, mask)
    return lab_to_rgb_torch(torch.cat([L, ab], dim=1))


def hint_objective(classifier, colorizer, L, hint_norm, mask, target: int) -> torch.Tensor:
    """Targeted cross-entropy of ``classifier`` on the image colorized from hints and mask."""
    logits = classifier(_render(colorizer, L, hint_norm, mask))
    return F.cross_entropy(logits, torch.tensor([target]))


def _descend(render, optimizer, project, classifier, target, cfg):
    """Shared Adam loop: stop once the target is predicted and its confidence settles."""
    trace = []
    prev = None
    stopped = False
    target_t = torch.tensor([target])
    for it in range(cfg.max_iters + 1):
        rgb = render()
        logits = classifier(rgb)
        loss = F.cross_entropy(logits, target_t)
        if not torch.isfinite(loss):
            raise AttackAborted(f"non-finite adversarial loss at iteration {it}: {loss.item()}")
        probs = torch.softmax(logits.detach(), dim=1)[0]
        conf = float(probs[target])
        pred = int(probs.argmax())
        trace.append({"iter": it, "loss": loss.item(), "confidence": conf, "pred": pred})
        if pred == target and prev is not None and abs(conf - prev) <= cfg.conf_delta:
            stopped = True
            break
        prev = conf
        if it == cfg.max_iters:
            break
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            project()
    return rgb.detach(), trace, stopped


def _result(method, lab, rgb, trace, stopped, target, label, start, info):
    original = lab_to_rgb(lab)
    adv = rgb[0].permute(1, 2, 0).double().numpy()
    last = trace[-1]
    info = dict(info, stopped=stopped)
    return AttackResult(
        method=method,
        original=original,
        adversarial=adv,
        target=int(target),
        success=last["pred"] == target,
        confidence=last["confidence"],
        norms=lp_metrics(original, adv),
        label=label,
        iterations=len(trace) - 1,
        trace=trace,
        wall_clock=time.perf_counter() - start,
        info=info,
    )


def _lab_tensors(lab: LabImage, dtype):
    return to_tensor(lab.L[..., None], dtype)


def attack_hints_mask(classifier: Classifier, colorizer: Colorizer, lab: LabImage,
                      hints: HintSet, target: int, cfg: CadvConfig,
                      label: int | None = None) -> AttackResult:
    """Jointly optimize the dense hint field and mask against the target class."""
    start = time.perf_counter()
    if hints.hint_ab.shape != lab.shape + (2,) or hints.mask.shape != lab.shape + (1,):
        raise ValueError(
            f"hints {hints.hint_ab.shape}/{hints.mask.shape} do not match image {lab.shape}"
        )
    if not 0 <= target < classifier.label_count:
        raise ValueError(f"target {target} outside the classifier's {classifier.label_count} labels")
    dtype = module_dtype(colorizer)
    L = _lab_tensors(lab, dtype)
    hint_norm = (to_tensor(hints.hint_ab, dtype) / colorizer.ab_norm).requires_grad_(True)
    mask = to_tensor(hints.mask, dtype).requires_grad_(True)
    lo, hi = AB_RANGE[0] / colorizer.ab_norm, AB_RANGE[1] / colorizer.ab_norm
    optimizer = torch.optim.Adam([hint_norm, mask], lr=cfg.lr)

    def project():
        mask.clamp_(0.0, 1.0)
        hint_norm.clamp_(lo, hi)

    rgb, trace, stopped = _descend(
        lambda: _render(colorizer, L, hint_norm, mask), optimizer, project, classifier, target, cfg
    )
    info = {
        "variant": "hints_mask",
        "k": cfg.k,
        "n_hints": len(hints.positions),
        "positions": [list(p) for p in hints.positions],
        "mask_mean": float(mask.detach().mean()),
        "final_hint_ab": hint_norm.detach()[0].permute(1, 2, 0).double().numpy() * colorizer.ab_norm,
        "final_mask": mask.detach()[0].permute(1, 2, 0).double().numpy(),
    }
    return _result(f"cadv{cfg.k}", lab, rgb, trace, stopped, target, label, start, info)


def attack_network_weights(classifier: Classifier, colorizer: Colorizer, lab: LabImage,
                           target: int, cfg: CadvConfig, label: int | None = None) -> AttackResult:
    """Optimize a private copy of the colorizer's parameters with no hints."""
    start = time.perf_counter()
    if not 0 <= target < classifier.label_count:
        raise ValueError(f"target {target} outside the classifier's {classifier.label_count} labels")
    net = copy.deepcopy(colorizer).eval()
    params = [p for p in net.parameters()]
    for p in params:
        p.requires_grad_(True)
    if not params:
        raise ValueError("colorizer has no parameters to attack")
    dtype = module_dtype(net)
    L = _lab_tensors(lab, dtype)
    zero_hints = torch.zeros((1, 2) + lab.shape, dtype=dtype)
    zero_mask = torch.zeros((1, 1) + lab.shape, dtype=dtype)
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    rgb, trace, stopped = _descend(
        lambda: _render(net, L, zero_hints, zero_mask), optimizer, lambda: None,
        classifier, target, cfg,
    )
    return _result("cadv-weights", lab, rgb, trace, stopped, target, label, start,
                   {"variant": "network_weights"})


def prepare_hints(colorizer: Colorizer, lab: LabImage, cfg: CadvConfig):
    """Entropy map, clustering and sampled hints for one image."""
    hints0 = HintSet.empty(lab.shape)
    _, dist = colorize(colorizer, lab.L, hints0.hint_ab, hints0.mask)
    entropy = compute_entropy_map(dist)
    clusters = cluster_ab(lab, cfg)
    return sample_hints(clusters, entropy, lab.ab, cfg), clusters, entropy


def cadv_attack(classifier: Classifier, colorizer: Colorizer, img, target: int,
                cfg: CadvConfig, label: int | None = None) -> AttackResult:
    """Full hints-and-mask pipeline starting from an RGB image."""
    lab = rgb_to_lab(img)
    hints, clusters, entropy = prepare_hints(colorizer, lab, cfg)
    result = attack_hints_mask(classifier, colorizer, lab, hints, target, cfg, label=label)
    result.original = np.asarray(img, dtype=np.float64)
    result.norms = lp_metrics(result.original, result.adversarial)
    result.info["cluster_mean_entropy"] = clusters.mean_entropy(entropy).tolist()
    return result
