"""Input-transformation defenses and defended-model evaluation."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .imaging import check_rgb, lp_metrics, to_numpy, to_tensor, to_uint8
from .models.adapters import Classifier, classify, module_dtype
from .results import AttackResult

logger = logging.getLogger(__name__)

KINDS = ("none", "jpeg", "bit_depth", "median", "nlm", "robust_model")


def jpeg_defense(img, quality: int = 75) -> np.ndarray:
    """Baseline JPEG round trip through Pillow's libjpeg with 4:2:0 chroma subsampling."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must lie in [1, 100], got {quality}")
    buf = io.BytesIO()
    try:
        Image.fromarray(to_uint8(check_rgb(img))).save(buf, format="JPEG", quality=int(quality),
                                                        subsampling="4:2:0", optimize=False)
    except OSError as exc:
        raise RuntimeError(f"JPEG encoding failed: {exc}") from exc
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255.0


def bit_depth_squeeze(img, bits: int) -> np.ndarray:
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must lie in [1, 8], got {bits}")
    levels = 2**bits - 1
    return np.round(np.asarray(img, dtype=np.float64) * levels) / levels


def median_filter(img, window=(3, 3)) -> np.ndarray:
    """Per-channel sliding median with reflective padding."""
    window = tuple(int(w) for w in window)
    if window not in ((2, 2), (3, 3)):
        raise ValueError(f"median window must be 2x2 or 3x3, got {window}")
    img = np.asarray(img, dtype=np.float64)
    return ndimage.median_filter(img, size=window + (1,), mode="reflect")


def nlm_denoise(img, search: int = 11, patch: int = 3, strength: float = 4.0) -> np.ndarray:
    """OpenCV non-local means on each 8-bit channel; ``strength`` is on the 0..255 scale."""
    u8 = to_uint8(check_rgb(img))
    out = np.stack([
        cv2.fastNlMeansDenoising(np.ascontiguousarray(u8[..., c]), None, h=float(strength),
                                 templateWindowSize=int(patch), searchWindowSize=int(search))
        for c in range(3)
    ], axis=-1)
    return out.astype(np.float64) / 255.0


@dataclass
class DefenseSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}; expected one of {KINDS}")
        p = self.params
        if self.kind == "jpeg":
            p.setdefault("quality", 75)
            if not 1 <= int(p["quality"]) <= 100:
                raise ValueError("JPEG quality must lie in [1, 100]")
        elif self.kind == "bit_depth":
            if int(p.get("bits", 0)) not in (4, 5):
                raise ValueError("bit_depth defense needs bits of 4 or 5")
        elif self.kind == "median":
            p["window"] = tuple(p.get("window", (3, 3)))
            if p["window"] not in ((2, 2), (3, 3)):
                raise ValueError("median window must be 2x2 or 3x3")
        elif self.kind == "nlm":
            p.setdefault("search", 11)
            p.setdefault("patch", 3)
            p.setdefault("strength", 4)
        elif self.kind == "robust_model":
            if not p.get("model"):
                raise ValueError("robust_model defense needs a model tag")

    @property
    def name(self) -> str:
        p = self.params
        return {
            "none": lambda: "none",
            "jpeg": lambda: f"JPEG{p['quality']}",
            "bit_depth": lambda: f"{p['bits']}-bit",
            "median": lambda: f"{p['window'][0]}x{p['window'][1]}",
            "nlm": lambda: f"{p['search']}-{p['patch']}-{p['strength']}",
            "robust_model": lambda: str(p["model"]),
        }[self.kind]()

    def transform(self) -> Callable[[np.ndarray], np.ndarray]:
        p = self.params
        if self.kind == "jpeg":
            return lambda x: jpeg_defense(x, int(p["quality"]))
        if self.kind == "bit_depth":
            return lambda x: bit_depth_squeeze(x, int(p["bits"]))
        if self.kind == "median":
            return lambda x: median_filter(x, p["window"])
        if self.kind == "nlm":
            return lambda x: nlm_denoise(x, int(p["search"]), int(p["patch"]), float(p["strength"]))
        return lambda x: x


# the defense columns of the standard comparison table
TABLE_DEFENSES = (
    DefenseSpec("jpeg", {"quality": 75}),
    DefenseSpec("bit_depth", {"bits": 4}),
    DefenseSpec("bit_depth", {"bits": 5}),
    DefenseSpec("median", {"window": (2, 2)}),
    DefenseSpec("median", {"window": (3, 3)}),
    DefenseSpec("nlm", {"search": 11, "patch": 3, "strength": 4}),
)


@dataclass
class DefenseReport:
    """Rates are percentages over ``count`` attacked images."""

    attack: str
    defense: str
    misclassification: float
    targeted: float
    count: int

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("a defense report needs at least one sample")
        for rate in (self.misclassification, self.targeted):
            if not 0.0 <= rate <= 100.0:
                raise ValueError(f"rate {rate} outside [0, 100]")


def evaluate_defended(results: Sequence[AttackResult], spec: DefenseSpec, classifier: Classifier,
                      robust: Classifier | None = None) -> DefenseReport:
    """Reclassify defended adversarial images.

    For ``robust_model`` the images go unchanged to ``robust`` instead of
    ``classifier``.
    """
    if not results:
        raise ValueError("no attack results to evaluate")
    model = classifier
    if spec.kind == "robust_model":
        if robust is None:
            raise ValueError("robust_model defense needs the robust classifier")
        model = robust
    fn = spec.transform()
    wrong = hit = 0
    for r in results:
        if r.adversarial is None:
            raise ValueError(f"attack result for target {r.target} carries no adversarial image")
        if r.label is None:
            raise ValueError("attack results must carry the ground-truth label")
        _, pred = classify(model, fn(r.adversarial))
        wrong += pred != r.label
        hit += pred == r.target
    n = len(results)
    methods = sorted({r.method for r in results})
    return DefenseReport("+".join(methods), spec.name, 100.0 * wrong / n, 100.0 * hit / n, n)


def write_defense_table(reports: Sequence[DefenseReport], path, metric: str = "misclassification"):
    """One row per attack and one column per defense, in first-seen order."""
    columns, rows = [], {}
    for rep in reports:
        if rep.defense not in columns:
            columns.append(rep.defense)
        rows.setdefault(rep.attack, {})[rep.defense] = getattr(rep, metric)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attack"] + columns)
        for attack in sorted(rows):
            writer.writerow([attack] + [
                f"{rows[attack][c]:.2f}" if c in rows[attack] else "" for c in columns
            ])
    return path


# baseline attack ----------------------------------------------------------------


def bim_attack(classifier: Classifier, img, target: int, eps: float = 0.05,
               step: float = 1 / 255, iters: int = 20, label: int | None = None) -> AttackResult:
    """Targeted basic iterative method inside an L-infinity ball."""
    img = check_rgb(img)
    dtype = module_dtype(classifier)
    x0 = to_tensor(img, dtype)
    x = x0.clone()
    target_t = torch.tensor([target])
    trace = []
    for it in range(iters):
        x.requires_grad_(True)
        logits = classifier(x)
        loss = F.cross_entropy(logits, target_t)
        (grad,) = torch.autograd.grad(loss, x)
        with torch.no_grad():
            x = x - step * grad.sign()
            x = torch.min(torch.max(x, x0 - eps), x0 + eps).clamp(0.0, 1.0)
        trace.append({"iter": it, "loss": loss.item()})
    with torch.no_grad():
        probs = torch.softmax(classifier(x), dim=1)[0]
    adv = to_numpy(x)
    return AttackResult(
        method="bim", original=img, adversarial=adv, target=int(target),
        success=int(probs.argmax()) == target, confidence=float(probs[target]),
        norms=lp_metrics(img, adv), label=label, iterations=iters, trace=trace,
        info={"eps": eps, "step": step},
    )
