from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import NormReport


class AttackAborted(RuntimeError):
    """Raised when an optimization loop hits a non-finite loss or bad inputs."""


@dataclass
class AttackResult:
    """Outcome of one targeted attack on one image.

    ``trace`` holds one dict per optimization iteration (or L-BFGS round);
    ``info`` carries attack-specific extras such as hint positions or step
    counts.
    """

    method: str
    original: np.ndarray
    adversarial: np.ndarray
    target: int
    success: bool
    confidence: float
    norms: NormReport
    label: int | None = None
    iterations: int = 0
    trace: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    info: dict = field(default_factory=dict)
