"""Model registry keyed by string tags.

Pretrained weights are never bundled. They are read from a weights directory
given explicitly or through the ``SEMADV_WEIGHTS`` environment variable:

=================  ======================================================
tag                file(s) in the weights directory
=================  ======================================================
resnet50           ``resnet50.pth`` (torchvision state dict)
densenet121        ``densenet121.pth``
vgg19              ``vgg19.pth``
resnet152          ``resnet152.pth``
adv-resnet152      ``adv-resnet152.pth`` (any adversarially trained ResNet152)
vgg19-features     ``vgg19.pth`` (texture taps R11..R51)
colorizer          ``colorizer.pth`` (user-guided colorization generator)
captioner          ``captioner.pt`` (TorchScript) + ``captioner.json``
=================  ======================================================

Tags starting with ``toy-`` build seeded synthetic models and need no files.
"""
from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torchvision

from . import toy
from .adapters import IMAGENET_MEAN, IMAGENET_STD, Captioner, Colorizer, FeatureExtractor, Classifier
from .colorizer import SIGGRAPHGenerator, ab_bin_centers

WEIGHTS_ENV = "SEMADV_WEIGHTS"

_VGG_TAP_ENDS = (2, 7, 12, 21, 30)  # relu1_1 .. relu5_1 in torchvision's vgg19.features


class MissingWeightsError(FileNotFoundError):
    pass


def weights_dir(path=None) -> Path:
    path = path or os.environ.get(WEIGHTS_ENV)
    if not path:
        raise MissingWeightsError(
            f"no weights directory configured; pass one or set ${WEIGHTS_ENV}"
        )
    return Path(path)


def _state_dict(path: Path) -> dict:
    if not path.exists():
        raise MissingWeightsError(f"weights file not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    return {k.removeprefix("module."): v for k, v in state.items()}


def _densenet_keys(state: dict) -> dict:
    # old checkpoints spell 'norm.1' where the current module has 'norm1'
    pattern = re.compile(r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var))$")
    out = {}
    for k, v in state.items():
        m = pattern.match(k)
        out[m.group(1) + m.group(2) if m else k] = v
    return out


def _torchvision_classifier(arch: str, filename: str, tag: str, wdir) -> Classifier:
    net = getattr(torchvision.models, arch)(weights=None)
    state = _state_dict(weights_dir(wdir) / filename)
    if arch.startswith("densenet"):
        state = _densenet_keys(state)
    net.load_state_dict(state)
    return Classifier(net, tag, 1000, input_size=(224, 224), mean=IMAGENET_MEAN, std=IMAGENET_STD)


def _vgg_features(wdir) -> FeatureExtractor:
    net = torchvision.models.vgg19(weights=None)
    net.load_state_dict(_state_dict(weights_dir(wdir) / "vgg19.pth"))
    layers = list(net.features.children())
    stages, start = [], 0
    for end in _VGG_TAP_ENDS:
        stages.append(nn.Sequential(*layers[start:end]))
        start = end
    return FeatureExtractor(stages, "vgg19-features", (64, 128, 256, 512, 512),
                            mean=IMAGENET_MEAN, std=IMAGENET_STD)


def _colorizer(wdir) -> Colorizer:
    net = SIGGRAPHGenerator()
    net.load_state_dict(_state_dict(weights_dir(wdir) / "colorizer.pth"))
    return Colorizer(net, "colorizer", ab_bin_centers())


def _captioner(wdir) -> Captioner:
    root = weights_dir(wdir)
    script, meta = root / "captioner.pt", root / "captioner.json"
    if not script.exists() or not meta.exists():
        raise MissingWeightsError(f"captioner needs {script} and {meta}")
    info = json.loads(meta.read_text())
    net = torch.jit.load(str(script), map_location="cpu")
    return Captioner(net, "captioner", info["vocab"], info["max_len"],
                     input_size=info.get("input_size"), mean=info.get("mean"),
                     std=info.get("std"), bos=info.get("bos"))


_FACTORIES: dict[str, Callable] = {
    "resnet50": lambda w: _torchvision_classifier("resnet50", "resnet50.pth", "resnet50", w),
    "densenet121": lambda w: _torchvision_classifier("densenet121", "densenet121.pth", "densenet121", w),
    "vgg19": lambda w: _torchvision_classifier("vgg19", "vgg19.pth", "vgg19", w),
    "resnet152": lambda w: _torchvision_classifier("resnet152", "resnet152.pth", "resnet152", w),
    "adv-resnet152": lambda w: _torchvision_classifier("resnet152", "adv-resnet152.pth", "adv-resnet152", w),
    "vgg19-features": _vgg_features,
    "colorizer": _colorizer,
    "captioner": _captioner,
    "toy-classifier": lambda w: toy.prototype_classifier(0),
    "toy-classifier-b": lambda w: toy.prototype_classifier(1),
    "toy-classifier-c": lambda w: toy.prototype_classifier(2),
    "toy-robust": lambda w: toy.prototype_classifier(3, temperature=0.5),
    "toy-conv": lambda w: toy.toy_classifier(0),
    "toy-abmean": lambda w: toy.ab_mean_classifier(),
    "toy-hf": lambda w: toy.high_frequency_classifier(),
    "toy-extractor": lambda w: toy.toy_extractor(),
    "toy-colorizer": lambda w: toy.toy_colorizer(),
    "toy-captioner": lambda w: toy.toy_captioner(),
}


def register(tag: str, factory: Callable) -> None:
    """Add a model; ``factory(weights_dir)`` must return an adapter."""
    _FACTORIES[tag] = factory


def registered_tags() -> list[str]:
    return sorted(_FACTORIES)


def load_model(tag: str, weights: str | os.PathLike | None = None):
    try:
        factory = _FACTORIES[tag]
    except KeyError:
        raise KeyError(f"unknown model tag {tag!r}; known: {registered_tags()}") from None
    model = factory(weights)
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()
