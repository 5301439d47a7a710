"""Semantic adversarial attacks: colorization and texture attacks on image models."""
from .cadv import CadvConfig, attack_hints_mask, attack_network_weights, cadv_attack
from .captioning import CaptionConfig, CaptionTarget, attack_caption, caption_loss
from .defenses import DefenseSpec, bim_attack, evaluate_defended
from .imaging import LabImage, NormReport, lab_to_rgb, lp_metrics, rgb_to_lab
from .results import AttackAborted, AttackResult
from .tadv import TadvConfig, TextureBank, attack_texture, cross_layer_gram, select_texture_source, texture_loss

__version__ = "0.1.0"

__all__ = [
    "AttackAborted",
    "AttackResult",
    "CadvConfig",
    "CaptionConfig",
    "CaptionTarget",
    "DefenseSpec",
    "LabImage",
    "NormReport",
    "TadvConfig",
    "TextureBank",
    "attack_caption",
    "attack_hints_mask",
    "attack_network_weights",
    "attack_texture",
    "bim_attack",
    "cadv_attack",
    "caption_loss",
    "cross_layer_gram",
    "evaluate_defended",
    "lab_to_rgb",
    "lp_metrics",
    "rgb_to_lab",
    "select_texture_source",
    "texture_loss",
]
