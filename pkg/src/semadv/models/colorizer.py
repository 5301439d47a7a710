"""User-guided colorization generator (real-time user-guided colorization layout).

The module and parameter names follow the published PyTorch port so its
pretrained state dict loads directly. ``width`` scales every channel count,
which lets the test suite build the same topology at toy size.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn


def ab_bin_centers(step: float = 10.0, limit: float = 110.0) -> np.ndarray:
    """Centers of the ``23 x 23`` quantized AB grid used by the distribution head."""
    axis = np.arange(-limit, limit + step / 2, step)
    a, b = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=1)


def _block(cin, cout, n, dilation=1, norm=True):
    layers = []
    for i in range(n):
        layers += [
            nn.Conv2d(cin if i == 0 else cout, cout, kernel_size=3, stride=1,
                      padding=dilation, dilation=dilation, bias=True),
            nn.ReLU(True),
        ]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    return nn.Sequential(*layers)


class SIGGRAPHGenerator(nn.Module):
    def __init__(self, width: int = 64, classes: int = 529):
        super().__init__()
        c1, c2, c3, c4 = width, 2 * width, 4 * width, 8 * width
        self.model1 = _block(4, c1, 2)
        self.model2 = _block(c1, c2, 2)
        self.model3 = _block(c2, c3, 3)
        self.model4 = _block(c3, c4, 3)
        self.model5 = _block(c4, c4, 3, dilation=2)
        self.model6 = _block(c4, c4, 3, dilation=2)
        self.model7 = _block(c4, c4, 3)

        self.model8up = nn.Sequential(nn.ConvTranspose2d(c4, c3, kernel_size=4, stride=2, padding=1))
        self.model3short8 = nn.Sequential(nn.Conv2d(c3, c3, kernel_size=3, padding=1))
        self.model8 = nn.Sequential(
            nn.ReLU(True),
            nn.Conv2d(c3, c3, 3, padding=1), nn.ReLU(True),
            nn.Conv2d(c3, c3, 3, padding=1), nn.ReLU(True),
            nn.BatchNorm2d(c3),
        )
        self.model9up = nn.Sequential(nn.ConvTranspose2d(c3, c2, kernel_size=4, stride=2, padding=1))
        self.model2short9 = nn.Sequential(nn.Conv2d(c2, c2, kernel_size=3, padding=1))
        self.model9 = nn.Sequential(
            nn.ReLU(True), nn.Conv2d(c2, c2, 3, padding=1), nn.ReLU(True), nn.BatchNorm2d(c2),
        )
        self.model10up = nn.Sequential(nn.ConvTranspose2d(c2, c2, kernel_size=4, stride=2, padding=1))
        self.model1short10 = nn.Sequential(nn.Conv2d(c1, c2, kernel_size=3, padding=1))
        self.model10 = nn.Sequential(
            nn.ReLU(True), nn.Conv2d(c2, c2, 3, padding=1), nn.LeakyReLU(negative_slope=0.2),
        )
        self.model_class = nn.Sequential(nn.Conv2d(c3, classes, kernel_size=1))
        self.model_out = nn.Sequential(nn.Conv2d(c2, 2, kernel_size=1), nn.Tanh())
        self.upsample4 = nn.Upsample(scale_factor=4, mode="bilinear", align_corners=False)

    def forward(self, l_norm, ab_norm, mask):
        if l_norm.shape[-1] % 8 or l_norm.shape[-2] % 8:
            raise ValueError("colorizer input height and width must be multiples of 8")
        conv1_2 = self.model1(torch.cat([l_norm, ab_norm, mask], dim=1))
        conv2_2 = self.model2(conv1_2[:, :, ::2, ::2])
        conv3_3 = self.model3(conv2_2[:, :, ::2, ::2])
        conv4_3 = self.model4(conv3_3[:, :, ::2, ::2])
        conv7_3 = self.model7(self.model6(self.model5(conv4_3)))
        conv8_3 = self.model8(self.model8up(conv7_3) + self.model3short8(conv3_3))
        conv9_3 = self.model9(self.model9up(conv8_3) + self.model2short9(conv2_2))
        conv10_2 = self.model10(self.model10up(conv9_3) + self.model1short10(conv1_2))
        logits = self.upsample4(self.model_class(conv8_3))
        return self.model_out(conv10_2), logits
