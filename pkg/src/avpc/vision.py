"""Visual guidance: a small strided CNN over frames, or a per-class lookup table."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn


class FrameEncoder(nn.Module):
    """Frames ``(B, F, H, W, 3)`` -> guidance map ``(B, K, side, side)``.

    Four stride-2 convolutions form the trunk; an adaptive pool pins the trunk
    output to 4x4 so any input of at least 64x64 is accepted. The extra
    convolution then sets the spatial size and channel count of the guidance
    map, and frames are pooled over time last.
    """

    def __init__(
        self,
        feature_channels: int = 16,
        feature_side: int = 2,
        trunk_widths: tuple[int, ...] = (16, 32, 32, 32),
        pooling: str = "mean",
        freeze_trunk: bool = False,
    ):
        super().__init__()
        if feature_side not in (1, 2, 4):
            raise ValueError("feature_side must be 1, 2 or 4")
        if pooling not in ("mean", "max"):
            raise ValueError("pooling must be 'mean' or 'max'")
        layers = []
        c_in = 3
        for w in trunk_widths:
            layers += [nn.Conv2d(c_in, w, 3, stride=2, padding=1), nn.ReLU()]
            c_in = w
        layers.append(nn.AdaptiveAvgPool2d(4))
        self.trunk = nn.Sequential(*layers)
        self.extra = nn.Conv2d(c_in, feature_channels, 3, stride=4 // feature_side, padding=1)
        self.feature_channels = feature_channels
        self.feature_side = feature_side
        self.pooling = pooling
        self.freeze_trunk = freeze_trunk
        if freeze_trunk:
            for p in self.trunk.parameters():
                p.requires_grad_(False)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 5 or frames.shape[-1] != 3:
            raise ValueError(f"frames must have shape (B, F, H, W, 3), got {tuple(frames.shape)}")
        if frames.shape[2] < 16 or frames.shape[3] < 16:
            raise ValueError("frames must be at least 16x16")
        B, Fr = frames.shape[:2]
        x = frames.reshape(B * Fr, *frames.shape[2:]).permute(0, 3, 1, 2)
        x = self.extra(self.trunk(x))
        x = x.reshape(B, Fr, *x.shape[1:])
        if self.pooling == "max":
            return x.amax(dim=1)
        # sorting first makes the sum order, and so the rounding, independent of frame order
        return x.sort(dim=1).values.mean(dim=1)


class ClassEmbedding(nn.Module):
    """Learnable guidance map per class, orthogonally initialised."""

    def __init__(self, n_classes: int, feature_channels: int = 16, feature_side: int = 2):
        super().__init__()
        dim = feature_channels * feature_side * feature_side
        table = torch.empty(n_classes, dim)
        if n_classes <= dim:
            nn.init.orthogonal_(table)
        else:
            nn.init.normal_(table, std=dim**-0.5)
        self.table = nn.Parameter(table.reshape(n_classes, feature_channels, feature_side, feature_side))

    @property
    def n_classes(self) -> int:
        return self.table.shape[0]

    def forward(self, class_ids: torch.Tensor) -> torch.Tensor:
        class_ids = torch.as_tensor(class_ids, dtype=torch.long)
        if class_ids.numel() and (class_ids.min() < 0 or class_ids.max() >= self.n_classes):
            raise ValueError(f"class id outside [0, {self.n_classes})")
        return self.table[class_ids]


def _as_frames(frames) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(frames))
    if x.dim() == 4:
        x = x.unsqueeze(0)
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValueError("frame values must lie in [0, 1]")
    return x


@torch.no_grad()
def encode_frames(frames, encoder: FrameEncoder) -> np.ndarray:
    """Guidance map for one ``(F, H, W, 3)`` stack, returned as ``(side, side, K)``."""
    param = next(encoder.parameters())
    x = _as_frames(frames).to(param.dtype)
    return encoder(x)[0].permute(1, 2, 0).cpu().numpy()


@torch.no_grad()
def encode_class(class_id: int, table: ClassEmbedding) -> np.ndarray:
    return table(torch.tensor([class_id]))[0].permute(1, 2, 0).cpu().numpy()
