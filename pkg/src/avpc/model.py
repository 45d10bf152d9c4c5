"""Vision encoder + PCNet bundle and the versioned checkpoint container."""
from __future__ import annotations

import dataclasses
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .dsp import SpectrogramConfig
from .pcnet import PCNet, PCNetArch
from .vision import ClassEmbedding, FrameEncoder

CHECKPOINT_FORMAT = "avpc-checkpoint"
CHECKPOINT_VERSION = 1
LOG_FLOOR = 1e-3


def network_input(warped_mag) -> torch.Tensor:
    """Log-compressed warped magnitude, ``(..., bins, frames)`` -> ``(B, 1, bins, frames)``."""
    x = torch.as_tensor(np.asarray(warped_mag))
    x = torch.log(x + LOG_FLOOR)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    return x


class AVPCModel(nn.Module):
    def __init__(
        self,
        arch: PCNetArch,
        guidance: str = "frames",
        n_classes: int = 8,
        pooling: str = "mean",
        freeze_trunk: bool = False,
    ):
        super().__init__()
        if guidance not in ("frames", "class"):
            raise ValueError("guidance must be 'frames' or 'class'")
        self.arch = arch
        self.guidance = guidance
        self.n_classes = n_classes
        self.pooling = pooling
        self.freeze_trunk = freeze_trunk
        if guidance == "frames":
            self.vision = FrameEncoder(arch.feature_channels, arch.feature_side, pooling=pooling, freeze_trunk=freeze_trunk)
        else:
            self.vision = ClassEmbedding(n_classes, arch.feature_channels, arch.feature_side)
        self.pcnet = PCNet(arch)

    def guide(self, visual) -> torch.Tensor:
        return self.vision(visual)

    def forward(self, spec_in: torch.Tensor, visual, T: int | None = None, trace: bool = False):
        mask, tr, state = self.pcnet(spec_in, self.guide(visual), T=T, trace=trace)
        return mask, tr, state

    def config(self) -> dict:
        return {
            "arch": dataclasses.asdict(self.arch),
            "guidance": self.guidance,
            "n_classes": self.n_classes,
            "pooling": self.pooling,
            "freeze_trunk": self.freeze_trunk,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "AVPCModel":
        arch_d = dict(cfg["arch"])
        if arch_d.get("widths") is not None:
            arch_d["widths"] = tuple(arch_d["widths"])
        return cls(
            PCNetArch(**arch_d),
            guidance=cfg["guidance"],
            n_classes=cfg["n_classes"],
            pooling=cfg["pooling"],
            freeze_trunk=cfg["freeze_trunk"],
        )

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters split into ``separation``, ``vision_extra`` and ``vision_trunk``."""
        groups = {"separation": list(self.pcnet.parameters()), "vision_extra": [], "vision_trunk": []}
        if isinstance(self.vision, FrameEncoder):
            groups["vision_extra"] = list(self.vision.extra.parameters())
            groups["vision_trunk"] = [p for p in self.vision.trunk.parameters() if p.requires_grad]
        else:
            groups["vision_extra"] = list(self.vision.parameters())
        return groups


def save_checkpoint(path, model: AVPCModel, seed: int | None = None, meta: dict | None = None,
                    spectrogram: SpectrogramConfig | None = None, extra_state: dict | None = None) -> Path:
    """Write atomically: a failed save never leaves a partial file behind."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.config(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "seed": seed,
        "meta": dict(meta or {}),
        "spectrogram": dataclasses.asdict(spectrogram) if spectrogram is not None else None,
        "extra_state": extra_state or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def load_checkpoint(path) -> tuple[AVPCModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an AVPC checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    model = AVPCModel.from_config(payload["model"])
    first = next(iter(payload["state_dict"].values()))
    if first.is_floating_point():
        model.to(first.dtype)
    model.load_state_dict(payload["state_dict"])
    return model, payload


def checkpoint_spectrogram(payload: dict) -> SpectrogramConfig:
    d = payload.get("spectrogram")
    return SpectrogramConfig(**d) if d else SpectrogramConfig()
