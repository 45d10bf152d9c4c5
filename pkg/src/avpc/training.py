"""Mix-and-Separate training, RCoP pretraining, curriculum stages and gradient checking."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ClipBank, sample_mixture
from .dsp import SeparationMask, stft, warp_log_frequency
from .model import AVPCModel, network_input, save_checkpoint

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_sources: int = 2
    batch_size: int = 8
    epochs: int = 100
    steps_per_epoch: int = 8
    lr_separation: float = 1e-3
    lr_vision_extra: float = 1e-4
    lr_vision_trunk: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_every: int = 0
    rcop_epochs: int = 25
    rcop_lr: float = 1e-3
    rcop_predictor_lr: float = 1e-3
    rcop_momentum: float = 0.9
    rcop_weight_decay: float = 1e-4
    proj_hidden: int = 128
    proj_dim: int = 64
    pred_hidden: int = 32

    def __post_init__(self):
        if self.n_sources < 2:
            raise ValueError("n_sources must be >= 2")
        if self.batch_size < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("invalid batch/epoch settings")
        lrs = (self.lr_separation, self.lr_vision_extra, self.lr_vision_trunk, self.rcop_lr, self.rcop_predictor_lr)
        if any(lr <= 0 for lr in lrs):
            raise ValueError("learning rates must be positive")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


# -- losses ----------------------------------------------------------------


def _as_stack(masks) -> torch.Tensor:
    if isinstance(masks, torch.Tensor):
        return masks
    vals = [m.values if isinstance(m, SeparationMask) else m for m in masks]
    return torch.stack([torch.as_tensor(np.asarray(v)) if not isinstance(v, torch.Tensor) else v for v in vals])


def mas_loss(predicted, target, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean over sources of the per-pixel binary cross-entropy.

    Accepts stacked tensors (leading axis indexes sources or items) or lists of
    masks. Predictions are clamped to ``[eps, 1 - eps]``.
    """
    pred = _as_stack(predicted)
    tgt = _as_stack(target).to(pred.dtype)
    if pred.shape != tgt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(tgt.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    bce = -(tgt * torch.log(p) + (1.0 - tgt) * torch.log1p(-p))
    return bce.flatten(1).mean(dim=1).mean()


def ncs_loss(z1: torch.Tensor, z2: torch.Tensor, predictor: nn.Module | None = None) -> torch.Tensor:
    """Negative cosine similarity between ``Pred(z1)`` and ``z2`` (batch mean for 2-D input)."""
    p = predictor(z1) if predictor is not None else z1
    p_norm = p.norm(dim=-1)
    z_norm = z2.norm(dim=-1)
    if bool((p_norm == 0).any()) or bool((z_norm == 0).any()):
        raise ValueError("negative cosine similarity is undefined for zero vectors")
    cos = (p * z2).sum(dim=-1) / (p_norm * z_norm)
    return -cos.mean()


def rcop_loss(z1: torch.Tensor, z2: torch.Tensor, predictor: nn.Module | None = None) -> torch.Tensor:
    """Symmetric co-prediction loss with the target branch detached."""
    return 0.5 * ncs_loss(z1, z2.detach(), predictor) + 0.5 * ncs_loss(z2, z1.detach(), predictor)


class RCoPHeads(nn.Module):
    def __init__(self, in_dim: int, proj_hidden: int = 128, proj_dim: int = 64, pred_hidden: int = 32):
        super().__init__()
        self.projector = nn.Sequential(
            nn.Linear(in_dim, proj_hidden), nn.BatchNorm1d(proj_hidden), nn.ReLU(), nn.Linear(proj_hidden, proj_dim)
        )
        self.predictor = nn.Sequential(
            nn.Linear(proj_dim, pred_hidden), nn.BatchNorm1d(pred_hidden), nn.ReLU(), nn.Linear(pred_hidden, proj_dim)
        )


def projection_std(z: torch.Tensor) -> float:
    """Mean per-dimension std of L2-normalised projections; ~0 means collapse."""
    return float(F.normalize(z.detach(), dim=1).std(dim=0).mean())


# -- batches ---------------------------------------------------------------


@dataclass
class MixtureBatch:
    """``B`` mixtures of ``N`` sources, flattened item-major (item = b * N + n)."""

    indices: np.ndarray  # (B, N) indices into the bank
    mix_waveforms: np.ndarray  # (B, samples)
    mix_complex: np.ndarray  # (B, linear_bins, frames)
    mix_warped: np.ndarray  # (B, warp_bins, frames)
    gt: np.ndarray  # (B, N, warp_bins, frames)

    @property
    def n_sources(self) -> int:
        return self.indices.shape[1]

    def spec_input(self, dtype=torch.float32) -> torch.Tensor:
        x = network_input(self.mix_warped).to(dtype)
        return x.repeat_interleave(self.n_sources, dim=0)

    def visual(self, bank: ClipBank, guidance: str, dtype=torch.float32) -> torch.Tensor:
        flat = self.indices.reshape(-1)
        if guidance == "class":
            return torch.as_tensor(bank.classes[flat], dtype=torch.long)
        return torch.as_tensor(bank.frames[flat]).to(dtype)

    def targets(self, dtype=torch.float32) -> torch.Tensor:
        g = torch.as_tensor(self.gt)
        return g.reshape(-1, 1, *g.shape[2:]).to(dtype)


def make_batch(bank: ClipBank, indices: np.ndarray) -> MixtureBatch:
    sc = bank.cfg.spectrogram
    indices = np.asarray(indices)
    waves = bank.waveforms[indices].mean(axis=1)
    comp = np.stack([stft(w, sc) for w in waves])
    warped = np.stack([warp_log_frequency(np.abs(c), sc) for c in comp])
    gt = (bank.magnitudes[indices] >= warped[:, None]).astype(np.float64)
    return MixtureBatch(indices, waves, comp, warped, gt)


def sample_batch(bank: ClipBank, n_sources: int, batch_size: int, rng: np.random.Generator) -> MixtureBatch:
    idx = np.array([bank.sample_indices(n_sources, rng) for _ in range(batch_size)])
    return make_batch(bank, idx)


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.pcnet.parameters()).dtype


def batch_loss(model: AVPCModel, bank: ClipBank, batch: MixtureBatch, T: int | None = None) -> torch.Tensor:
    dt = _dtype(model)
    mask, _, _ = model(batch.spec_input(dt), batch.visual(bank, model.guidance, dt), T=T)
    return mas_loss(mask, batch.targets(dt))


# -- MaS ---------------------------------------------------------------------


@dataclass
class TrainResult:
    model: AVPCModel
    losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def smoothed(self, window: int = 20) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def mas_optimizer(model: AVPCModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    groups = model.parameter_groups()
    lrs = {"separation": cfg.lr_separation, "vision_extra": cfg.lr_vision_extra, "vision_trunk": cfg.lr_vision_trunk}
    param_groups = [{"params": groups[k], "lr": lrs[k], "name": k} for k in lrs if groups[k]]
    return torch.optim.AdamW(param_groups, betas=cfg.betas, weight_decay=cfg.weight_decay)


def _dump_divergence(out_dir, step: int, batch: MixtureBatch, loss: float) -> None:
    if out_dir is None:
        return
    path = Path(out_dir) / f"diverged_step{step}.npz"
    np.savez(path, indices=batch.indices, mix_warped=batch.mix_warped, gt=batch.gt, loss=loss)
    log.error("non-finite loss at step %d; batch dumped to %s", step, path)


def write_loss_curve(losses: list[float], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
    return path


def train_mas(
    model: AVPCModel,
    bank: ClipBank,
    cfg: TrainConfig,
    out_dir=None,
    tag: str = "mas",
    spectrogram=None,
) -> TrainResult:
    """Mix-and-Separate training; deterministic for a fixed ``cfg.seed``."""
    if len(bank) == 0:
        raise ValueError("empty training bank")
    if cfg.n_sources > len(set(bank.classes.tolist())):
        raise ValueError(f"n_sources={cfg.n_sources} exceeds the number of classes in the bank")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = mas_optimizer(model, cfg)
    model.train()
    result = TrainResult(model)
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            batch = sample_batch(bank, cfg.n_sources, cfg.batch_size, rng)
            loss = batch_loss(model, bank, batch)
            value = float(loss.detach())
            if not math.isfinite(value):
                _dump_divergence(out_dir, step, batch, value)
                raise TrainingDivergedError(f"non-finite MaS loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            model.pcnet.clamp_steps_()
            result.losses.append(value)
            step += 1
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            p = save_checkpoint(
                Path(out_dir) / f"{tag}_epoch{epoch + 1:04d}.ckpt", model, seed=cfg.seed,
                meta={"stage": tag, "n_sources": cfg.n_sources, "epoch": epoch + 1}, spectrogram=spectrogram,
            )
            result.checkpoints.append(p)
        log.debug("%s epoch %d loss %.4f", tag, epoch + 1, np.mean(result.losses[-cfg.steps_per_epoch:]))
    model.eval()
    return result


# -- RCoP --------------------------------------------------------------------


@dataclass
class RCoPResult:
    model: AVPCModel
    heads: RCoPHeads
    losses: list[float] = field(default_factory=list)
    projection_stds: list[float] = field(default_factory=list)


def rcop_representations(model: AVPCModel, spec_in: torch.Tensor, visual) -> torch.Tensor:
    """Spatial mean of the top hidden layer after ``t_train`` cycles."""
    f = model.guide(visual)
    _, _, state = model.pcnet(spec_in, f, T=model.arch.t_train)
    return state.r[model.arch.n_layers].mean(dim=(2, 3))


def sample_rcop_batch(bank: ClipBank, batch_size: int, rng: np.random.Generator):
    """Anchor clip plus two distractors per row; returns the two mixture batches."""
    rows = np.array([bank.sample_indices(3, rng) for _ in range(batch_size)])
    return make_batch(bank, rows[:, [0, 1]]), make_batch(bank, rows[:, [0, 2]]), rows[:, 0]


def pretrain_rcop(model: AVPCModel, bank: ClipBank, cfg: TrainConfig, heads: RCoPHeads | None = None) -> RCoPResult:
    if len(bank) < 3 or len(set(bank.classes.tolist())) < 3:
        raise ValueError("RCoP needs at least three clips of distinct classes")
    rng = np.random.default_rng(cfg.seed + 7919)
    torch.manual_seed(cfg.seed)
    dt = _dtype(model)
    if heads is None:
        heads = RCoPHeads(model.arch.channels(model.arch.n_layers), cfg.proj_hidden, cfg.proj_dim, cfg.pred_hidden)
    heads.to(dt)
    backbone = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(
        [
            {"params": backbone + list(heads.projector.parameters()), "lr": cfg.rcop_lr},
            {"params": list(heads.predictor.parameters()), "lr": cfg.rcop_predictor_lr},
        ],
        momentum=cfg.rcop_momentum,
        weight_decay=cfg.rcop_weight_decay,
    )
    model.train()
    heads.train()
    result = RCoPResult(model, heads)
    for step in range(cfg.rcop_epochs * cfg.steps_per_epoch):
        b1, b2, anchors = sample_rcop_batch(bank, cfg.batch_size, rng)
        if model.guidance == "class":
            visual = torch.as_tensor(bank.classes[anchors], dtype=torch.long)
        else:
            visual = torch.as_tensor(bank.frames[anchors]).to(dt)
        # both mixtures share the anchor, so the same guidance serves both passes
        r1 = rcop_representations(model, network_input(b1.mix_warped).to(dt), visual)
        r2 = rcop_representations(model, network_input(b2.mix_warped).to(dt), visual)
        z1, z2 = heads.projector(r1), heads.projector(r2)
        loss = rcop_loss(z1, z2, heads.predictor)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite RCoP loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        model.pcnet.clamp_steps_()
        result.losses.append(value)
        result.projection_stds.append(projection_std(torch.cat([z1, z2])))
    model.eval()
    heads.eval()
    return result


@torch.no_grad()
def heldout_projection_std(model: AVPCModel, heads: RCoPHeads, bank: ClipBank, batch_size: int = 32, seed: int = 0) -> float:
    model.eval()
    heads.eval()
    dt = _dtype(model)
    b1, _, anchors = sample_rcop_batch(bank, batch_size, np.random.default_rng(seed))
    visual = (
        torch.as_tensor(bank.classes[anchors], dtype=torch.long)
        if model.guidance == "class"
        else torch.as_tensor(bank.frames[anchors]).to(dt)
    )
    z = heads.projector(rcop_representations(model, network_input(b1.mix_warped).to(dt), visual))
    return projection_std(z)


# -- curriculum --------------------------------------------------------------


def curriculum_train(
    model: AVPCModel, bank: ClipBank, cfg: TrainConfig, stages: list[int], out_dir=None, spectrogram=None
) -> list[tuple[int, Path | None, TrainResult]]:
    """Sequential MaS stages with increasing ``N``, each starting from the previous weights."""
    n_classes = len(set(bank.classes.tolist()))
    for n in stages:
        if n > n_classes:
            raise ValueError(f"stage N={n} exceeds the {n_classes} classes available")
    emitted = []
    for i, n in enumerate(stages):
        stage_cfg = replace(cfg, n_sources=n, seed=cfg.seed + 1000 * (i + 1))
        res = train_mas(model, bank, stage_cfg, tag=f"curriculum_n{n}", spectrogram=spectrogram)
        path = None
        if out_dir is not None:
            path = save_checkpoint(
                Path(out_dir) / f"curriculum_stage{i + 1}_n{n}.ckpt", model, seed=stage_cfg.seed,
                meta={"stage": f"curriculum_{i + 1}", "n_sources": n}, spectrogram=spectrogram,
            )
        emitted.append((n, path, res))
    return emitted


# -- gradient check ----------------------------------------------------------


def parameter_family(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "vision":
        if parts[1] == "table":
            return "class_table"
        return "vision_trunk" if parts[1] == "trunk" else "vision_extra"
    kind = parts[1]
    if kind in ("kernels", "ff_kernels"):
        return "kernels"
    if kind == "norms":
        return "norm_affine"
    return kind  # a, b_raw, input_norm, mask_head


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked: dict[str, int]
    max_abs_grad: float
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


class _KinkRecorder:
    """Records which side of zero every ReLU-family input falls on."""

    def __init__(self, model: nn.Module):
        self.signs: list[torch.Tensor] = []
        self.handles = [
            m.register_forward_hook(self._hook)
            for m in model.modules()
            if isinstance(m, (nn.ReLU, nn.LeakyReLU))
        ]

    def _hook(self, module, inputs, output):
        self.signs.append(inputs[0].detach() > 0)

    def take(self) -> list[torch.Tensor]:
        out, self.signs = self.signs, []
        return out

    def close(self) -> None:
        for h in self.handles:
            h.remove()


def _same_pattern(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def grad_check(
    model: AVPCModel,
    bank: ClipBank,
    batch: MixtureBatch,
    coords_per_family: int = 3,
    T: int = 3,
    h: float = 1e-5,
    seed: int = 0,
    rel_floor: float = 1e-6,
    max_tries: int = 20,
) -> GradCheckReport:
    """Central finite differences against autograd on sampled coordinates of every parameter family.

    The model must be in double precision. Normalisation uses batch
    statistics (training mode); running statistics are restored afterwards.
    Relative error is ``|g - g_fd| / max(|g|, |g_fd|, rel_floor)``.

    A coordinate whose ``+h`` or ``-h`` evaluation flips the sign of any
    (leaky) ReLU input straddles a kink, where the central difference is not
    a derivative estimate; such coordinates are redrawn and counted in
    ``GradCheckReport.skipped``.
    """
    if _dtype(model) != torch.float64:
        raise ValueError("grad_check requires a float64 model")
    buffers = {k: v.clone() for k, v in model.state_dict().items()}
    model.train()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]

    def loss_fn() -> torch.Tensor:
        return batch_loss(model, bank, batch, T=T)

    recorder = _KinkRecorder(model)
    try:
        model.zero_grad(set_to_none=True)
        loss_fn().backward()
        base_signs = recorder.take()
        grads = {n: p.grad.detach().clone() for n, p in named}
        max_abs = max(float(g.abs().max()) for g in grads.values())

        rng = np.random.default_rng(seed)
        families: dict[str, list[tuple[str, nn.Parameter]]] = {}
        for n, p in named:
            families.setdefault(parameter_family(n), []).append((n, p))
        errors: dict[str, float] = {}
        counts: dict[str, int] = {}
        skipped: dict[str, int] = {}
        with torch.no_grad():
            for fam, members in sorted(families.items()):
                sizes = np.array([p.numel() for _, p in members], dtype=float)
                worst, done, skips = 0.0, 0, 0
                while done < coords_per_family and skips < max_tries:
                    k = int(rng.choice(len(members), p=sizes / sizes.sum()))
                    n, p = members[k]
                    i = int(rng.integers(p.numel()))
                    flat = p.view(-1)
                    orig = flat[i].item()
                    flat[i] = orig + h
                    up = float(loss_fn())
                    up_signs = recorder.take()
                    flat[i] = orig - h
                    down = float(loss_fn())
                    down_signs = recorder.take()
                    flat[i] = orig
                    if not (_same_pattern(up_signs, base_signs) and _same_pattern(down_signs, base_signs)):
                        skips += 1
                        continue
                    fd = (up - down) / (2 * h)
                    g = float(grads[n].view(-1)[i])
                    worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), rel_floor))
                    done += 1
                errors[fam] = worst
                counts[fam] = done
                skipped[fam] = skips
    finally:
        recorder.close()
        model.load_state_dict(buffers)
        model.eval()
    return GradCheckReport(errors, counts, max_abs, skipped)
