"""Predictive-coding separation network.

Layer 0 holds the visual feature ``f_n``, layer ``L + 1`` the normalised
mixture spectrogram. One kernel per adjacent layer pair serves both as the
strided convolution that predicts the lower layer and, transposed, as the
path that carries the lower layer's prediction error back up.

Inference order follows the mask-prediction loop exactly: a top-down
initialisation, one bottom-up error sweep at ``t = 0``, then ``T`` cycles of
(feedback sweep ``L..1``, feedforward sweep ``1..L``). Sweeps are sequential
and in place, so each layer reads the freshest value of its neighbour.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

PHASES = ("init", "feedback", "feedforward")


@dataclass(frozen=True)
class PCNetArch:
    spec_side: int = 64
    feature_side: int = 2
    feature_channels: int = 16
    widths: tuple[int, ...] | None = None
    kernel_size: int = 4
    slope: float = 0.2
    t_train: int = 5
    t_test: int = 5
    norm_steps: int | None = None
    linear_diagnostic: bool = False
    untie_weights: bool = False
    input_channels: int = 1

    def __post_init__(self):
        if self.spec_side & (self.spec_side - 1) or self.feature_side & (self.feature_side - 1):
            raise ValueError("spec_side and feature_side must be powers of two")
        if self.n_layers < 1:
            raise ValueError(
                f"spec_side={self.spec_side} is too small for feature_side={self.feature_side}"
            )
        if self.widths is not None and len(self.widths) != self.n_layers:
            raise ValueError(f"widths must list {self.n_layers} layer widths")
        if self.kernel_size != 4:
            # stride 2 / padding 1 only halves exactly with 4x4 kernels
            raise ValueError("only 4x4 kernels are supported")
        if self.t_train < 0 or self.t_test < 0:
            raise ValueError("cycle counts must be nonnegative")

    @property
    def n_layers(self) -> int:
        return int(round(math.log2(self.spec_side) - math.log2(self.feature_side))) - 1

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return tuple(self.widths) if self.widths is not None else (32,) * self.n_layers

    @property
    def capacity(self) -> int:
        return self.norm_steps if self.norm_steps is not None else max(self.t_train, self.t_test)

    def channels(self, l: int) -> int:
        if l == 0:
            return self.feature_channels
        if l == self.n_layers + 1:
            return self.input_channels
        return self.layer_widths[l - 1]

    def side(self, l: int) -> int:
        return self.spec_side // 2 ** (self.n_layers + 1 - l)


class RecurrentBatchNorm(nn.Module):
    """Batch norm with running statistics per (phase, time step) and one shared affine pair."""

    def __init__(self, num_features: int, steps: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.steps = steps
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(len(PHASES), steps + 1, num_features))
        self.register_buffer("running_var", torch.ones(len(PHASES), steps + 1, num_features))

    def forward(self, x: torch.Tensor, phase: str, step: int) -> torch.Tensor:
        if step > self.steps:
            raise ValueError(f"time step {step} exceeds normalisation capacity {self.steps}")
        p = PHASES.index(phase)
        return F.batch_norm(
            x,
            self.running_mean[p, step],
            self.running_var[p, step],
            self.weight,
            self.bias,
            self.training,
            self.momentum,
            self.eps,
        )


@dataclass
class PCState:
    """Representations ``r[0..L+1]``, predictions ``p[0..L]`` and errors ``e[0..L-1]``.

    ``r[0]`` is the visual feature and ``r[L+1]`` the normalised mixture; both
    stay fixed. At ``t = 0`` the predictions are the top-down initial values.
    """

    r: list
    p: list
    e: list
    t: int = 0

    def snapshot(self) -> dict:
        def grab(xs):
            return [None if x is None else x.detach().clone() for x in xs]

        return {"t": self.t, "r": grab(self.r), "p": grab(self.p), "e": grab(self.e)}


@dataclass
class InferenceTrace:
    masks: list = field(default_factory=list)
    e0_norms: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.masks)


class PCNet(nn.Module):
    def __init__(self, arch: PCNetArch):
        super().__init__()
        self.arch = arch
        L = arch.n_layers
        k = arch.kernel_size
        self.kernels = nn.ParameterList(
            [nn.Parameter(torch.empty(arch.channels(l - 1), arch.channels(l), k, k)) for l in range(1, L + 2)]
        )
        if arch.untie_weights:
            self.ff_kernels = nn.ParameterList(
                [nn.Parameter(torch.empty(arch.channels(l - 1), arch.channels(l), k, k)) for l in range(1, L + 1)]
            )
        else:
            self.ff_kernels = None
        self.a = nn.ParameterList([nn.Parameter(torch.ones(arch.channels(l))) for l in range(1, L + 1)])
        self.b_raw = nn.ParameterList([nn.Parameter(torch.zeros(arch.channels(l))) for l in range(1, L + 1)])
        self.norms = nn.ModuleList([RecurrentBatchNorm(arch.channels(l), arch.capacity) for l in range(1, L + 1)])
        self.input_norm = nn.BatchNorm2d(arch.input_channels)
        self.mask_head = nn.ConvTranspose2d(arch.channels(L), 1, k, stride=2, padding=1)
        self.lrelu = nn.LeakyReLU(arch.slope)
        # diagnostic override for the decoded step sizes b_l (may sit on the 0/1 endpoints)
        self.fixed_b: list[torch.Tensor] | None = None
        self.reset_parameters()

    def reset_parameters(self) -> None:
        kernels = list(self.kernels) + (list(self.ff_kernels) if self.ff_kernels is not None else [])
        for w in kernels:
            nn.init.kaiming_uniform_(w, a=math.sqrt(5))

    @property
    def n_layers(self) -> int:
        return self.arch.n_layers

    # -- primitives -------------------------------------------------------

    def conv(self, l: int, x: torch.Tensor) -> torch.Tensor:
        """Layer ``l`` -> layer ``l - 1`` (halves the spatial size)."""
        return F.conv2d(x, self.kernels[l - 1], stride=2, padding=1)

    def transconv(self, l: int, y: torch.Tensor) -> torch.Tensor:
        """Layer ``l - 1`` -> layer ``l``; the adjoint of :meth:`conv` when weights are tied."""
        w = self.ff_kernels[l - 1] if self.ff_kernels is not None else self.kernels[l - 1]
        return F.conv_transpose2d(y, w, stride=2, padding=1)

    def act(self, x: torch.Tensor) -> torch.Tensor:
        if self.arch.linear_diagnostic:
            return x
        return self.lrelu(x)

    def norm(self, l: int, x: torch.Tensor, phase: str, step: int) -> torch.Tensor:
        if self.arch.linear_diagnostic:
            return x
        return self.norms[l - 1](x, phase, step)

    def a_value(self, l: int) -> torch.Tensor:
        return self.a[l - 1].view(1, -1, 1, 1)

    def b_value(self, l: int) -> torch.Tensor:
        if self.fixed_b is not None:
            b = torch.as_tensor(self.fixed_b[l - 1], dtype=self.b_raw[l - 1].dtype)
            return b.expand(self.arch.channels(l)).reshape(1, -1, 1, 1)
        return torch.sigmoid(self.b_raw[l - 1]).view(1, -1, 1, 1)

    def clamp_steps_(self) -> None:
        """Project the feedforward step sizes back onto ``a >= 0``."""
        with torch.no_grad():
            for a in self.a:
                a.clamp_(min=0.0)

    # -- inference stages -------------------------------------------------

    def _check_input(self, s_mix: torch.Tensor, f: torch.Tensor | None = None) -> None:
        arch = self.arch
        want = (arch.input_channels, arch.spec_side, arch.spec_side)
        if s_mix.dim() != 4 or tuple(s_mix.shape[1:]) != want:
            raise ValueError(f"mixture input must have shape (B, {want}), got {tuple(s_mix.shape)}")
        if f is not None:
            want_f = (arch.feature_channels, arch.feature_side, arch.feature_side)
            if tuple(f.shape[1:]) != want_f or f.shape[0] != s_mix.shape[0]:
                raise ValueError(f"visual feature must have shape (B, {want_f}), got {tuple(f.shape)}")

    def init_topdown(self, s_mix: torch.Tensor) -> tuple[torch.Tensor, list]:
        """Return ``(r_top, inits)`` with ``inits[l]`` = initial ``r_l`` for ``l = 0..L``."""
        self._check_input(s_mix)
        L = self.n_layers
        top = s_mix if self.arch.linear_diagnostic else self.input_norm(s_mix)
        inits: list = [None] * (L + 1)
        x = top
        for l in range(L, 0, -1):
            x = self.act(self.norm(l, self.conv(l + 1, x), "init", 0))
            inits[l] = x
        # bottom prediction of the visual feature: no normalisation
        inits[0] = self.act(self.conv(1, inits[1]))
        return top, inits

    def initial_state(self, top: torch.Tensor, inits: list, f: torch.Tensor) -> PCState:
        L = self.n_layers
        if any(x is None for x in inits):
            raise ValueError("top-down initial representations are missing")
        r = [f] + list(inits[1:]) + [top]
        return PCState(r=r, p=list(inits), e=[None] * L, t=0)

    def feedback_sweep(self, state: PCState, step: int) -> PCState:
        L = self.n_layers
        for l in range(L, 0, -1):
            state.p[l] = self.conv(l + 1, state.r[l + 1])
            b = self.b_value(l)
            state.r[l] = self.act(self.norm(l, (1 - b) * state.r[l] + b * state.p[l], "feedback", step))
        state.p[0] = self.act(self.conv(1, state.r[1]))
        return state

    def feedforward_sweep(self, state: PCState, step: int) -> PCState:
        L = self.n_layers
        for l in range(1, L + 1):
            state.e[l - 1] = state.r[l - 1] - state.p[l - 1]
            upd = state.r[l] + self.a_value(l) * self.transconv(l, state.e[l - 1])
            state.r[l] = self.act(self.norm(l, upd, "feedforward", step))
        state.t = step
        return state

    def initial_feedforward(self, top: torch.Tensor, inits: list, f: torch.Tensor) -> PCState:
        """Bottom-up error sweep that turns the top-down inits into the ``t = 0`` state."""
        return self.feedforward_sweep(self.initial_state(top, inits, f), 0)

    def cycle(self, state: PCState) -> PCState:
        t = state.t + 1
        self.feedback_sweep(state, t)
        return self.feedforward_sweep(state, t)

    def mask_logits(self, r_top_layer: torch.Tensor) -> torch.Tensor:
        return self.mask_head(r_top_layer)

    def predict_mask(self, r_top_layer: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mask_logits(r_top_layer))

    def forward(
        self,
        s_mix: torch.Tensor,
        f: torch.Tensor,
        T: int | None = None,
        trace: bool = False,
        record_states: bool = False,
    ) -> tuple[torch.Tensor, InferenceTrace | None, PCState]:
        """Run ``T`` cycles; return ``(mask, trace, final_state)``."""
        if T is None:
            T = self.arch.t_train if self.training else self.arch.t_test
        if T < 0:
            raise ValueError("T must be nonnegative")
        if not self.arch.linear_diagnostic and T > self.arch.capacity:
            raise ValueError(f"T={T} exceeds normalisation capacity {self.arch.capacity}")
        self._check_input(s_mix, f)
        top, inits = self.init_topdown(s_mix)
        state = self.initial_feedforward(top, inits, f)
        tr = InferenceTrace() if (trace or record_states) else None
        L = self.n_layers
        for t in range(T + 1):
            if t > 0:
                self.cycle(state)
            if tr is not None:
                tr.masks.append(self.predict_mask(state.r[L]).detach())
                tr.e0_norms.append(state.e[0].detach().flatten(1).norm(dim=1))
                tr.energies.append([state.r[l].detach().flatten(1).norm(dim=1) for l in range(1, L + 1)])
                if record_states:
                    tr.states.append(state.snapshot())
        return self.predict_mask(state.r[L]), tr, state


def run_inference(
    net: PCNet, s_mix: torch.Tensor, f: torch.Tensor, T: int | None = None, record_states: bool = False
):
    """Mask and per-cycle trace for one batch."""
    mask, tr, _ = net(s_mix, f, T=T, trace=True, record_states=record_states)
    return mask, tr
