"""Straight-line numpy reference for linear-mode inference.

Convolutions are written out tap by tap (stride 2, padding 1, 4x4 kernels)
so nothing here shares code with the torch implementation.
"""
import numpy as np


def conv_down(x, w):
    """x: (B, C_in, H, W); w: (C_out, C_in, 4, 4) -> (B, C_out, H/2, W/2)."""
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2))
    xp[:, :, 1:-1, 1:-1] = x
    h, ww = H // 2, W // 2
    out = np.zeros((B, w.shape[0], h, ww))
    for ki in range(4):
        for kj in range(4):
            patch = xp[:, :, ki : ki + 2 * h : 2, kj : kj + 2 * ww : 2]
            out += np.einsum("oc,bchw->bohw", w[:, :, ki, kj], patch)
    return out


def conv_up(y, w):
    """Scatter form of the transposed convolution: y (B, C_out, h, w) -> (B, C_in, 2h, 2w)."""
    B, O, h, ww = y.shape
    C = w.shape[1]
    out = np.zeros((B, C, 2 * h + 2, 2 * ww + 2))
    for ki in range(4):
        for kj in range(4):
            out[:, :, ki : ki + 2 * h : 2, kj : kj + 2 * ww : 2] += np.einsum("oc,bohw->bchw", w[:, :, ki, kj], y)
    return out[:, :, 1:-1, 1:-1]


def linear_trajectory(S, f, K, a, b, T):
    """Per-cycle states for t = 0..T.

    K[l] for l = 1..L+1 maps layer l down to l-1; a[l], b[l] are per-channel
    arrays for l = 1..L (index 0 unused).
    """
    L = len(K) - 2
    init = [None] * (L + 2)
    init[L + 1] = S
    for l in range(L, 0, -1):
        init[l] = conv_down(init[l + 1], K[l + 1])
    init[0] = conv_down(init[1], K[1])

    r = [None] * (L + 2)
    r[0] = f
    r[L + 1] = S
    p = [init[l] for l in range(L + 1)]
    e = [None] * L
    for l in range(1, L + 1):
        e[l - 1] = r[l - 1] - init[l - 1]
        r[l] = init[l] + a[l][None, :, None, None] * conv_up(e[l - 1], K[l])
    states = [{"r": list(r), "p": list(p), "e": list(e)}]

    for _ in range(T):
        for l in range(L, 0, -1):
            p[l] = conv_down(r[l + 1], K[l + 1])
            bl = b[l][None, :, None, None]
            r[l] = (1 - bl) * r[l] + bl * p[l]
        p[0] = conv_down(r[1], K[1])
        for l in range(1, L + 1):
            e[l - 1] = r[l - 1] - p[l - 1]
            r[l] = r[l] + a[l][None, :, None, None] * conv_up(e[l - 1], K[l])
        states.append({"r": list(r), "p": list(p), "e": list(e)})
    return init, states


def params_from_net(net):
    L = net.n_layers
    K = [None] + [k.detach().numpy().astype(np.float64) for k in net.kernels]
    a = [None] + [x.detach().numpy().astype(np.float64) for x in net.a]
    b = [None] + [net.b_value(l).detach().numpy().reshape(-1).astype(np.float64) for l in range(1, L + 1)]
    return K, a, b
