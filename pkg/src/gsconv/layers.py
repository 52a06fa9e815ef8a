"""Differentiable layers with hand-written backward passes.

Every forward is a pure function of its input and parameters; every backward
takes the same input plus the upstream gradient and recomputes whatever it
needs, so callers only have to keep layer inputs around.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import as_volume

KERNEL = 3
OFFSETS = [(i, j, k) for i in range(KERNEL) for j in range(KERNEL) for k in range(KERNEL)]


@dataclass
class PointwiseConvParams:
    weight: np.ndarray  # (C_out, C_in)
    bias: np.ndarray  # (C_out,)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class Conv3Params:
    weight: np.ndarray  # (C_out, C_in, 3, 3, 3)
    bias: np.ndarray

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class NormParams:
    scale: np.ndarray
    shift: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


def init_pointwise(rng: np.random.Generator, c_in: int, c_out: int) -> PointwiseConvParams:
    bound = np.sqrt(6.0 / c_in)
    return PointwiseConvParams(rng.uniform(-bound, bound, (c_out, c_in)), np.zeros(c_out))


def init_conv3(rng: np.random.Generator, c_in: int, c_out: int) -> Conv3Params:
    bound = np.sqrt(6.0 / (c_in * KERNEL**3))
    w = rng.uniform(-bound, bound, (c_out, c_in, KERNEL, KERNEL, KERNEL))
    return Conv3Params(w, np.zeros(c_out))


def init_norm(channels: int, eps: float = 1e-5) -> NormParams:
    return NormParams(np.ones(channels), np.zeros(channels), eps)


def _check_channels(F: np.ndarray, c: int, what: str) -> None:
    if F.shape[-1] != c:
        raise ShapeError(f"{what}: input has {F.shape[-1]} channels, expected {c}")


def _mm(F: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Contract the channel axis of a volume with matrix ``M`` as one 2-D GEMM."""
    return (F.reshape(-1, F.shape[-1]) @ M).reshape(F.shape[:-1] + (M.shape[1],))


def _check_grad(F: np.ndarray, grad_out: np.ndarray, c_out: int) -> None:
    if grad_out.shape != F.shape[:-1] + (c_out,):
        raise ShapeError(f"grad shape {grad_out.shape} does not match output {F.shape[:-1] + (c_out,)}")


# pointwise -------------------------------------------------------------------


def pointwise_forward(F, params: PointwiseConvParams) -> np.ndarray:
    F = as_volume(F)
    _check_channels(F, params.c_in, "pointwise conv")
    out = _mm(F, params.weight.T)
    out += params.bias
    return out


def pointwise_backward(F, params: PointwiseConvParams, grad_out):
    F = as_volume(F)
    _check_channels(F, params.c_in, "pointwise conv")
    _check_grad(F, grad_out, params.c_out)
    g2 = grad_out.reshape(-1, params.c_out)
    grad_w = g2.T @ F.reshape(-1, params.c_in)
    grad_b = g2.sum(axis=0)
    grad_F = _mm(grad_out, params.weight)
    return grad_F, grad_w, grad_b


# 3x3x3 -----------------------------------------------------------------------


def _pad1(F: np.ndarray) -> np.ndarray:
    return np.pad(F, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))


def conv3_forward(F, params: Conv3Params) -> np.ndarray:
    """Stride-1, zero-padded 3x3x3 cross-correlation; spatial dims are kept."""
    F = as_volume(F)
    _check_channels(F, params.c_in, "conv3")
    _, D, H, W, _ = F.shape
    xp = _pad1(F)
    out = np.broadcast_to(params.bias, F.shape[:-1] + (params.c_out,)).copy()
    for i, j, k in OFFSETS:
        out += _mm(xp[:, i : i + D, j : j + H, k : k + W, :], params.weight[:, :, i, j, k].T)
    return out


def conv3_backward(F, params: Conv3Params, grad_out):
    F = as_volume(F)
    _check_channels(F, params.c_in, "conv3")
    _check_grad(F, grad_out, params.c_out)
    _, D, H, W, _ = F.shape
    xp = _pad1(F)
    gxp = np.zeros_like(xp)
    grad_w = np.zeros_like(params.weight)
    g2 = grad_out.reshape(-1, params.c_out)
    for i, j, k in OFFSETS:
        win = xp[:, i : i + D, j : j + H, k : k + W, :]
        grad_w[:, :, i, j, k] = g2.T @ win.reshape(-1, params.c_in)
        gxp[:, i : i + D, j : j + H, k : k + W, :] += _mm(grad_out, params.weight[:, :, i, j, k])
    grad_b = g2.sum(axis=0)
    return gxp[:, 1:-1, 1:-1, 1:-1, :], grad_w, grad_b


# normalisation -----------------------------------------------------------------


def _spatial_sum(X: np.ndarray) -> np.ndarray:
    """Sum an (N, S, C) array over S as a GEMV; returns (N, C)."""
    return np.ones(X.shape[1]) @ X


def norm_stats(F: np.ndarray, eps: float):
    """Standardised input and 1/std, shaped (N, S, C) and (N, 1, C)."""
    N, C = F.shape[0], F.shape[-1]
    X = F.reshape(N, -1, C)
    S = X.shape[1]
    xhat = X - (_spatial_sum(X) / S)[:, None, :]
    var = _spatial_sum(xhat * xhat) / S
    inv_std = (1.0 / np.sqrt(var + eps))[:, None, :]
    xhat *= inv_std
    return xhat, inv_std


def norm_forward(F, params: NormParams, return_stats: bool = False):
    """Per-sample, per-channel standardisation over D*H*W, then scale and shift."""
    F = as_volume(F)
    _check_channels(F, params.scale.shape[0], "norm")
    stats = norm_stats(F, params.eps)
    out = (stats[0] * params.scale + params.shift).reshape(F.shape)
    return (out, stats) if return_stats else out


def norm_backward(F, params: NormParams, grad_out, stats=None):
    """``stats`` may carry :func:`norm_stats` output from the forward pass."""
    F = np.asarray(F)
    _check_channels(F, params.scale.shape[0], "norm")
    _check_grad(F, grad_out, params.scale.shape[0])
    xhat, inv_std = stats if stats is not None else norm_stats(as_volume(F), params.eps)
    N, C = F.shape[0], F.shape[-1]
    G = grad_out.reshape(N, -1, C)
    S = G.shape[1]
    gxh_sum = _spatial_sum(G * xhat)
    g_sum = _spatial_sum(G)
    grad_scale = gxh_sum.sum(axis=0)
    grad_shift = g_sum.sum(axis=0)
    # mean(g*scale) and mean(g*scale*xhat) per (n, c)
    m1 = (g_sum * params.scale / S)[:, None, :]
    m2 = (gxh_sum * params.scale / S)[:, None, :]
    grad_F = (G * params.scale - m1 - xhat * m2) * inv_std
    return grad_F.reshape(F.shape), grad_scale, grad_shift


# activation ------------------------------------------------------------------


def relu_forward(F) -> np.ndarray:
    return np.maximum(F, 0.0)


def relu_backward(F, grad_out) -> np.ndarray:
    if np.shape(F) != np.shape(grad_out):
        raise ShapeError(f"relu grad shape {np.shape(grad_out)} != input shape {np.shape(F)}")
    return grad_out * (F > 0)


# resampling ------------------------------------------------------------------


def avgpool2_forward(F) -> np.ndarray:
    F = as_volume(F)
    N, D, H, W, C = F.shape
    if D % 2 or H % 2 or W % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {(D, H, W)}")
    return F.reshape(N, D // 2, 2, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4, 6))


def avgpool2_backward(F_shape, grad_out) -> np.ndarray:
    N, D, H, W, C = F_shape
    if grad_out.shape != (N, D // 2, H // 2, W // 2, C):
        raise ShapeError(f"avgpool2 grad shape {grad_out.shape} does not match input {tuple(F_shape)}")
    return upsample2_forward(grad_out) / 8.0


def upsample2_forward(F) -> np.ndarray:
    """Nearest-neighbour 2x along D, H and W."""
    F = np.asarray(F, dtype=np.float64)
    N, D, H, W, C = F.shape
    out = np.broadcast_to(F[:, :, None, :, None, :, None, :], (N, D, 2, H, 2, W, 2, C))
    return out.reshape(N, 2 * D, 2 * H, 2 * W, C)


def upsample2_backward(grad_out) -> np.ndarray:
    N, D, H, W, C = grad_out.shape
    if D % 2 or H % 2 or W % 2:
        raise ShapeError(f"upsample2 grad must have even spatial dims, got {(D, H, W)}")
    return grad_out.reshape(N, D // 2, 2, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4, 6))
