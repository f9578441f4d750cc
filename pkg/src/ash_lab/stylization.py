"""Adaptive instance normalization, orthogonal style noise and feature losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, matmul_channels, sqrt, square

STD_EPS = 1e-8


@dataclass
class ChannelStats:
    mean: Tensor  # (C,)
    std: Tensor  # (C,), population convention


def channel_stats(f: Tensor) -> ChannelStats:
    f = as_tensor(f)
    c = f.shape[0]
    mu = f.mean(axis=(1, 2), keepdims=True)
    var = square(f - mu).mean(axis=(1, 2), keepdims=True)
    return ChannelStats(mu.reshape(c), sqrt(var + STD_EPS).reshape(c))


def adain(f_c: Tensor, f_s: Tensor) -> Tensor:
    """Shift/scale each channel of ``f_c`` to the mean/std of ``f_s``."""
    f_c, f_s = as_tensor(f_c), as_tensor(f_s)
    if f_c.shape[0] != f_s.shape[0]:
        raise DimensionError("adain", "channel", f_s.shape[0], f_c.shape[0])
    c = f_c.shape[0]
    sc, ss = channel_stats(f_c), channel_stats(f_s)
    normed = (f_c - sc.mean.reshape(c, 1, 1)) / sc.std.reshape(c, 1, 1)
    return normed * ss.std.reshape(c, 1, 1) + ss.mean.reshape(c, 1, 1)


def orthogonal_matrix(c: int, seed: int) -> np.ndarray:
    """Haar-distributed C×C orthogonal matrix, a deterministic function of ``seed``."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((c, c)))
    # sign fix makes the factorization unique
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def orthogonal_noise(f_style: Tensor, seed: int, q: np.ndarray | None = None) -> Tensor:
    """Rotate the channel vectors of ``f_style`` by a random orthogonal matrix.

    ``q`` overrides the sampled matrix (tests pass the identity or a known
    rotation).
    """
    f_style = as_tensor(f_style)
    if q is None:
        q = orthogonal_matrix(f_style.shape[0], seed)
    return matmul_channels(Tensor(q), f_style)


def content_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("content_loss", "shape", b.shape, a.shape)
    return square(a - b).mean()


def style_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise DimensionError("style_loss", "channel", b.shape[0], a.shape[0])
    sa, sb = channel_stats(a), channel_stats(b)
    return square(sa.mean - sb.mean).mean() + square(sa.std - sb.std).mean()


def content_style_losses(f_src: Tensor, f_sty: Tensor, merged: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """(content(f_src, merged), style(f_sty, merged), style(f_src, merged))"""
    return content_loss(f_src, merged), style_loss(f_sty, merged), style_loss(f_src, merged)
