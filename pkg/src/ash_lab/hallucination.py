"""Semantic conditioning of style features and the hallucination objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .nets import EncoderDecoder, Module, SegNet
from .stylization import adain, content_loss, orthogonal_noise, style_loss
from .tensor import DimensionError, Tensor

DEFAULT_EPS = 0.1
HINGE_MARGIN = 10.0


class AshNet(Module):
    """Probability map -> per-location scale/shift for the style features.

    The heads start with zero weights and biases 1 / -1, so the initial
    perturbation ``gamma * (f + 1) + beta`` is the identity.
    """

    def __init__(self, rng: np.random.Generator, n_classes: int = 6, feat_channels: int = 64, hidden: int = 32):
        super().__init__()
        self.n_classes = n_classes
        self.add_conv("embed", n_classes, hidden, 3, rng, pad=1)
        self.add_conv("gamma", hidden, feat_channels, 3, rng, pad=1)
        self.add_conv("beta", hidden, feat_channels, 3, rng, pad=1)
        self.reset_heads()

    def reset_heads(self) -> None:
        for head, b in (("gamma", 1.0), ("beta", -1.0)):
            w = self.params[f"{head}.weight"]
            w.data = np.zeros_like(w.data)
            self.params[f"{head}.bias"].data = np.full(w.shape[0], b)

    def forward(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        e = T.relu(self.conv("embed", pooled))
        return self.conv("gamma", e), self.conv("beta", e)


@dataclass
class StyleParams:
    gamma: Tensor
    beta: Tensor


def smooth_labels(prob, eps: float = DEFAULT_EPS) -> Tensor:
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing eps must be in [0, 1), got {eps}")
    prob = T.as_tensor(prob)
    return prob * (1.0 - eps) + eps / prob.shape[0]


def uniform_prob(n_classes: int, h: int, w: int) -> Tensor:
    return Tensor(np.full((n_classes, h, w), 1.0 / n_classes))


def ash_params(prob, ash: AshNet, style_shape: tuple[int, int, int], eps: float = DEFAULT_EPS) -> StyleParams:
    """Smooth the map, pool it to the style grid and run the heads."""
    prob = smooth_labels(prob, eps)
    c, h, w = style_shape
    _, ph, pw = prob.shape
    if ph % h or pw % w or ph // h != pw // w:
        raise DimensionError("ash_params", "spatial", (ph, pw), f"integer multiple of {(h, w)}")
    pooled = T.avg_pool(prob, ph // h) if ph != h else prob
    gamma, beta = ash(pooled)
    if gamma.shape != tuple(style_shape):
        raise DimensionError("ash_params", "channel", gamma.shape, style_shape)
    return StyleParams(gamma, beta)


def perturb_style(f_style, params: StyleParams) -> Tensor:
    f_style = T.as_tensor(f_style)
    if params.gamma.shape != f_style.shape or params.beta.shape != f_style.shape:
        raise DimensionError("perturb_style", "shape", params.gamma.shape, f_style.shape)
    return params.gamma * (f_style + 1.0) + params.beta


class Hallucination(NamedTuple):
    x_stylized: Tensor
    f_src: Tensor
    f_style: Tensor  # after noise and semantic perturbation
    prob_src: Tensor
    merged: Tensor
    params: StyleParams | None


def hallucinate(
    x_src,
    x_style,
    segnet: SegNet,
    ash: AshNet | None,
    encdec: EncoderDecoder,
    seed: int,
    *,
    noise: bool = True,
    eps: float = DEFAULT_EPS,
    uniform_semantics: bool = False,
    prob_src: Tensor | None = None,
    q: np.ndarray | None = None,
) -> Hallucination:
    """Stylize ``x_src`` with ``x_style``.

    ``ash=None`` skips semantic conditioning (plain AdaIN stylization).
    ``prob_src`` lets the caller reuse a segmentation forward pass; it is
    detached here so only the hallucination weights see this path.
    """
    with T.no_grad():
        f_src = encdec.encode(x_src)
        f_sty = encdec.encode(x_style)
        if noise or q is not None:
            f_sty = orthogonal_noise(f_sty, seed, q=q)
        if prob_src is None:
            prob_src = segnet(T.as_tensor(x_src))
    prob_src = prob_src.detach()

    params = None
    if ash is not None:
        cond = uniform_prob(*prob_src.shape) if uniform_semantics else prob_src
        params = ash_params(cond, ash, f_sty.shape, eps)
        f_sty = perturb_style(f_sty, params)
    merged = adain(f_src, f_sty)
    return Hallucination(encdec.decode(merged), f_src, f_sty, prob_src, merged, params)


def ash_loss(adv, f_src, f_style, merged, margin: float = HINGE_MARGIN) -> Tensor:
    """-adv + content(f_src, merged) + style(f_style, merged) + hinge(style(f_src, merged))

    The last term stands in for ``-style(f_src, merged)``, which is unbounded
    below; it stops rewarding once the style distance exceeds ``margin``.
    """
    adv = T.as_tensor(adv)
    hinge = T.relu(margin - style_loss(f_src, merged))
    return -adv + content_loss(f_src, merged) + style_loss(f_style, merged) + hinge
