"""Relevance propagation (z-plus rule) and the relevance-guided loss.

The backward redistribution uses only positive contributions: for a unit k
with inputs x_j and weights w_jk,

    R_j = sum_k (x_j w_jk)+ / (sum_j (x_j w_jk)+ + eps) * R_k.

Biases take no part in the redistribution (the network keeps them <= 0, so
their positive part vanishes anyway); ReLU steps pass relevance through and
flatten steps reshape it. Everything is written with differentiable torch
ops so the propagation can sit inside the training graph for the
relevance-guided loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .errors import ConfigError, GridMismatchError
from .network import ConvNet3D
from .volume import Volume3D

__all__ = [
    "RelevanceConfig",
    "Heatmap",
    "lrp_layer",
    "lrp_propagate",
    "lrp_relevance_in_graph",
    "lrp_heatmap",
    "relevance_guided_loss",
    "in_mask_fraction",
]


@dataclass(frozen=True)
class RelevanceConfig:
    alpha: float = 1.0
    beta: float = 0.0
    epsilon: float = 1e-9
    output_init: str = "one_hot_unit"  # or "logit_value"

    def __post_init__(self):
        if abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise ConfigError("alpha - beta must equal 1")
        if (self.alpha, self.beta) != (1.0, 0.0):
            raise ConfigError("only the z-plus rule (alpha=1, beta=0) is implemented")
        if self.output_init not in ("one_hot_unit", "logit_value"):
            raise ConfigError(f"unknown output_init {self.output_init!r}")


@dataclass(frozen=True)
class Heatmap:
    """Voxelwise relevance for one scan and target class."""

    relevance: Volume3D
    scan_id: str
    variant: str
    target_class: int
    dead: bool = False  # all-zero propagation result


def _split_signs(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return x.clamp(min=0.0), x.clamp(max=0.0)


def _zplus_dense(x: torch.Tensor, weight: torch.Tensor, rel: torch.Tensor,
                 eps: float) -> torch.Tensor:
    wp, wn = _split_signs(weight)
    xp, xn = _split_signs(x)
    z = xp @ wp.t() + xn @ wn.t()
    s = rel / (z + eps)
    return xp * (s @ wp) + xn * (s @ wn)


def _zplus_conv(x: torch.Tensor, conv: torch.nn.Conv3d, rel: torch.Tensor,
                eps: float) -> torch.Tensor:
    wp, wn = _split_signs(conv.weight)
    xp, xn = _split_signs(x)
    stride, padding = conv.stride, conv.padding
    z = F.conv3d(xp, wp, None, stride, padding) + F.conv3d(xn, wn, None, stride, padding)
    s = rel / (z + eps)
    out_pad = tuple(
        x.shape[2 + a]
        - ((rel.shape[2 + a] - 1) * stride[a] - 2 * padding[a] + conv.kernel_size[a])
        for a in range(3)
    )
    rp = F.conv_transpose3d(s, wp, None, stride, padding, output_padding=out_pad)
    rn = F.conv_transpose3d(s, wn, None, stride, padding, output_padding=out_pad)
    return xp * rp + xn * rn


def lrp_layer(kind: str, module, x: torch.Tensor, rel: torch.Tensor,
              config: RelevanceConfig) -> torch.Tensor:
    """Propagate relevance through one step, given its cached input."""
    if kind == "relu":
        return rel
    if kind == "flatten":
        return rel.reshape(x.shape)
    if kind == "dense":
        if rel.shape[1] != module.weight.shape[0]:
            raise GridMismatchError(
                f"relevance width {rel.shape[1]} != layer outputs {module.weight.shape[0]}"
            )
        return _zplus_dense(x, module.weight, rel, config.epsilon)
    if kind in ("conv3", "downconv3"):
        return _zplus_conv(x, module, rel, config.epsilon)
    raise ConfigError(f"unknown step kind {kind}")


def lrp_propagate(net: ConvNet3D, cache: list, rel_out: torch.Tensor,
                  config: RelevanceConfig) -> torch.Tensor:
    """Walk the step list backwards from logits to the input grid."""
    rel = rel_out
    for idx in reversed(range(len(net.kinds))):
        rel = lrp_layer(net.kinds[idx], net.steps[idx], cache[idx], rel, config)
    return rel


def _initial_relevance(logits: torch.Tensor, targets: torch.Tensor,
                       config: RelevanceConfig) -> torch.Tensor:
    rel = torch.zeros_like(logits)
    rows = torch.arange(logits.shape[0])
    if config.output_init == "one_hot_unit":
        rel[rows, targets] = 1.0
    else:
        rel[rows, targets] = logits[rows, targets]
    return rel


def lrp_relevance_in_graph(net: ConvNet3D, cache: list, logits: torch.Tensor,
                           targets: torch.Tensor,
                           config: RelevanceConfig) -> torch.Tensor:
    """Differentiable input relevance for a batch, one target per sample."""
    return lrp_propagate(net, cache, _initial_relevance(logits, targets, config), config)


def lrp_heatmap(net: ConvNet3D, volume: np.ndarray, target_class: int,
                config: RelevanceConfig | None = None, scan_id: str = "",
                variant: str = "", spacing=(1.0, 1.0, 1.0), affine=None) -> Heatmap:
    """Heatmap for a single volume (nx, ny, nz) outside any training graph."""
    config = config or RelevanceConfig()
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.ascontiguousarray(volume), dtype=dtype)[None, None]
    with torch.no_grad():
        cache: list = []
        logits = net(x, cache=cache)
        rel = lrp_propagate(
            net, cache,
            _initial_relevance(logits, torch.tensor([target_class]), config),
            config,
        )
    data = rel[0, 0].numpy().astype(np.float64)
    dead = not bool(np.any(data != 0.0))
    return Heatmap(
        relevance=Volume3D(data=data, spacing=spacing, affine=affine),
        scan_id=scan_id,
        variant=variant,
        target_class=int(target_class),
        dead=dead,
    )


def relevance_guided_loss(relevance: torch.Tensor, guidance_mask: torch.Tensor,
                          eps: float = 1e-9) -> torch.Tensor:
    """Fraction of positive relevance falling outside the focus region.

    0 when all positive relevance is inside the mask, 1 when all of it is
    outside. Batched inputs average the per-sample fractions.
    """
    if relevance.shape != guidance_mask.shape:
        raise GridMismatchError(
            f"relevance shape {tuple(relevance.shape)} != mask shape {tuple(guidance_mask.shape)}"
        )
    rpos = relevance.clamp(min=0.0)
    if relevance.ndim <= 3:
        outside = ((1.0 - guidance_mask) * rpos).sum()
        return outside / (rpos.sum() + eps)
    dims = tuple(range(1, relevance.ndim))
    outside = ((1.0 - guidance_mask) * rpos).sum(dim=dims)
    return (outside / (rpos.sum(dim=dims) + eps)).mean()


def in_mask_fraction(heatmap: Volume3D, mask: Volume3D) -> float:
    """Share of positive relevance inside the mask (numpy analysis helper)."""
    if not heatmap.same_grid(mask):
        raise GridMismatchError("heatmap and mask grids differ")
    rpos = np.clip(heatmap.data, 0.0, None)
    total = rpos.sum()
    if total <= 0:
        return 0.0
    return float((rpos * (mask.data > 0.5)).sum() / total)
