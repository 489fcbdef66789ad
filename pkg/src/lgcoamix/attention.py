"""Superpixel pooling, single-head self-attention and top-t selection."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor, nn

from .core import SuperpixelMap

LN_EPS = 1e-5


def _labels_tensor(s_mix, device=None) -> Tensor:
    labels = s_mix.labels if isinstance(s_mix, SuperpixelMap) else s_mix
    return torch.as_tensor(np.asarray(labels), dtype=torch.long, device=device)


def superpixel_pool(zhat, s_mix) -> Tensor:
    """Average an ``H x W x D`` feature map over every superpixel -> ``L x D``."""
    zhat = torch.as_tensor(zhat)
    labels = _labels_tensor(s_mix, zhat.device)
    if zhat.dim() != 3 or zhat.shape[:2] != labels.shape:
        raise ValueError(f"feature map {tuple(zhat.shape)} does not match map {tuple(labels.shape)}")
    flat = labels.reshape(-1)
    n = int(flat.max()) + 1
    sums = zhat.new_zeros(n, zhat.shape[2]).index_add_(0, flat, zhat.reshape(-1, zhat.shape[2]))
    counts = torch.bincount(flat, minlength=n).to(zhat.dtype)
    return sums / counts[:, None]


def superpixel_pool_batch(zhat: Tensor, labels: Tensor, max_regions: int) -> tuple[Tensor, Tensor]:
    """Batched pooling of ``B x D x H x W`` features over ``B x H x W`` label maps.

    Returns ``(F, valid)`` with ``F`` of shape ``B x max_regions x D`` (rows of
    absent superpixels are zero) and a boolean ``valid`` mask.
    """
    b, d = zhat.shape[:2]
    offsets = torch.arange(b, device=labels.device)[:, None] * max_regions
    flat = (labels.reshape(b, -1) + offsets).reshape(-1)
    feats = zhat.permute(0, 2, 3, 1).reshape(-1, d)
    sums = zhat.new_zeros(b * max_regions, d).index_add_(0, flat, feats)
    counts = torch.bincount(flat, minlength=b * max_regions).to(zhat.dtype)
    valid = counts > 0
    pooled = sums / counts.clamp(min=1)[:, None]
    return pooled.view(b, max_regions, d), valid.view(b, max_regions)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def attention_weights(c: Tensor) -> Tensor:
    """Per-superpixel weight: sigmoid of the row sum of the attended vectors."""
    return torch.sigmoid(torch.as_tensor(c).sum(dim=-1))


class SuperpixelAttention(nn.Module):
    """``C = LayerNorm(F + softmax(Q K^T / sqrt(d)) V)`` with ``Q, K, V = F W``.

    The residual forces the projection width ``d`` to equal the input depth ``D``.
    """

    def __init__(self, dim: int, eps: float = LN_EPS, generator: torch.Generator | None = None,
                 dtype=torch.float32):
        super().__init__()
        self.dim = dim
        self.eps = eps
        scale = 1.0 / math.sqrt(dim)
        self.wq = nn.Parameter(torch.randn(dim, dim, generator=generator, dtype=dtype) * scale)
        self.wk = nn.Parameter(torch.randn(dim, dim, generator=generator, dtype=dtype) * scale)
        self.wv = nn.Parameter(torch.randn(dim, dim, generator=generator, dtype=dtype) * scale)
        self.gain = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, f: Tensor, valid: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """``f`` is ``L x D`` or ``B x L x D``; ``valid`` masks padded rows."""
        if f.shape[-1] != self.dim:
            raise ValueError(f"feature depth {f.shape[-1]} != attention width {self.dim}")
        q = f @ self.wq
        k = f @ self.wk
        v = f @ self.wv
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dim)
        if valid is not None:
            scores = scores.masked_fill(~valid[..., None, :], torch.finfo(scores.dtype).min)
        attn = torch.softmax(scores, dim=-1)
        c = layer_norm(f + attn @ v, self.gain, self.bias, self.eps)
        if valid is not None:
            c = c * valid[..., None]
        return c, attention_weights(c)

    def attention_matrix(self, f: Tensor) -> Tensor:
        scores = (f @ self.wq) @ (f @ self.wk).transpose(-1, -2) / math.sqrt(self.dim)
        return torch.softmax(scores, dim=-1)


def self_attention(f, params: SuperpixelAttention) -> tuple[Tensor, Tensor]:
    """Attend an ``L x D`` feature sequence; returns ``(C, w)``."""
    f = torch.as_tensor(f, dtype=params.wq.dtype)
    if not torch.isfinite(f).all():
        raise ValueError("non-finite superpixel features")
    return params(f)


def top_count(num_regions: int, t: float) -> int:
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t={t} outside (0, 1]")
    # the epsilon keeps e.g. 100 * 0.29 from flooring to 28
    return max(1, int(math.floor(num_regions * t + 1e-9)))


def select_top(w, t: float) -> Tensor:
    """Indices of the ``max(1, floor(L*t))`` largest weights, lower index first on ties."""
    w = torch.as_tensor(w)
    n = top_count(w.shape[-1], t)
    order = torch.sort(w.detach(), descending=True, stable=True).indices
    return order[:n]
