"""Global, local and superpixel contrastive losses plus a gradient checker."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import LossConfig


class LinearHead(nn.Linear):
    """Fully connected classifier tagged as the ``local`` or ``global`` head."""

    def __init__(self, in_features: int, num_classes: int, role: str, dtype=torch.float32):
        if role not in ("local", "global"):
            raise ValueError(f"unknown head role {role!r}")
        super().__init__(in_features, num_classes, dtype=dtype)
        self.role = role


def cross_entropy_soft(logits: Tensor, target: Tensor) -> Tensor:
    """``-sum(target * log_softmax(logits))`` over the last axis."""
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target, dtype=logits.dtype)
    return -(target * F.log_softmax(logits, dim=-1)).sum(dim=-1)


def mixed_targets(y1: Tensor, y2: Tensor, lam: Tensor) -> Tensor:
    lam = torch.as_tensor(lam, dtype=y1.dtype).detach()
    if torch.any((lam < 0) | (lam > 1)):
        raise ValueError("mixing ratios must lie in [0, 1]")
    return (1 - lam)[..., None] * y1 + lam[..., None] * y2


def global_loss(logits: Tensor, y1: Tensor, y2: Tensor, lam: Tensor) -> Tensor:
    """Batch mean cross-entropy against ``(1 - lam) y1 + lam y2``.

    ``lam`` is detached: the ratio shapes the target but receives no gradient.
    """
    logits = torch.as_tensor(logits)
    y1 = torch.as_tensor(y1, dtype=logits.dtype)
    y2 = torch.as_tensor(y2, dtype=logits.dtype)
    return cross_entropy_soft(logits, mixed_targets(y1, y2, lam)).mean()


def local_loss(selected: Sequence[Tensor] | Tensor, provenance, y1, y2, head: LinearHead,
               image_index: Tensor | None = None) -> Tensor:
    """Per-image sum of local cross-entropies, averaged over images.

    ``selected`` holds one ``N_j x d`` tensor per image (or a single tensor for
    one image); ``provenance[j][i]`` is true when vector ``i`` of image ``j``
    came from the second source image and so takes label ``y2[j]``. Passing
    ``image_index`` instead allows flat ``M x d`` vectors with ``M`` flags,
    ``image_index[i]`` naming the row of ``y1``/``y2`` for vector ``i``.
    """
    if head.role != "local":
        raise ValueError("local loss needs the local head")
    if image_index is None:
        if isinstance(selected, Tensor):
            selected, provenance = [selected], [provenance]
            y1, y2 = torch.as_tensor(y1)[None], torch.as_tensor(y2)[None]
        if any(len(s) == 0 for s in selected):
            raise ValueError("every image needs at least one selected superpixel")
        image_index = torch.cat([torch.full((len(s),), j, dtype=torch.long) for j, s in enumerate(selected)])
        selected = torch.cat(list(selected))
        provenance = torch.cat([torch.as_tensor(p, dtype=torch.bool).reshape(-1) for p in provenance])
        num_images = len(y1)
    else:
        num_images = len(torch.unique(image_index))
    y1 = torch.as_tensor(y1, dtype=head.weight.dtype)
    y2 = torch.as_tensor(y2, dtype=head.weight.dtype)
    prov = torch.as_tensor(provenance, dtype=torch.bool)
    targets = torch.where(prov[:, None], y2[image_index], y1[image_index])
    return cross_entropy_soft(head(selected), targets).sum() / num_images


def unit_normalize(c: Tensor) -> Tensor:
    return c / c.norm(dim=-1, keepdim=True)


def contrastive_loss(vectors: Tensor, labels, tau: float, literal: bool = True) -> Tensor:
    """Superpixel-wise supervised contrastive loss over unit vectors.

    With ``literal=True`` each positive pair (i, j) is scored against
    ``exp(s_ij) + sum_{k in negatives(i)} exp(s_ik)``; other positives are
    left out of the denominator. ``literal=False`` uses the usual form whose
    denominator runs over every k != i. Anchors without a positive add 0 but
    still count in the batch size.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    labels = torch.as_tensor(labels).reshape(-1)
    n = vectors.shape[0]
    sim = vectors @ vectors.T / tau
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=vectors.device)
    pos = same & ~eye
    low = torch.finfo(sim.dtype).min
    if literal:
        neg_lse = sim.masked_fill(same, low).logsumexp(dim=1, keepdim=True)
        neg_lse = torch.where(same.all(dim=1, keepdim=True), torch.full_like(neg_lse, -math.inf), neg_lse)
        log_prob = sim - torch.logaddexp(sim, neg_lse)
    else:
        log_prob = sim - sim.masked_fill(eye, low).logsumexp(dim=1, keepdim=True)
    n_pos = pos.sum(dim=1)
    per_anchor = (log_prob * pos).sum(dim=1) / n_pos.clamp(min=1)
    return -per_anchor.sum() / n


def total_loss(global_term, local_term, contrast_term, cfg: LossConfig):
    return global_term + cfg.gamma1 * local_term + cfg.gamma2 * contrast_term


def finite_diff_errors(loss_fn: Callable[..., dict], params: Sequence[Tensor], epsilon: float = 1e-4,
                       analytic: dict | None = None) -> dict:
    """``finite_diff_check`` for a ``loss_fn`` returning several named scalars.

    Each perturbation is evaluated once for all outputs. ``analytic`` maps a
    name to its list of gradients; missing names come from autograd.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = [p.detach().clone() for p in params]
    leaves = [p.clone().requires_grad_(True) for p in base]
    values = loss_fn(*leaves)
    names = list(values)
    grads = dict(analytic or {})
    worst = dict.fromkeys(names, 0.0)
    for name in names:
        if not torch.isfinite(values[name]):
            worst[name] = math.inf
        elif name not in grads:
            g = torch.autograd.grad(values[name], leaves, retain_graph=True, allow_unused=True)
            grads[name] = [torch.zeros_like(p) if gi is None else gi for p, gi in zip(base, g)]
    live = [n for n in names if worst[n] == 0.0]
    with torch.no_grad():
        for k, p in enumerate(base):
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn(*base)
                flat[i] = orig - epsilon
                down = loss_fn(*base)
                flat[i] = orig
                for name in live:
                    u, d = float(up[name]), float(down[name])
                    if not (math.isfinite(u) and math.isfinite(d)):
                        worst[name] = math.inf
                        continue
                    numeric = (u - d) / (2 * epsilon)
                    a = float(grads[name][k].reshape(-1)[i])
                    err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                    worst[name] = max(worst[name], err)
    return worst


def finite_diff_check(loss_fn: Callable[..., Tensor], params: Sequence[Tensor], epsilon: float = 1e-4,
                      analytic: Sequence[Tensor] | None = None) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``loss_fn(*params)`` must return a scalar. When ``analytic`` is omitted the
    gradient comes from autograd. Returns ``inf`` if any loss is non-finite.
    The error of one coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    given = None if analytic is None else {"loss": list(analytic)}
    return finite_diff_errors(lambda *v: {"loss": loss_fn(*v)}, params, epsilon, given)["loss"]
