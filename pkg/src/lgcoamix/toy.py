"""Desk-scale end-to-end training with superpixel mixing.

A small strided-conv encoder feeds a global head; a skip-connected decoder
brings features back to input resolution for superpixel pooling, attention,
local classification and the superpixel contrastive loss. Evaluation touches
the encoder and global head only.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import SuperpixelAttention, superpixel_pool_batch, top_count
from .core import LabelMixingMode, LossConfig, MixConfig, Rng, SuperpixelMap
from .losses import (
    LinearHead,
    contrastive_loss,
    global_loss,
    local_loss,
    total_loss,
    unit_normalize,
)
from .mixer import FROM_X2, MixedSample, lgcoamix
from .slic import SlicParams, slic_segment

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond")


# ----------------------------------------------------------------------------
# Synthetic data
# ----------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    images: np.ndarray  # n x H x W x 3, float in [0, 1]
    labels: np.ndarray  # n class indices
    masks: np.ndarray  # n x H x W, True on the drawn shape
    num_classes: int
    seed: int

    def __len__(self):
        return len(self.labels)

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]


def shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        a = 0.85 * r
        return (np.abs(dy) <= a) & (np.abs(dx) <= a)
    if kind == "triangle":
        top, bottom = -r, 0.8 * r
        frac = (dy - top) / (bottom - top)
        return (dy >= top) & (dy <= bottom) & (np.abs(dx) <= frac * r)
    if kind == "cross":
        arm = r / 3
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(f"unknown shape {kind!r}")


def _smooth_noise(gen: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = torch.as_tensor(gen.random((1, 3, cells, cells)))
    fine = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=True)
    return fine[0].permute(1, 2, 0).numpy()


def _blob(gen: np.random.Generator, size: int, r: float) -> np.ndarray:
    """Irregular distractor region: a thresholded smooth field inside a disk."""
    cy, cx = gen.uniform(0, size - 1, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    field = _smooth_noise(gen, size, 6)[..., 0]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r**2) & (field > 0.4)


def make_synthetic_dataset(n: int, num_classes: int, seed: int, size: int = 32,
                           distractors: int = 2) -> SyntheticDataset:
    """Class-balanced shapes on cluttered textured backgrounds, ``n / K`` per class.

    Each image gets up to ``distractors`` irregular blobs, drawn under the shape.
    """
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"K must lie in [1, {len(SHAPES)}]")
    if n % num_classes:
        raise ValueError(f"n={n} is not a multiple of K={num_classes}")
    gen = np.random.Generator(np.random.PCG64(seed))
    labels = np.tile(np.arange(num_classes), n // num_classes)
    gen.shuffle(labels)
    images = np.empty((n, size, size, 3))
    masks = np.empty((n, size, size), dtype=bool)
    for i, cls in enumerate(labels):
        r = gen.uniform(0.2, 0.34) * size
        cy, cx = gen.uniform(r, size - 1 - r, size=2)
        mask = shape_mask(SHAPES[cls], size, cy, cx, r)
        bg_color = gen.uniform(0.15, 0.85, size=3)
        img = bg_color + 0.35 * (_smooth_noise(gen, size, 5) - 0.5)
        for _ in range(gen.integers(0, distractors, endpoint=True)):
            blob = _blob(gen, size, gen.uniform(0.15, 0.3) * size)
            img = np.where(blob[:, :, None], gen.uniform(0.0, 1.0, size=3), img)
        fg_color = gen.uniform(0.1, 0.9, size=3)
        while np.abs(fg_color - bg_color).max() < 0.3:
            fg_color = gen.uniform(0.1, 0.9, size=3)
        foreground = fg_color + 0.2 * (_smooth_noise(gen, size, 8) - 0.5)
        img = np.where(mask[:, :, None], foreground, img)
        img += gen.normal(0.0, 0.04, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
        masks[i] = mask
    return SyntheticDataset(images, labels, masks, num_classes, seed)


def mask_features(masks: np.ndarray, grid: int = 3) -> np.ndarray:
    """Filled fraction of each cell of a ``grid x grid`` split of the shape's bounding box."""
    out = np.zeros((len(masks), grid * grid + 1))
    for i, m in enumerate(masks):
        ys, xs = np.nonzero(m)
        box = m[ys.min(): ys.max() + 1, xs.min(): xs.max() + 1].astype(np.float64)
        rows = np.array_split(np.arange(box.shape[0]), grid)
        cols = np.array_split(np.arange(box.shape[1]), grid)
        out[i, :-1] = [box[np.ix_(r, c)].mean() for r in rows for c in cols]
        out[i, -1] = box.mean()
    return out


# ----------------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------------

_ACTIVATIONS = {"relu": F.relu, "softplus": F.softplus, "tanh": torch.tanh}


class ToyModel(nn.Module):
    """Two strided encoder stages, two transposed-conv decoder stages with a skip."""

    def __init__(self, in_channels: int, num_classes: int, enc_width: int = 32, dec_width: int = 32,
                 activation: str = "relu", seed: int = 0, dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        half = max(1, enc_width // 2)
        self.act = _ACTIVATIONS[activation]
        self.enc1 = nn.Conv2d(in_channels, half, 3, stride=2, padding=1, bias=False, dtype=dtype)
        self.enc1b = nn.Conv2d(half, half, 3, padding=1, bias=False, dtype=dtype)
        self.enc2 = nn.Conv2d(half, enc_width, 3, stride=2, padding=1, bias=False, dtype=dtype)
        self.enc2b = nn.Conv2d(enc_width, enc_width, 3, padding=1, bias=False, dtype=dtype)
        # biases would be cancelled by the batch norms that follow
        self.norms = nn.ModuleList(
            nn.BatchNorm2d(ch, dtype=dtype) for ch in (half, half, enc_width, enc_width)
        )
        self.dec1 = nn.ConvTranspose2d(enc_width, half, 2, stride=2, dtype=dtype)
        self.dec2 = nn.ConvTranspose2d(half, dec_width, 2, stride=2, dtype=dtype)
        self.global_head = LinearHead(enc_width, num_classes, "global", dtype=dtype)
        self.local_head = LinearHead(dec_width, num_classes, "local", dtype=dtype)
        self.attention = SuperpixelAttention(dec_width, generator=gen, dtype=dtype)
        with torch.no_grad():
            for mod in (self.enc1, self.enc1b, self.enc2, self.enc2b, self.dec1, self.dec2,
                        self.global_head, self.local_head):
                fan_in = mod.weight[0].numel() if not isinstance(mod, nn.ConvTranspose2d) else \
                    mod.weight.shape[0]
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen, dtype=dtype)
                                 * math.sqrt(2.0 / fan_in))
                if mod.bias is not None:
                    mod.bias.zero_()
        self.reset_counters()

    def reset_counters(self):
        self.encoder_calls = 0
        self.decoder_calls = 0
        self.attention_calls = 0

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns the half-resolution skip feature and the encoded feature ``Z``."""
        self.encoder_calls += x.shape[0]
        n1, n2, n3, n4 = self.norms
        e1 = self.act(n2(self.enc1b(self.act(n1(self.enc1(x))))))
        z = self.act(n4(self.enc2b(self.act(n3(self.enc2(e1))))))
        return e1, z

    def decode(self, z: Tensor, skip: Tensor) -> Tensor:
        self.decoder_calls += z.shape[0]
        h = self.act(self.dec1(z)) + skip
        return self.dec2(h)

    def global_logits(self, z: Tensor) -> Tensor:
        return self.global_head(z.mean(dim=(2, 3)))

    def attend(self, f: Tensor, valid: Tensor) -> tuple[Tensor, Tensor]:
        self.attention_calls += f.shape[0]
        return self.attention(f, valid)

    @torch.no_grad()
    def predict(self, x: Tensor) -> Tensor:
        _, z = self.encode(x)
        return self.global_logits(z).argmax(dim=1)


# ----------------------------------------------------------------------------
# Forward pass
# ----------------------------------------------------------------------------


@dataclass
class MixBatch:
    x: Tensor  # B x C x H x W network input (mixed where augmented)
    y1: Tensor  # B x K
    y2: Tensor  # B x K
    augmented: np.ndarray  # B bools
    samples: list  # MixedSample for each augmented entry, in batch order


def build_batch(x_mix: np.ndarray, y1: np.ndarray, y2: np.ndarray, samples: list[MixedSample | None],
                dtype=torch.float32) -> MixBatch:
    augmented = np.array([s is not None for s in samples], dtype=bool)
    x = torch.as_tensor(np.ascontiguousarray(x_mix.transpose(0, 3, 1, 2)), dtype=dtype)
    return MixBatch(x, torch.as_tensor(y1, dtype=dtype), torch.as_tensor(y2, dtype=dtype),
                    augmented, [s for s in samples if s is not None])


def mix_ratio(w: Tensor, counts: Tensor, from_x2: Tensor, labels: Tensor, masks: Tensor,
              mode: LabelMixingMode) -> Tensor:
    """Per-sample mixing ratio from detached attention weights ``w`` (A x Lmax)."""
    w = w.detach()
    if mode is LabelMixingMode.AREA:
        return (counts * from_x2).sum(1) / counts.sum(1)
    if mode is LabelMixingMode.SUPERPIXEL_ATTENTION:
        mass = w * counts
        return (mass * from_x2).sum(1) / mass.sum(1)
    # pixel attention: each pixel carries the weight of its superpixel
    pixel_w = torch.gather(w, 1, labels.reshape(len(w), -1))
    return (pixel_w * masks.reshape(len(w), -1)).sum(1) / pixel_w.sum(1)


def forward_batch(model: ToyModel, batch: MixBatch, mix_cfg: MixConfig, loss_cfg: LossConfig):
    """One forward pass: global logits, attention weights, ratio, all three losses."""
    e1, z = model.encode(batch.x)
    logits = model.global_logits(z)
    bsz = batch.x.shape[0]
    lam = torch.zeros(bsz, dtype=batch.x.dtype)
    zero = batch.x.new_zeros(())
    loc = con = zero
    diagnostics = {"n_augmented": int(batch.augmented.sum()), "n_selected": 0}

    idx = np.flatnonzero(batch.augmented)
    if idx.size:
        samples = batch.samples
        labels = torch.as_tensor(np.stack([s.s_mix.labels for s in samples]), dtype=torch.long)
        lmax = max(s.s_mix.L for s in samples)
        zhat = model.decode(z[idx], e1[idx])
        f, valid = superpixel_pool_batch(zhat, labels, lmax)
        c, w = model.attend(f, valid)

        counts = torch.zeros(len(samples), lmax, dtype=c.dtype)
        from_x2 = torch.zeros(len(samples), lmax, dtype=c.dtype)
        for j, s in enumerate(samples):
            counts[j, : s.s_mix.L] = torch.as_tensor(s.pixel_counts, dtype=c.dtype)
            from_x2[j, : s.s_mix.L] = torch.as_tensor(s.provenance == FROM_X2, dtype=c.dtype)
        masks = torch.gather(from_x2, 1, labels.reshape(len(samples), -1))
        with torch.no_grad():
            lam_aug = mix_ratio(w, counts, from_x2, labels, masks, mix_cfg.label_mixing_mode)
        lam = lam.index_put((torch.as_tensor(idx),), lam_aug.to(lam.dtype))

        ranked = torch.sort(w.detach().masked_fill(~valid, -math.inf), dim=1, descending=True,
                            stable=True).indices
        rank = torch.empty_like(ranked).scatter_(1, ranked, torch.arange(lmax).expand_as(ranked))
        n_top = torch.as_tensor([top_count(s.s_mix.L, mix_cfg.t) for s in samples])
        selected = rank < n_top[:, None]
        rows = torch.nonzero(selected)[:, 0]
        chosen = c[selected]
        prov = from_x2[selected].bool()
        image = torch.as_tensor(idx)[rows]
        classes = torch.where(prov, batch.y2[image].argmax(1), batch.y1[image].argmax(1))
        loc = local_loss(chosen, prov, batch.y1, batch.y2, model.local_head, image_index=image)
        con = contrastive_loss(unit_normalize(chosen), classes, loss_cfg.tau,
                               literal=loss_cfg.literal_contrast)
        diagnostics["n_selected"] = int(selected.sum())
        diagnostics["selected"] = selected
        diagnostics["weights"] = w.detach()
        diagnostics["valid"] = valid

    glob = global_loss(logits, batch.y1, batch.y2, lam)
    losses = {
        "global": glob,
        "local": loc,
        "contrast": con,
        "total": total_loss(glob, loc, con, loss_cfg),
    }
    diagnostics["logits"] = logits
    return losses, lam, diagnostics


def forward_lgcoamix(model: ToyModel, x1, y1, x2, y2, mix_cfg: MixConfig, loss_cfg: LossConfig, rng: Rng,
                     slic: SlicParams | None = None):
    """Mix one pair and run the single forward pass on the result.

    Returns ``(losses, lam_att, diagnostics)``; ``diagnostics['sample']`` holds
    the ``MixedSample`` and ``diagnostics['plan']`` the ``MixPlan``.
    """
    sample, plan = lgcoamix(x1, y1, x2, y2, mix_cfg, rng, slic=slic)
    dtype = next(model.parameters()).dtype
    batch = build_batch(sample.x_mix[None], np.asarray(y1)[None], np.asarray(y2)[None], [sample], dtype)
    losses, lam, diag = forward_batch(model, batch, mix_cfg, loss_cfg)
    diag.update(sample=sample, plan=plan, batch=batch)
    return losses, float(lam[0]), diag


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0005
    augment_prob: float = 0.5
    mix: MixConfig = field(default_factory=MixConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    num_classes: int = 4
    n_train: int = 2000
    n_test: int = 400
    image_size: int = 32
    dataset_seed: int = 2024
    # clutter blobs per image; with clutter the 30-epoch budget is spent escaping chance
    distractors: int = 0
    enc_width: int = 32
    dec_width: int = 32
    compactness: float = 10.0
    slic_iterations: int = 10
    # False trains on base augmentation (flips) only
    use_lgcoamix: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if isinstance(data.get("mix"), dict):
            data["mix"] = MixConfig(**data["mix"])
        if isinstance(data.get("loss"), dict):
            data["loss"] = LossConfig(**data["loss"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mix"]["label_mixing_mode"] = self.mix.label_mixing_mode.value
        return out


class SegmentCache:
    """SLIC maps of unflipped training images, keyed by (image index, q)."""

    def __init__(self, images: np.ndarray, compactness: float, iterations: int):
        self.images = images
        self.compactness = compactness
        self.iterations = iterations
        self._maps: dict[tuple[int, int], SuperpixelMap] = {}

    def get(self, index: int, q: int, flipped: bool) -> SuperpixelMap:
        key = (index, q)
        smap = self._maps.get(key)
        if smap is None:
            smap = slic_segment(self.images[index], SlicParams(q, self.compactness, self.iterations))
            self._maps[key] = smap
        # a mirrored segmentation is a valid segmentation of the mirrored image
        return SuperpixelMap(smap.labels[:, ::-1].copy()) if flipped else smap


_CACHES: dict[tuple, SegmentCache] = {}


def _segment_cache(dataset: SyntheticDataset, cfg: TrainConfig) -> SegmentCache:
    key = (id(dataset.images), cfg.compactness, cfg.slic_iterations)
    cache = _CACHES.get(key)
    if cache is None or cache.images is not dataset.images:
        cache = SegmentCache(dataset.images, cfg.compactness, cfg.slic_iterations)
        _CACHES.clear()
        _CACHES[key] = cache
    return cache


def make_batch(dataset: SyntheticDataset, indices: np.ndarray, cfg: TrainConfig, rng: Rng,
               cache: SegmentCache | None, dtype=torch.float32) -> MixBatch:
    """Flip every image with probability 1/2, then mix each with its partner with prob ``augment_prob``."""
    gen = rng.generator
    n = len(indices)
    flips = gen.random(n) < 0.5
    images = dataset.images[indices].copy()
    images[flips] = images[flips][:, :, ::-1]
    onehot = np.eye(dataset.num_classes)[dataset.labels[indices]]
    partner = gen.permutation(n)
    augment = (gen.random(n) < cfg.augment_prob) if cfg.use_lgcoamix else np.zeros(n, dtype=bool)
    x_out = images.copy()
    y2 = onehot.copy()
    samples: list[MixedSample | None] = [None] * n
    for i in np.flatnonzero(augment):
        k = partner[i]
        src = ((indices[i], flips[i]), (indices[k], flips[k]))

        def segment(which, image, q, _src=src):
            idx, flipped = _src[which]
            return cache.get(int(idx), q, bool(flipped))

        sample, _ = lgcoamix(images[i], onehot[i], images[k], onehot[k], cfg.mix, rng.child(int(i)),
                             segment=segment)
        x_out[i] = sample.x_mix
        y2[i] = onehot[k]
        samples[i] = sample
    return build_batch(x_out, onehot, y2, samples, dtype)


def evaluate(model: ToyModel, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy through the encoder and global head only."""
    dec_before, att_before = model.decoder_calls, model.attention_calls
    model.eval()
    correct = 0
    for start in range(0, len(labels), batch_size):
        chunk = images[start: start + batch_size]
        x = torch.as_tensor(np.ascontiguousarray(chunk.transpose(0, 3, 1, 2)),
                            dtype=next(model.parameters()).dtype)
        correct += int((model.predict(x).numpy() == labels[start: start + batch_size]).sum())
    model.train()
    assert model.decoder_calls == dec_before and model.attention_calls == att_before
    return correct / len(labels)


def train(cfg: TrainConfig, datasets: tuple[SyntheticDataset, SyntheticDataset] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[ToyModel, list[dict]]:
    """Train the toy model; returns the model and one log record per epoch."""
    torch.manual_seed(cfg.seed)
    if datasets is None:
        datasets = default_datasets(cfg)
    train_set, test_set = datasets
    model = ToyModel(3, cfg.num_classes, cfg.enc_width, cfg.dec_width, seed=cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    rng = Rng(cfg.seed)
    cache = _segment_cache(train_set, cfg) if cfg.use_lgcoamix else None
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.generator.permutation(len(train_set))
        sums = {"global": 0.0, "local": 0.0, "contrast": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start: start + cfg.batch_size]
            batch = make_batch(train_set, batch_idx, cfg, rng.child(epoch * 1_000_003 + start), cache)
            losses, _, _ = forward_batch(model, batch, cfg.mix, cfg.loss)
            if not torch.isfinite(losses["total"]):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {steps}: "
                    + ", ".join(f"{k}={float(v):.4g}" for k, v in losses.items())
                )
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            for k in sums:
                sums[k] += float(losses[k].detach())
            steps += 1
        record = {
            "epoch": epoch,
            "loss_global": sums["global"] / steps,
            "loss_local": sums["local"] / steps,
            "loss_contrast": sums["contrast"] / steps,
            "loss_total": sums["total"] / steps,
            "eval_acc": evaluate(model, test_set.images, test_set.labels),
        }
        history.append(record)
        log.info("epoch %d  total %.4f  acc %.4f  (%.1fs)", epoch, record["loss_total"],
                 record["eval_acc"], time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(record)
    return model, history


def default_datasets(cfg: TrainConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    train_set = make_synthetic_dataset(cfg.n_train, cfg.num_classes, cfg.dataset_seed, cfg.image_size,
                                       cfg.distractors)
    test_set = make_synthetic_dataset(cfg.n_test, cfg.num_classes, cfg.dataset_seed + 1, cfg.image_size,
                                      cfg.distractors)
    return train_set, test_set


def untrained_config(cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, epochs=0)


def dumps_log(history: list[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history)
