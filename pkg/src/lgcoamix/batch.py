"""Offline augmentation of image manifests and a throughput benchmark."""

from __future__ import annotations

import hashlib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import superpixel_pool
from .core import MixConfig, Rng, one_hot
from .io import (
    InvalidInput,
    read_image,
    read_manifest,
    write_image,
    write_manifest,
    write_plan,
    write_superpixel_map,
)
from .mixer import (
    bernoulli_select,
    compose_mix,
    lambda_area,
    lgcoamix,
    mix_labels,
    segment_for_mix,
    MixPlan,
)
from .slic import SlicParams

log = logging.getLogger(__name__)

THREADS_ENV = "LGCOAMIX_THREADS"


def worker_count(requested: int | None = None) -> int:
    """Requested workers (default: CPU count), capped by ``LGCOAMIX_THREADS``."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise InvalidInput(f"{THREADS_ENV}={cap!r} is not an integer") from None
    return max(1, n)


@dataclass
class AugmentReport:
    manifest_path: Path
    written: int = 0
    skipped: list = field(default_factory=list)  # (image_path, reason)


def _load_images(manifest):
    images, skipped = {}, []
    for i, rec in enumerate(manifest.records):
        try:
            images[i] = read_image(manifest.resolve(rec))
        except InvalidInput as exc:
            skipped.append((rec["image_path"], str(exc)))
    return images, skipped


def pair_indices(n: int, rng: Rng) -> np.ndarray:
    """A uniformly random partner, different from itself, for each of ``n`` images."""
    if n < 2:
        raise InvalidInput("need at least two readable images to mix")
    draw = rng.generator.integers(0, n - 1, size=n)
    return draw + (draw >= np.arange(n))


def augment_batch(manifest_path, config: MixConfig, seed: int, out_dir, workers: int | None = 1,
                  slic: SlicParams | None = None) -> AugmentReport:
    """Mix every readable image with a random partner and write the results.

    Writes ``mix_NNNNN.png``, ``smix_NNNNN.png`` (+ sidecar), ``plan_NNNNN.json``
    and ``augmented.jsonl``. The label is mixed with the area ratio: attention
    weights only exist inside a training forward pass, so the plan is kept for
    recomputing the attention ratio online.
    """
    manifest = read_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, skipped = _load_images(manifest)
    for path, reason in skipped:
        log.warning("skipping %s: %s", path, reason)
    usable = sorted(images)
    partners = pair_indices(len(usable), Rng(seed))
    master = Rng(seed)

    def job(pos):
        i, j = usable[pos], usable[partners[pos]]
        x1, x2 = images[i], images[j]
        if x1.shape != x2.shape:
            return pos, None, f"shape {x1.shape} differs from partner shape {x2.shape}"
        k = manifest.num_classes
        y1 = one_hot(int(manifest.records[i]["class_index"]), k)
        y2 = one_hot(int(manifest.records[j]["class_index"]), k)
        sample, plan = lgcoamix(x1, y1, x2, y2, config, master.child(pos), slic=slic)
        return pos, (i, j, sample, plan), None

    report = AugmentReport(out_dir / "augmented.jsonl", skipped=list(skipped))
    out_records = []
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        # map yields in submission order, so writes are serialized and ordered
        for pos, result, problem in pool.map(job, range(len(usable))):
            if result is None:
                path = manifest.records[usable[pos]]["image_path"]
                log.warning("skipping %s: %s", path, problem)
                report.skipped.append((path, problem))
                continue
            i, j, sample, plan = result
            lam = lambda_area(plan)
            y_mix = mix_labels(sample.y1, sample.y2, lam)
            stem = f"{pos:05d}"
            write_image(out_dir / f"mix_{stem}.png", sample.x_mix)
            write_superpixel_map(out_dir / f"smix_{stem}.png", sample.s_mix)
            write_plan(out_dir / f"plan_{stem}.json", plan, sample, lambda_area=lam)
            out_records.append({
                "image_path": f"mix_{stem}.png",
                "s_mix_path": f"smix_{stem}.png",
                "plan_path": f"plan_{stem}.json",
                "source_a": manifest.records[i]["image_path"],
                "source_b": manifest.records[j]["image_path"],
                "class_index": int(np.argmax(y_mix)),
                "label": y_mix.tolist(),
                "lambda_area": lam,
            })
    write_manifest(report.manifest_path, out_records, manifest.num_classes)
    report.written = len(out_records)
    return report


def bench(manifest_path, config: MixConfig, seed: int, workers: int | None = 1,
          slic: SlicParams | None = None) -> dict:
    """Time segmentation, mixing and pooling over every pair of a manifest.

    Stages run one after another, each spread over the worker pool, so every
    stage time is a wall-clock interval inside the total. ``digest`` hashes
    every mixed image and map in pair order, making runs with different
    worker counts comparable.
    """
    manifest = read_manifest(manifest_path)
    n_workers = worker_count(workers)
    t_start = time.perf_counter()
    images, skipped = _load_images(manifest)
    usable = sorted(images)
    rng = Rng(seed)
    partners = pair_indices(len(usable), rng)
    counts = []
    for pos in range(len(usable)):
        child = rng.child(pos)
        counts.append((child, child.uniform_int(config.q_min, config.q_max),
                       child.uniform_int(config.q_min, config.q_max)))

    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        t0 = time.perf_counter()
        jobs = [(usable[pos], counts[pos][1]) for pos in range(len(usable))]
        jobs += [(usable[partners[pos]], counts[pos][2]) for pos in range(len(usable))]
        maps = dict(zip(jobs, pool.map(lambda a: segment_for_mix(images[a[0]], a[1], slic), jobs)))
        t1 = time.perf_counter()

        def mix(pos):
            i, j = usable[pos], usable[partners[pos]]
            s1, s2 = maps[(i, counts[pos][1])], maps[(j, counts[pos][2])]
            sel = bernoulli_select(s2, config.p, counts[pos][0])
            plan = MixPlan(sel.mask, sel.selected_from_x2, counts[pos][1], counts[pos][2])
            return compose_mix(images[i], images[j], s1, s2, plan)

        samples = list(pool.map(mix, range(len(usable))))
        t2 = time.perf_counter()
        list(pool.map(lambda s: superpixel_pool(s.x_mix, s.s_mix), samples))
        t3 = time.perf_counter()

    digest = hashlib.sha256()
    for s in samples:
        digest.update(s.x_mix.tobytes())
        digest.update(s.s_mix.labels.astype(np.int64).tobytes())
    total = time.perf_counter() - t_start
    return {
        "images": len(samples),
        "skipped": len(skipped),
        "workers": n_workers,
        "total_seconds": total,
        "images_per_second": len(samples) / total if total > 0 else float("inf"),
        "stages": {"segment": t1 - t0, "mix": t2 - t1, "pool": t3 - t2},
        "digest": digest.hexdigest(),
    }
