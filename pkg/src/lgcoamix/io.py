"""File formats: 8-bit images, 16-bit superpixel maps, label vectors, manifests, plans."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import SuperpixelMap, as_image, check_label_vector
from .mixer import MixedSample, MixPlan

MAX_MAP_LABELS = 1 << 16


class InvalidInput(ValueError):
    """Raised for unreadable or malformed input files."""


def read_image(path) -> np.ndarray:
    """Load an 8-bit PNG as ``H x W x C`` floats in [0, 1] (C = 3, or 1 for grayscale)."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I"):
                arr = np.asarray(im.convert("L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise InvalidInput(f"cannot read image {path}: {exc}") from exc
    return as_image(arr)


def to_uint8(image) -> np.ndarray:
    img = as_image(image)
    return np.round(img * 255.0).astype(np.uint8)


def write_image(path, image) -> None:
    arr = to_uint8(image)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_superpixel_map(path, smap: SuperpixelMap) -> None:
    """16-bit grayscale PNG of superpixel IDs plus a ``<name>.json`` sidecar ``{"L": n}``."""
    if smap.L > MAX_MAP_LABELS:
        raise ValueError(f"{smap.L} superpixels do not fit in 16 bits")
    Image.fromarray(smap.labels.astype(np.uint16)).save(path, format="PNG")
    _sidecar(path).write_text(json.dumps({"L": smap.L}) + "\n")


def read_superpixel_map(path, validate: bool = True) -> SuperpixelMap:
    try:
        with Image.open(path) as im:
            labels = np.asarray(im).astype(np.int64)
        meta = json.loads(_sidecar(path).read_text())
    except (OSError, ValueError) as exc:
        raise InvalidInput(f"cannot read superpixel map {path}: {exc}") from exc
    if labels.ndim != 2:
        raise InvalidInput(f"{path} is not a single-channel map")
    smap = SuperpixelMap(labels)
    if smap.L != meta.get("L"):
        raise InvalidInput(f"{path}: sidecar says L={meta.get('L')}, map has {smap.L}")
    if validate:
        # truncated superpixels of a mixed map may legitimately be split
        smap.validate(check_connectivity=False)
    return smap


def write_label(path, probs) -> None:
    Path(path).write_text(json.dumps({"probs": check_label_vector(probs).tolist()}) + "\n")


def read_label(path) -> np.ndarray:
    try:
        data = json.loads(Path(path).read_text())
        return check_label_vector(data["probs"])
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise InvalidInput(f"cannot read label vector {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# Manifests
# ----------------------------------------------------------------------------


@dataclass
class Manifest:
    records: list[dict]
    num_classes: int
    root: Path

    def resolve(self, record: dict) -> Path:
        p = Path(record["image_path"])
        return p if p.is_absolute() else self.root / p


def read_manifest(path) -> Manifest:
    """JSONL: an optional header ``{"K": n}`` then ``{image_path, class_index}`` records.

    Without a header K is taken as one more than the largest class index.
    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        rows = [json.loads(ln) for ln in lines]
    except (OSError, ValueError) as exc:
        raise InvalidInput(f"cannot read manifest {path}: {exc}") from exc
    k = None
    if rows and "K" in rows[0] and "image_path" not in rows[0]:
        k = rows.pop(0)["K"]
    records = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict) or "image_path" not in row or "class_index" not in row:
            raise InvalidInput(f"{path} record {i}: needs image_path and class_index")
        records.append(row)
    if not records:
        raise InvalidInput(f"manifest {path} has no records")
    max_class = max(int(r["class_index"]) for r in records)
    k = max_class + 1 if k is None else int(k)
    for r in records:
        if not 0 <= int(r["class_index"]) < k:
            raise InvalidInput(f"class index {r['class_index']} outside [0, {k})")
    return Manifest(records, k, path.parent)


def write_manifest(path, records: list[dict], num_classes: int) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"K": num_classes}) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# Plans
# ----------------------------------------------------------------------------


def rle_encode(mask) -> list[int]:
    """Run lengths of the row-major flattened mask, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    return ([0] + runs) if flat[0] else runs


def rle_decode(runs, shape) -> np.ndarray:
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    if flat.size != int(np.prod(shape)):
        raise InvalidInput(f"run lengths cover {flat.size} pixels, shape {tuple(shape)} needs {np.prod(shape)}")
    return flat.reshape(shape)


def plan_to_dict(plan: MixPlan, sample: MixedSample | None = None) -> dict:
    out = {
        "shape": list(plan.mask.shape),
        "mask_rle": rle_encode(plan.mask),
        "selected_from_x2": [int(i) for i in plan.selected_from_x2],
        "q1": int(plan.q1),
        "q2": int(plan.q2),
    }
    if sample is not None:
        out["provenance"] = ["from_x2" if p else "from_x1" for p in sample.from_x2]
    return out


def plan_from_dict(data: dict) -> MixPlan:
    mask = rle_decode(data["mask_rle"], tuple(data["shape"]))
    return MixPlan(mask, np.asarray(data["selected_from_x2"], dtype=np.int64), int(data["q1"]), int(data["q2"]))


def write_plan(path, plan: MixPlan, sample: MixedSample | None = None, **extra) -> None:
    data = plan_to_dict(plan, sample)
    data.update(extra)
    Path(path).write_text(json.dumps(data) + "\n")


def read_plan(path) -> tuple[MixPlan, dict]:
    try:
        data = json.loads(Path(path).read_text())
        return plan_from_dict(data), data
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise InvalidInput(f"cannot read plan {path}: {exc}") from exc
