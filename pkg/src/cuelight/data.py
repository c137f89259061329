"""Dataset ingestion, quadrant patches and seeded batching.

Annotations follow the COCO layout::

    {"images":      [{"id": 1, "file_name": "a.png", "width": W, "height": H}],
     "annotations": [{"image_id": 1, "category_id": 3, "bbox": [x, y, w, h],
                      "score": 0.8}],           # score optional, defaults to 1
     "categories":  [{"id": 3, "name": "person"}]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AnnotationParseError, IngestionError, InvalidArgument
from .guidance import InstanceAnnotation, build_description
from .image import as_image, list_images, read_image, resize_bilinear, write_image

log = logging.getLogger(__name__)

QUADRANTS = ("TL", "TR", "BL", "BR")
PATCH_SIZE = 224
AUTO_CONFIDENCE = 0.30


@dataclass
class AnnotatedImage:
    image: np.ndarray
    instances: list[InstanceAnnotation]
    source_id: str
    n_clipped: int = 0


@dataclass
class TrainingPatch:
    image: np.ndarray
    content: list[InstanceAnnotation] = field(default_factory=list)
    context: list[InstanceAnnotation] = field(default_factory=list)
    quadrant: str = "TL"
    source_id: str = ""

    @property
    def patch_id(self) -> str:
        return f"{self.source_id}#{self.quadrant}"


def _clip_box(box, width, height):
    x0, y0, x1, y1 = box
    return (min(max(x0, 0.0), width), min(max(y0, 0.0), height), min(max(x1, 0.0), width), min(max(y1, 0.0), height))


def _parse_annotations(text: str, where: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{where}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise AnnotationParseError(f"{where}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key, []), list):
            raise AnnotationParseError(f"{where}: '{key}' must be a list")
    return doc


def _require(entry: dict, key: str, where: str):
    if key not in entry:
        raise AnnotationParseError(f"{where}: missing key '{key}'")
    return entry[key]


def load_dataset(images_dir, annotations_file=None, source: str = "", min_confidence: float | None = None) -> list[AnnotatedImage]:
    """Decode every image referenced by a COCO-style file.

    Without an annotation file every image in ``images_dir`` is loaded
    with no instances. Boxes are clipped to image bounds; boxes left empty
    by clipping are dropped. ``min_confidence`` applies the auto-annotation
    filter. Results are sorted by ``source_id``.
    """
    images_dir = Path(images_dir)
    prefix = f"{source}/" if source else ""
    if annotations_file is None:
        if not images_dir.is_dir():
            raise IngestionError(f"image directory {images_dir} does not exist")
        out = [AnnotatedImage(read_image(p), [], prefix + p.name) for p in list_images(images_dir)]
        return sorted(out, key=lambda a: a.source_id)

    annotations_file = Path(annotations_file)
    doc = _parse_annotations(annotations_file.read_text(), str(annotations_file))
    categories = {}
    for i, cat in enumerate(doc.get("categories", [])):
        where = f"{annotations_file}: categories[{i}]"
        categories[_require(cat, "id", where)] = str(_require(cat, "name", where))
    records = {}
    for i, entry in enumerate(doc.get("images", [])):
        where = f"{annotations_file}: images[{i}]"
        records[_require(entry, "id", where)] = (str(_require(entry, "file_name", where)), [])
    for i, ann in enumerate(doc.get("annotations", [])):
        where = f"{annotations_file}: annotations[{i}]"
        image_id = _require(ann, "image_id", where)
        if image_id not in records:
            raise AnnotationParseError(f"{where}: unknown image_id {image_id!r}")
        cat_id = _require(ann, "category_id", where)
        if cat_id not in categories:
            raise AnnotationParseError(f"{where}: unknown category_id {cat_id!r}")
        bbox = _require(ann, "bbox", where)
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise AnnotationParseError(f"{where}: bbox must be [x, y, w, h]")
        records[image_id][1].append((bbox, categories[cat_id], float(ann.get("score", 1.0))))

    out = []
    for image_id, (file_name, anns) in records.items():
        path = images_dir / file_name
        if not path.is_file():
            raise IngestionError(f"image {image_id!r} ({file_name}) not found in {images_dir}")
        img = read_image(path)
        h, w = img.shape[:2]
        instances, clipped = [], 0
        for (x, y, bw, bh), category, score in anns:
            box = (float(x), float(y), float(x + bw), float(y + bh))
            inside = _clip_box(box, w, h)
            if inside != box:
                clipped += 1
            if not (inside[0] < inside[2] and inside[1] < inside[3]):
                log.warning("dropping box %s of %s: empty after clipping", box, file_name)
                continue
            instances.append(InstanceAnnotation(inside, category, score))
        if clipped:
            log.warning("%s: clipped %d box(es) to image bounds", file_name, clipped)
        if min_confidence is not None:
            instances = filter_autoannotations(instances, min_confidence)
        out.append(AnnotatedImage(img, instances, prefix + file_name, clipped))
    return sorted(out, key=lambda a: a.source_id)


def write_dataset(dataset, images_dir, annotations_file) -> None:
    """Inverse of ``load_dataset`` for a single unprefixed source."""
    images_dir = Path(images_dir)
    categories = sorted({inst.category for ai in dataset for inst in ai.instances})
    cat_ids = {name: i + 1 for i, name in enumerate(categories)}
    doc = {"images": [], "annotations": [], "categories": [{"id": cat_ids[n], "name": n} for n in categories]}
    for image_id, ai in enumerate(dataset, start=1):
        write_image(images_dir / ai.source_id, ai.image)
        h, w = ai.image.shape[:2]
        doc["images"].append({"id": image_id, "file_name": ai.source_id, "width": w, "height": h})
        for inst in ai.instances:
            x0, y0, x1, y1 = inst.bbox
            doc["annotations"].append({
                "id": len(doc["annotations"]) + 1,
                "image_id": image_id,
                "category_id": cat_ids[inst.category],
                "bbox": [x0, y0, x1 - x0, y1 - y0],
                "score": inst.confidence,
            })
    Path(annotations_file).parent.mkdir(parents=True, exist_ok=True)
    Path(annotations_file).write_text(json.dumps(doc, indent=1))


def filter_autoannotations(instances, threshold: float = AUTO_CONFIDENCE) -> list[InstanceAnnotation]:
    """Keep instances whose confidence is strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidArgument(f"threshold must lie in [0, 1], got {threshold}")
    return [inst for inst in instances if inst.confidence > threshold]


def _quadrant_of(inst: InstanceAnnotation, h2: int, w2: int) -> str:
    cx, cy = inst.center
    return ("T" if cy < h2 else "B") + ("L" if cx < w2 else "R")


def _overlap_fraction(box, region) -> float:
    x0, y0, x1, y1 = box
    rx0, ry0, rx1, ry1 = region
    iw = max(0.0, min(x1, rx1) - max(x0, rx0))
    ih = max(0.0, min(y1, ry1) - max(y0, ry0))
    return iw * ih / ((x1 - x0) * (y1 - y0))


def extract_quadrants(ai: AnnotatedImage, patch_size: int = PATCH_SIZE, membership: str = "center") -> list[TrainingPatch]:
    """Split at ``(H // 2, W // 2)`` into TL, TR, BL, BR patches.

    ``membership="center"`` assigns an instance to the quadrant holding its
    box centre; ``"overlap"`` uses the quadrant holding at least half of its
    area (possibly none). Content boxes are moved into resized patch
    coordinates; context instances keep full-image coordinates.
    """
    img = as_image(ai.image)
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise InvalidArgument(f"image {h}x{w} is too small to split into quadrants")
    if membership not in ("center", "overlap"):
        raise InvalidArgument(f"unknown membership rule {membership!r}")
    h2, w2 = h // 2, w // 2
    regions = {"TL": (0, 0, w2, h2), "TR": (w2, 0, w, h2), "BL": (0, h2, w2, h), "BR": (w2, h2, w, h)}
    patches = []
    for name in QUADRANTS:
        x0, y0, x1, y1 = regions[name]
        sx, sy = patch_size / (x1 - x0), patch_size / (y1 - y0)
        content, context = [], []
        for inst in ai.instances:
            if membership == "center":
                inside = _quadrant_of(inst, h2, w2) == name
            else:
                inside = _overlap_fraction(inst.bbox, regions[name]) >= 0.5
            if not inside:
                context.append(inst)
                continue
            bx0, by0, bx1, by1 = _clip_box(
                (inst.bbox[0] - x0, inst.bbox[1] - y0, inst.bbox[2] - x0, inst.bbox[3] - y0), x1 - x0, y1 - y0
            )
            content.append(InstanceAnnotation((bx0 * sx, by0 * sy, bx1 * sx, by1 * sy), inst.category, inst.confidence))
        crop = img[y0:y1, x0:x1]
        patches.append(TrainingPatch(resize_bilinear(crop, patch_size, patch_size), content, context, name, ai.source_id))
    return patches


def describe(patch: TrainingPatch):
    return build_description(patch.content, "content"), build_description(patch.context, "context")


def epoch_batches(items, batch_size: int, seed: int, epoch: int = 0) -> list[list]:
    """One epoch of seeded, shuffled batches; the final partial batch is dropped."""
    if batch_size < 1:
        raise InvalidArgument(f"batch_size must be >= 1, got {batch_size}")
    items = list(items)
    order = np.random.default_rng([seed, epoch]).permutation(len(items))
    n_full = len(items) // batch_size
    return [[items[i] for i in order[b * batch_size : (b + 1) * batch_size]] for b in range(n_full)]


def batch_iterator(items, batch_size: int, seed: int, epochs: int | None = 1, start_epoch: int = 0):
    """Yield batches epoch after epoch; ``epochs=None`` streams forever."""
    items = list(items)
    epoch = start_epoch
    while epochs is None or epoch < start_epoch + epochs:
        yield from epoch_batches(items, batch_size, seed, epoch)
        epoch += 1


def load_sources(sources) -> list[AnnotatedImage]:
    """Load and concatenate manifest sources.

    Each source is a mapping with ``images_dir`` and optional
    ``annotations``, ``name`` and ``min_confidence`` keys.
    """
    out = []
    for i, src in enumerate(sources):
        if "images_dir" not in src:
            raise InvalidArgument(f"data.sources[{i}]: missing key 'images_dir'")
        out.extend(load_dataset(src["images_dir"], src.get("annotations"), src.get("name", ""), src.get("min_confidence")))
    return sorted(out, key=lambda a: a.source_id)
