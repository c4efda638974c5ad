"""Dataset ingestion, augmentation, and the bundled toy fixture.

Annotations follow the COCO detection schema with ``bbox`` as
``[x_min, y_min, width, height]`` in pixels. The toy fixture is a pair
of unpaired single-disc domains: gray discs on white for the labeled
source, colored discs on a dark background for the target, whose labels
are withheld.
"""

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .querymap import BoundingBox, LabeledImage

__all__ = ["DomainDataset", "load_coco", "write_coco", "augment", "make_toy_fixture"]


@dataclass
class DomainDataset:
    name: str
    images: list = field(default_factory=list)
    labeled: bool = True


def load_coco(annotation_path, image_dir, name=None, labeled=None):
    """Load a COCO-schema annotation file plus its referenced images.

    All problems (missing files, malformed records, dangling image ids,
    out-of-bounds boxes) are collected and reported together.
    """
    annotation_path = Path(annotation_path)
    image_dir = Path(image_dir)
    try:
        payload = json.loads(annotation_path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"annotation file not found: {annotation_path}")
    except json.JSONDecodeError as exc:
        raise ValueError(f"{annotation_path}: malformed JSON ({exc})")

    errors = []
    if "images" not in payload:
        raise ValueError(f"{annotation_path}: missing 'images' list")

    records = {}
    for entry in payload["images"]:
        missing = [k for k in ("id", "file_name", "width", "height") if k not in entry]
        if missing:
            errors.append(f"image record {entry}: missing fields {missing}")
            continue
        path = image_dir / entry["file_name"]
        if not path.exists():
            errors.append(f"image file not found: {path}")
            continue
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[0] != entry["height"] or arr.shape[1] != entry["width"]:
            errors.append(
                f"{path}: declared {entry['width']}x{entry['height']} but file is "
                f"{arr.shape[1]}x{arr.shape[0]}"
            )
            continue
        records[entry["id"]] = LabeledImage(
            image=arr, boxes=[], identifier=Path(entry["file_name"]).stem
        )

    for ann in payload.get("annotations", []):
        image_id = ann.get("image_id")
        if image_id not in records:
            errors.append(f"annotation {ann.get('id')}: unknown image_id {image_id}")
            continue
        bbox = ann.get("bbox")
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            errors.append(f"annotation {ann.get('id')}: bbox must be [x, y, w, h], got {bbox}")
            continue
        x, y, w, h = (float(v) for v in bbox)
        img = records[image_id].image
        height, width = img.shape[:2]
        if w <= 0 or h <= 0:
            errors.append(f"annotation {ann.get('id')}: non-positive box extent {bbox}")
            continue
        if x < 0 or y < 0 or x + w > width or y + h > height:
            errors.append(
                f"annotation {ann.get('id')}: bbox {bbox} outside {width}x{height} image"
            )
            continue
        records[image_id].boxes.append(
            BoundingBox(x, y, w, h, class_id=int(ann.get("category_id", 0)))
        )

    if errors:
        report = "\n  - ".join(errors)
        raise ValueError(f"{annotation_path}: {len(errors)} problem(s):\n  - {report}")

    images = [records[k] for k in sorted(records)]
    if labeled is None:
        labeled = any(img.boxes for img in images)
    return DomainDataset(name=name or annotation_path.parent.name, images=images,
                         labeled=labeled)


def write_coco(dataset, annotation_path, image_dir=None):
    """Write a dataset back to COCO JSON (and optionally its PNGs)."""
    annotation_path = Path(annotation_path)
    annotation_path.parent.mkdir(parents=True, exist_ok=True)
    if image_dir is not None:
        image_dir = Path(image_dir)
        image_dir.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for image_id, img in enumerate(dataset.images, start=1):
        h, w = img.image.shape[:2]
        file_name = f"{img.identifier or f'image_{image_id:04d}'}.png"
        images.append({"id": image_id, "file_name": file_name, "width": w, "height": h})
        if image_dir is not None:
            save_image(img.image, image_dir / file_name)
        for box in img.boxes if dataset.labeled else []:
            annotations.append({
                "id": ann_id,
                "image_id": image_id,
                "bbox": [box.x_min, box.y_min, box.width, box.height],
                "category_id": box.class_id,
                "area": box.width * box.height,
                "iscrowd": 0,
            })
            ann_id += 1
    categories = sorted({b.class_id for img in dataset.images for b in img.boxes})
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": c, "name": f"class_{c}"} for c in categories] or
                      [{"id": 0, "name": "class_0"}],
    }
    annotation_path.write_text(json.dumps(payload, sort_keys=True, indent=2))
    return annotation_path


def save_image(image, path):
    """Quantize a [0, 1] float image to 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def augment(image, rng):
    """Seeded flip / crop-resize / brightness / contrast jitter.

    Draws, in order: flip coin, crop scale in [0.8, 1.0], two crop
    offsets, brightness delta in [-0.2, 0.2], contrast factor in
    [0.8, 1.2]. Draws that land on their no-op values leave the image
    bytes untouched. Output stays in [0, 1] at the input resolution.
    """
    if not hasattr(rng, "uniform"):
        rng = np.random.default_rng(rng)
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]

    flip = rng.uniform() < 0.5
    scale = rng.uniform(0.8, 1.0)
    oy_u, ox_u = rng.uniform(), rng.uniform()
    brightness = rng.uniform(-0.2, 0.2)
    contrast = rng.uniform(0.8, 1.2)

    if flip:
        img = img[:, ::-1].copy()
    ch, cw = round(scale * h), round(scale * w)
    if (ch, cw) != (h, w):
        oy = int(oy_u * (h - ch + 1))
        ox = int(ox_u * (w - cw + 1))
        crop = img[oy:oy + ch, ox:ox + cw]
        t = torch.from_numpy(np.ascontiguousarray(crop)).permute(2, 0, 1)[None]
        img = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
        img = img[0].permute(1, 2, 0).numpy()
    if brightness != 0.0:
        img = img + brightness
    if contrast != 1.0:
        mean = img.mean()
        img = (img - mean) * contrast + mean
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _disc_image(size, background, color, cx, cy, radius):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)[:, :, None]
    img = np.asarray(background)[None, None, :] * (1 - alpha) + np.asarray(color)[None, None, :] * alpha
    return np.clip(img, 0.0, 1.0)


def make_toy_fixture(out_dir, n_images=64, seed=0, image_size=32):
    """Generate the paired-domain toy fixture on disk and in memory.

    Source images are gray discs on a near-white background with exact
    one-disc box labels; target images are colored discs on a dark
    background at unrelated positions, with labels withheld. Output is
    byte-identical for a given seed.

    Returns:
        (source_dataset, target_dataset)
    """
    if n_images < 5:
        raise ValueError("need at least five images for embedding optimization")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    margin = 2

    def quantized(img):
        u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        return u8.astype(np.float32) / 255.0

    source_images, target_images = [], []
    for i in range(n_images):
        r = int(rng.integers(4, 8))
        cx = int(rng.integers(r + margin, image_size - r - margin))
        cy = int(rng.integers(r + margin, image_size - r - margin))
        bg = 0.92 + 0.06 * rng.uniform()
        shade = 0.30 + 0.20 * rng.uniform()
        src = _disc_image(image_size, [bg] * 3, [shade] * 3, cx, cy, r)
        source_images.append(LabeledImage(
            image=quantized(src),
            boxes=[BoundingBox(cx - r, cy - r, 2 * r, 2 * r, class_id=1)],
            identifier=f"source_{i:04d}",
        ))

        r2 = int(rng.integers(4, 8))
        cx2 = int(rng.integers(r2 + margin, image_size - r2 - margin))
        cy2 = int(rng.integers(r2 + margin, image_size - r2 - margin))
        dark = 0.04 + 0.08 * rng.uniform()
        hue = rng.uniform()
        color = colorsys.hsv_to_rgb(hue, 0.85, 0.90)
        tgt = _disc_image(image_size, [dark] * 3, list(color), cx2, cy2, r2)
        target_images.append(LabeledImage(
            image=quantized(tgt), boxes=[], identifier=f"target_{i:04d}",
        ))

    source = DomainDataset("source", source_images, labeled=True)
    target = DomainDataset("target", target_images, labeled=False)
    for ds in (source, target):
        img_dir = out_dir / ds.name / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        for img in ds.images:
            save_image(img.image, img_dir / f"{img.identifier}.png")
        write_coco(ds, out_dir / ds.name / "annotations.json")
    return source, target
