"""Synthetic multimodality detection data, COCO ingestion, and batch sampling.

The synthetic generator draws simple shapes (circle/square/triangle/ring/
blob) on modality-specific backgrounds. Class vocabularies are disjoint
across modalities, but the shape assigned to a class depends only on its
local index, so the same silhouette can mean different classes in different
modalities -- resolving it requires modality context. Boxes are derived
from the rendered mask, so annotations are exact by construction. Images
are quantized to float32 values at generation time so the raw-blob export
is lossless.

On-disk formats:
  * dataset dir: ``manifest.json`` + ``images.bin`` (little-endian f32,
    one H*W block per sample, offsets in the manifest);
  * standalone image files: ``.rawf32`` (magic ``RAWF32\\0`` + uint32 H, W
    little-endian + H*W f32) or 8-bit binary/ASCII PGM;
  * COCO-style JSON (images / annotations with absolute-pixel
    ``bbox=[x,y,w,h]`` / categories).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, IngestError, ValidationError
from .tokens import TokenProjection, TokenRegistry, project_token

_RAWF32_MAGIC = b"RAWF32\x00"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    box: tuple  # (cx, cy, w, h) normalized to [0, 1]
    class_id: int  # index into the global class list

    def validate(self) -> "Annotation":
        cx, cy, w, h = self.box
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise ValidationError(f"box center outside unit square: {self.box}")
        if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
            raise ValidationError(f"box extent must be in (0, 1]: {self.box}")
        if cx - w / 2 < -1e-9 or cx + w / 2 > 1 + 1e-9 or cy - h / 2 < -1e-9 or cy + h / 2 > 1 + 1e-9:
            raise ValidationError(f"box leaves the unit square: {self.box}")
        return self


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float64 in [0, 1]
    modality_id: int
    annotations: list
    sample_id: str

    @property
    def class_ids(self) -> list:
        return [a.class_id for a in self.annotations]


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    classes: tuple  # class names, disjoint across modalities
    curve: int = 0  # intensity transfer curve id, 0..4
    noise_sigma: float = 0.02
    texture_freq: float = 2.0


@dataclass
class DatasetSpec:
    modalities: list  # of ModalitySpec
    image_size: int = 64
    counts: dict = field(default_factory=lambda: {"train": 200, "val": 100})
    seed: int = 0
    size_range: tuple = (5, 20)  # object extent in pixels
    objects_range: tuple = (1, 4)

    def __post_init__(self):
        if len(self.modalities) < 2:
            raise ValidationError("need at least 2 modalities")
        if self.image_size < 16:
            raise ValidationError("image_size must be >= 16")
        seen = set()
        for m in self.modalities:
            for c in m.classes:
                if c in seen:
                    raise ValidationError(f"class vocabularies must be disjoint: {c!r}")
                seen.add(c)

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def modality_names(self) -> list:
        return [m.name for m in self.modalities]

    @property
    def global_classes(self) -> list:
        return [c for m in self.modalities for c in m.classes]

    def class_offset(self, modality_id: int) -> int:
        return sum(len(m.classes) for m in self.modalities[:modality_id])

    def global_class_ids(self, modality_id: int) -> list:
        off = self.class_offset(modality_id)
        return list(range(off, off + len(self.modalities[modality_id].classes)))

    def modality_of_class(self, class_id: int) -> int:
        for mi in range(self.n_modalities):
            if class_id in self.global_class_ids(mi):
                return mi
        raise ValidationError(f"class id {class_id} undeclared")

    def token_pairs(self) -> list:
        return [(m.name, c) for m in self.modalities for c in m.classes]

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size,
            "counts": dict(self.counts),
            "seed": self.seed,
            "size_range": list(self.size_range),
            "objects_range": list(self.objects_range),
            "modalities": [
                {"name": m.name, "classes": list(m.classes), "curve": m.curve,
                 "noise_sigma": m.noise_sigma, "texture_freq": m.texture_freq}
                for m in self.modalities
            ],
        }

    @staticmethod
    def from_json(doc: dict) -> "DatasetSpec":
        try:
            mods = [ModalitySpec(name=m["name"], classes=tuple(m["classes"]),
                                 curve=int(m.get("curve", 0)),
                                 noise_sigma=float(m.get("noise_sigma", 0.02)),
                                 texture_freq=float(m.get("texture_freq", 2.0)))
                    for m in doc["modalities"]]
            return DatasetSpec(modalities=mods,
                               image_size=int(doc.get("image_size", 64)),
                               counts={k: int(v) for k, v in doc.get(
                                   "counts", {"train": 200, "val": 100}).items()},
                               seed=int(doc.get("seed", 0)),
                               size_range=tuple(doc.get("size_range", (5, 20))),
                               objects_range=tuple(doc.get("objects_range", (1, 4))))
        except (KeyError, TypeError) as e:
            raise ValidationError(f"bad dataset spec: {e}") from e


def make_default_spec(seed: int = 0, counts=None) -> DatasetSpec:
    """Five modalities, two classes each; appearance is shared pairwise so
    shape identity alone cannot resolve the class."""
    counts = counts or {"train": 200, "val": 100}
    mods = [
        ModalitySpec("cxr", ("cxr_round_lesion", "cxr_block_lesion"), curve=0,
                     noise_sigma=0.05, texture_freq=2.0),
        ModalitySpec("ct", ("ct_round_lesion", "ct_block_lesion"), curve=0,
                     noise_sigma=0.05, texture_freq=2.0),
        ModalitySpec("mri", ("mri_round_focus", "mri_block_focus"), curve=3,
                     noise_sigma=0.04, texture_freq=4.0),
        ModalitySpec("endoscopy", ("endo_round_polyp", "endo_block_polyp"), curve=3,
                     noise_sigma=0.04, texture_freq=4.0),
        ModalitySpec("pathology", ("path_round_cell", "path_block_cell"), curve=2,
                     noise_sigma=0.03, texture_freq=8.0),
    ]
    return DatasetSpec(modalities=mods, counts=counts, seed=seed)


# ---------------------------------------------------------------------------
# synthetic rendering
# ---------------------------------------------------------------------------

_SHAPES = ("circle", "square", "triangle", "ring", "blob")


def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    s = max(int(size), 2)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy = cx = (s - 1) / 2.0
    r = s / 2.0
    if shape == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif shape == "square":
        mask = np.ones((s, s), dtype=bool)
    elif shape == "triangle":
        # upward triangle: row i spans a widening band
        half = (yy + 1) / s * r
        mask = np.abs(xx - cx) <= half
    elif shape == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        inner = max(r * 0.55, 0.5)
        mask = (d2 <= r * r) & (d2 >= inner * inner)
    elif shape == "blob":
        mask = np.zeros((s, s), dtype=bool)
        for _ in range(int(rng.integers(2, 4))):
            by, bx = rng.uniform(0.25 * s, 0.75 * s, size=2)
            br = rng.uniform(0.25 * s, 0.45 * s)
            mask |= (yy - by) ** 2 + (xx - bx) ** 2 <= br * br
    else:
        raise ValidationError(f"unknown shape {shape!r}")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]  # tight crop


def _apply_curve(img: np.ndarray, curve: int) -> np.ndarray:
    x = np.clip(img, 0.0, 1.0)
    if curve == 0:
        return x
    if curve == 1:
        return np.sqrt(x)
    if curve == 2:
        return x * x
    if curve == 3:
        return x * x * (3.0 - 2.0 * x)  # smoothstep
    if curve == 4:
        return 1.0 - x
    raise ValidationError(f"unknown intensity curve id {curve}")


def shape_of_class(local_class_index: int) -> str:
    return _SHAPES[local_class_index % len(_SHAPES)]


def _split_code(split: str) -> int:
    h = 0xCBF29CE484222325
    for b in split.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & ((1 << 64) - 1)
    return h % (1 << 31)


def _boxes_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def _render_sample(spec: DatasetSpec, modality_id: int, split: str,
                   index: int) -> Sample:
    mod = spec.modalities[modality_id]
    size = spec.image_size
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, _split_code(split), modality_id, index]))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0, 2 * math.pi, size=2)
    img = 0.32 + 0.10 * np.sin(2 * math.pi * mod.texture_freq * xx + phase[0]) \
                      * np.sin(2 * math.pi * mod.texture_freq * yy + phase[1])
    img += 0.06 * (xx - 0.5) * rng.uniform(-1, 1)

    n_objects = int(rng.integers(spec.objects_range[0], spec.objects_range[1] + 1))
    annotations = []
    placed_xyxy = []
    for _ in range(n_objects):
        local_cls = int(rng.integers(0, len(mod.classes)))
        extent = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        mask = _shape_mask(shape_of_class(local_cls), extent, rng)
        mh, mw = mask.shape
        for _attempt in range(10):
            r0 = int(rng.integers(1, size - mh)) if size - mh > 1 else 0
            c0 = int(rng.integers(1, size - mw)) if size - mw > 1 else 0
            xyxy = (c0, r0, c0 + mw, r0 + mh)
            if all(_boxes_iou(xyxy, p) < 0.3 for p in placed_xyxy):
                break
        placed_xyxy.append(xyxy)
        level = rng.uniform(0.72, 0.95)
        region = img[r0:r0 + mh, c0:c0 + mw]
        region[mask] = level
        box = ((c0 + mw / 2.0) / size, (r0 + mh / 2.0) / size, mw / size, mh / size)
        annotations.append(Annotation(box=box,
                                      class_id=spec.class_offset(modality_id) + local_cls).validate())

    img = _apply_curve(img, mod.curve)
    if mod.noise_sigma > 0:
        img = img + rng.normal(0.0, mod.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img = np.float64(np.float32(img))  # lossless raw-f32 export
    return Sample(image=img, modality_id=modality_id, annotations=annotations,
                  sample_id=f"{split}-{mod.name}-{index}")


def generate_synthetic(spec: DatasetSpec, split: str) -> list:
    """Deterministic sample list for one split; uniform modality allocation."""
    if split not in spec.counts:
        raise ValidationError(f"split {split!r} not declared in counts")
    total = int(spec.counts[split])
    m = spec.n_modalities
    out = []
    for mi in range(m):
        n_mi = total // m + (1 if mi < total % m else 0)
        for k in range(n_mi):
            out.append(_render_sample(spec, mi, split, k))
    return out


# ---------------------------------------------------------------------------
# image file IO
# ---------------------------------------------------------------------------


def write_rawf32(path, image: np.ndarray) -> None:
    img32 = np.asarray(image, dtype=np.float32)
    if img32.ndim != 2:
        raise ValidationError("rawf32 stores a single 2-d image")
    h, w = img32.shape
    with open(path, "wb") as fh:
        fh.write(_RAWF32_MAGIC)
        fh.write(np.array([h, w], dtype="<u4").tobytes())
        fh.write(img32.astype("<f4").tobytes())


def read_rawf32(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(_RAWF32_MAGIC))
        if magic != _RAWF32_MAGIC:
            raise IngestError(f"{path}: not a rawf32 file")
        h, w = np.frombuffer(fh.read(8), dtype="<u4")
        data = np.frombuffer(fh.read(int(h) * int(w) * 4), dtype="<f4")
        if data.size != int(h) * int(w):
            raise IngestError(f"{path}: truncated rawf32 payload")
    return data.reshape(int(h), int(w)).astype(np.float64)


def read_pgm(path) -> np.ndarray:
    """Minimal 8-bit PGM (P2/P5) reader; values scaled to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()

    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i:i + 1].isspace():
            i += 1
        if start == i:
            raise IngestError(f"{path}: truncated PGM header")
        tokens.append(blob[start:i])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P2", b"P5") or maxval <= 0 or maxval > 255:
        raise IngestError(f"{path}: unsupported PGM variant")
    if magic == b"P5":
        data = np.frombuffer(blob[i + 1:i + 1 + w * h], dtype=np.uint8)
        if data.size != w * h:
            raise IngestError(f"{path}: truncated PGM payload")
    else:
        vals = blob[i:].split()
        if len(vals) < w * h:
            raise IngestError(f"{path}: truncated PGM payload")
        data = np.array([int(v) for v in vals[:w * h]], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / float(maxval)


def load_image(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".rawf32"):
        return read_rawf32(path)
    if path.endswith(".pgm"):
        return read_pgm(path)
    raise IngestError(f"unsupported image format: {path}")


# ---------------------------------------------------------------------------
# dataset export / load (manifest + raw blob)
# ---------------------------------------------------------------------------


def export_dataset(samples, spec: DatasetSpec, out_dir, split: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    blob_name = f"{split}_images.bin"
    records = []
    with open(os.path.join(out_dir, blob_name), "wb") as fh:
        offset = 0
        for s in samples:
            img32 = s.image.astype("<f4")
            fh.write(img32.tobytes())
            records.append({
                "id": s.sample_id,
                "modality_id": s.modality_id,
                "offset": offset,
                "classes": [a.class_id for a in s.annotations],
                "boxes": [list(a.box) for a in s.annotations],
            })
            offset += img32.size * 4
    manifest = {
        "format": "mocadet-dataset-v1",
        "split": split,
        "image_size": spec.image_size,
        "blob": blob_name,
        "modalities": spec.modality_names,
        "global_classes": spec.global_classes,
        "dataset_spec": spec.to_json(),
        "samples": records,
    }
    path = os.path.join(out_dir, f"{split}_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
    return path


def load_dataset(out_dir, split: str):
    """Returns (samples, DatasetSpec)."""
    path = os.path.join(out_dir, f"{split}_manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise IngestError(f"cannot read manifest {path}: {e}") from e
    if manifest.get("format") != "mocadet-dataset-v1":
        raise IngestError(f"{path}: unknown manifest format")
    size = int(manifest["image_size"])
    blob = np.fromfile(os.path.join(out_dir, manifest["blob"]), dtype="<f4")
    samples = []
    for rec in manifest["samples"]:
        start = rec["offset"] // 4
        img = blob[start:start + size * size].astype(np.float64).reshape(size, size)
        anns = [Annotation(box=tuple(b), class_id=int(c)).validate()
                for b, c in zip(rec["boxes"], rec["classes"])]
        samples.append(Sample(image=img, modality_id=int(rec["modality_id"]),
                              annotations=anns, sample_id=rec["id"]))
    return samples, DatasetSpec.from_json(manifest["dataset_spec"])


# ---------------------------------------------------------------------------
# COCO-style JSON
# ---------------------------------------------------------------------------


def export_coco(samples, spec: DatasetSpec, out_dir, split: str) -> str:
    """COCO-style annotations + one .rawf32 image file per sample."""
    img_dir = os.path.join(out_dir, f"{split}_images")
    os.makedirs(img_dir, exist_ok=True)
    size = spec.image_size
    images, annotations = [], []
    ann_id = 1
    for idx, s in enumerate(samples):
        fname = f"{s.sample_id}.rawf32"
        write_rawf32(os.path.join(img_dir, fname), s.image)
        images.append({"id": idx + 1, "file_name": fname, "width": size, "height": size})
        for a in s.annotations:
            cx, cy, w, h = a.box
            annotations.append({
                "id": ann_id,
                "image_id": idx + 1,
                "category_id": a.class_id + 1,
                "bbox": [(cx - w / 2) * size, (cy - h / 2) * size, w * size, h * size],
            })
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": c} for i, c in enumerate(spec.global_classes)],
    }
    path = os.path.join(out_dir, f"{split}_coco.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
    return path


def ingest_coco(annotation_json_path, image_dir, modality_name: str, *,
                modality_id: int = 0, class_to_id=None, fail_fast: bool = True):
    """Load a COCO-style annotation file.

    ``class_to_id`` maps category names to global class ids; without it,
    categories are numbered by their order in the file. Returns
    (samples, error_records); with ``fail_fast`` the first record error
    raises IngestError instead. Structural defects (duplicate image ids,
    unparseable JSON) always raise.
    """
    try:
        with open(annotation_json_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise IngestError(f"cannot read COCO json: {e}") from e
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise IngestError(f"COCO json missing {key!r}")

    cat_name = {int(c["id"]): c["name"] for c in doc["categories"]}
    if class_to_id is None:
        class_to_id = {c["name"]: i for i, c in enumerate(doc["categories"])}

    seen_ids = set()
    images = {}
    for im in doc["images"]:
        iid = int(im["id"])
        if iid in seen_ids:
            raise IngestError(f"duplicate image id {iid}")
        seen_ids.add(iid)
        images[iid] = im

    by_image = {iid: [] for iid in images}
    for ann in doc["annotations"]:
        iid = int(ann["image_id"])
        if iid not in by_image:
            raise IngestError(f"annotation {ann.get('id')} references unknown image {iid}")
        by_image[iid].append(ann)

    samples, errors = [], []

    def record_error(msg):
        if fail_fast:
            raise IngestError(msg)
        errors.append(msg)

    for iid in sorted(images):
        im = images[iid]
        w_img, h_img = float(im["width"]), float(im["height"])
        path = os.path.join(image_dir, im["file_name"])
        if not os.path.exists(path):
            record_error(f"missing image file {path}")
            continue
        img = load_image(path)
        anns = []
        ok = True
        for ann in by_image[iid]:
            x, y, w, h = (float(v) for v in ann["bbox"])
            if (x < -1.0 or y < -1.0 or x + w > w_img + 1.0 or y + h > h_img + 1.0
                    or w <= 0 or h <= 0):
                record_error(f"image {iid}: bbox {ann['bbox']} outside bounds")
                ok = False
                continue
            x, y = max(x, 0.0), max(y, 0.0)
            w, h = min(w, w_img - x), min(h, h_img - y)
            name = cat_name.get(int(ann["category_id"]))
            if name is None or name not in class_to_id:
                record_error(f"image {iid}: unknown category {ann['category_id']}")
                ok = False
                continue
            anns.append(Annotation(
                box=((x + w / 2) / w_img, (y + h / 2) / h_img, w / w_img, h / h_img),
                class_id=class_to_id[name]).validate())
        if ok or not fail_fast:
            samples.append(Sample(image=img, modality_id=modality_id,
                                  annotations=anns,
                                  sample_id=os.path.splitext(im["file_name"])[0]))
    return samples, errors


# ---------------------------------------------------------------------------
# modality-balanced batch sampler
# ---------------------------------------------------------------------------


class ModalityBatchSampler:
    """Round-robin per-modality queues with the distinct-modality guarantee.

    Every batch holds one sample from each of B pairwise-distinct
    modalities; when B < M the covered subset is drawn uniformly per batch.
    Queues reshuffle per epoch with the epoch index mixed into the seed, so
    epochs differ but runs reproduce.
    """

    def __init__(self, samples, n_modalities: int, batch_size: int, seed: int = 0,
                 shuffle: bool = True):
        if batch_size > n_modalities:
            raise ContractError(
                f"batch size {batch_size} exceeds modality count {n_modalities}; "
                "batches must cover pairwise-distinct modalities")
        if batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        self.per_modality = [[] for _ in range(n_modalities)]
        for s in samples:
            self.per_modality[s.modality_id].append(s)
        empty = [i for i, q in enumerate(self.per_modality) if not q]
        if empty:
            raise ValidationError(f"modalities with no samples: {empty}")
        self.batch_size = batch_size
        self.n_modalities = n_modalities
        self.seed = seed
        self.shuffle = shuffle
        self._subset_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        self._epochs = [0] * n_modalities
        self._queues = [self._fresh_queue(i) for i in range(n_modalities)]

    def _fresh_queue(self, mi: int) -> list:
        order = list(range(len(self.per_modality[mi])))
        if self.shuffle:
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, 1 + mi, self._epochs[mi]]))
            rng.shuffle(order)
        return order

    def _pop(self, mi: int) -> Sample:
        if not self._queues[mi]:
            self._epochs[mi] += 1
            self._queues[mi] = self._fresh_queue(mi)
        return self.per_modality[mi][self._queues[mi].pop(0)]

    def next_batch(self) -> list:
        if self.batch_size == self.n_modalities:
            chosen = list(range(self.n_modalities))
        else:
            chosen = sorted(self._subset_rng.permutation(self.n_modalities)[:self.batch_size].tolist())
        batch = [self._pop(mi) for mi in chosen]
        mods = [s.modality_id for s in batch]
        if len(set(mods)) != len(mods):
            raise ContractError(f"distinct-modality constraint violated: {mods}")
        return batch


# ---------------------------------------------------------------------------
# token attachment
# ---------------------------------------------------------------------------


def modality_mean_token(spec: DatasetSpec, registry: TokenRegistry,
                        projection: TokenProjection, modality_id: int) -> ad.Tensor:
    """Mean over the projected tokens of every class declared for a modality."""
    mod_name = spec.modality_names[modality_id]
    if mod_name not in registry.modality_list:
        from .errors import TokenLookupError
        raise TokenLookupError(f"modality {mod_name!r} absent from registry")
    names = [spec.global_classes[cid] for cid in spec.global_class_ids(modality_id)]
    projected = [ad.reshape(project_token(registry, projection, mod_name, c),
                            (1, projection.d_model)) for c in names]
    return ad.mean_rows(ad.concat_rows(projected))


def attach_token(sample: Sample, spec: DatasetSpec, registry: TokenRegistry,
                 projection: TokenProjection, mode: str = "train",
                 rng: np.random.Generator | None = None):
    """Model-space token for a sample.

    train: one of the sample's ground-truth classes, drawn uniformly with
    ``rng`` (deterministic given the seed); empty images fall back to the
    modality mean. inference: mean over the projected tokens of every class
    declared for the sample's modality (no label information used).
    Returns (token Tensor, class_name or None for the mean fallback).
    """
    mod_name = spec.modality_names[sample.modality_id]
    if mod_name not in registry.modality_list:
        from .errors import TokenLookupError
        raise TokenLookupError(f"modality {mod_name!r} absent from registry")

    if mode == "train" and sample.annotations:
        if rng is None:
            raise ValidationError("train-mode attach_token needs an rng")
        classes = sorted({a.class_id for a in sample.annotations})
        cid = classes[int(rng.integers(0, len(classes)))]
        cname = spec.global_classes[cid]
        return project_token(registry, projection, mod_name, cname), cname
    if mode not in ("train", "inference"):
        raise ValidationError(f"unknown attach_token mode {mode!r}")
    return modality_mean_token(spec, registry, projection, sample.modality_id), None
