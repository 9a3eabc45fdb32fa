"""Image corpora on disk, single-attribute label views, and deterministic batching.

Directory layout::

    <root>/<corpus>/<split>/manifest.jsonl
    <root>/<corpus>/<split>/<relative image paths>

Each manifest line is a UTF-8 JSON object ``{"path": ..., "label": int}`` for
class-labelled corpora or ``{"path": ..., "attributes": [0/1, ...]}`` for
attribute corpora, optionally with ``"sha256"`` of the image file. Nothing in
this module downloads data; see ``scripts/fetch_datasets.py``.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import IntegrityError, NotFoundError, ValidationError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)

CELEBA_ATTRIBUTES = (
    "5_o_Clock_Shadow", "Arched_Eyebrows", "Attractive", "Bags_Under_Eyes", "Bald",
    "Bangs", "Big_Lips", "Big_Nose", "Black_Hair", "Blond_Hair",
    "Blurry", "Brown_Hair", "Bushy_Eyebrows", "Chubby", "Double_Chin",
    "Eyeglasses", "Goatee", "Gray_Hair", "Heavy_Makeup", "High_Cheekbones",
    "Male", "Mouth_Slightly_Open", "Mustache", "Narrow_Eyes", "No_Beard",
    "Oval_Face", "Pale_Skin", "Pointy_Nose", "Receding_Hairline", "Rosy_Cheeks",
    "Sideburns", "Smiling", "Straight_Hair", "Wavy_Hair", "Wearing_Earrings",
    "Wearing_Hat", "Wearing_Lipstick", "Wearing_Necklace", "Wearing_Necktie", "Young",
)


@dataclass(frozen=True)
class CorpusInfo:
    name: str
    kind: str  # "multiclass" or "attributes"
    resolution: int
    class_names: Tuple[str, ...] = ()
    attribute_names: Tuple[str, ...] = ()
    expected_counts: Dict[str, int] = field(default_factory=dict)
    default_limits: Dict[str, int] = field(default_factory=dict)
    center_crop: bool = False

    @property
    def preprocessing(self) -> str:
        if self.center_crop:
            return f"center-crop+resize-{self.resolution}x{self.resolution}"
        return f"none-{self.resolution}x{self.resolution}"


CORPORA: Dict[str, CorpusInfo] = {
    "cifar10": CorpusInfo(
        "cifar10", "multiclass", 32, class_names=CIFAR10_CLASSES,
        expected_counts={"train": 50_000, "test": 10_000},
    ),
    "celeba": CorpusInfo(
        "celeba", "attributes", 64, attribute_names=CELEBA_ATTRIBUTES,
        default_limits={"train": 20_000, "test": 4_000}, center_crop=True,
    ),
    # procedural stand-ins with the same shapes, see tosc_privacy.synthetic
    "synthetic-objects": CorpusInfo(
        "synthetic-objects", "multiclass", 32,
        class_names=("disk", "square", "triangle", "ring", "hstripes",
                     "vstripes", "cross", "diamond", "checker", "diagonal"),
    ),
    "synthetic-faces": CorpusInfo(
        "synthetic-faces", "attributes", 64, attribute_names=CELEBA_ATTRIBUTES,
    ),
}


def corpus_info(name: str) -> CorpusInfo:
    try:
        return CORPORA[name]
    except KeyError:
        raise ValidationError(f"unknown corpus {name!r}; known: {sorted(CORPORA)}") from None


@dataclass(frozen=True, eq=False)
class LabeledImageSet:
    """Immutable image set. ``images`` is ``(N, H, W, C)`` float32 in [0, 1].

    ``labels`` holds class ids ``(N,)`` for multiclass corpora, an ``(N, A)``
    bit matrix for attribute corpora, or ``(N,)`` 0/1 flags after
    :func:`attribute_view`.
    """

    name: str
    split: str
    images: np.ndarray
    labels: np.ndarray
    ids: Tuple[str, ...]
    num_classes: int
    class_names: Tuple[str, ...] = ()
    attribute_names: Tuple[str, ...] = ()
    attribute: Optional[str] = None
    preprocessing: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValidationError("images, labels and ids must have the same length")
        for arr in (self.images, self.labels):
            arr.flags.writeable = False

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def is_multiclass(self) -> bool:
        return self.labels.ndim == 1 and self.attribute is None

    def subset(self, index) -> "LabeledImageSet":
        index = np.asarray(index)
        return replace(
            self,
            images=self.images[index],
            labels=self.labels[index],
            ids=tuple(self.ids[i] for i in index),
        )


# --------------------------------------------------------------------------
# reading
# --------------------------------------------------------------------------

def _read_manifest(path: Path):
    records = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except FileNotFoundError:
        raise NotFoundError(f"manifest not found: {path}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IntegrityError(path, f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "path" not in rec:
                raise IntegrityError(path, f"line {lineno}: record must be an object with a 'path'")
            records.append(rec)
    return records


def _decode(path: Path, info: CorpusInfo, sha256: Optional[str]) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise IntegrityError(path, "image listed in manifest is missing") from None
    if sha256 is not None and hashlib.sha256(raw).hexdigest() != sha256:
        raise IntegrityError(path, "sha256 mismatch")
    try:
        with Image.open(io.BytesIO(raw)) as im:
            im = im.convert("RGB")
            if info.center_crop:
                w, h = im.size
                s = min(w, h)
                left, top = (w - s) // 2, (h - s) // 2
                im = im.crop((left, top, left + s, top + s))
            if im.size != (info.resolution, info.resolution):
                if not info.center_crop:
                    raise IntegrityError(path, f"expected {info.resolution}x{info.resolution}, got {im.size}")
                im = im.resize((info.resolution, info.resolution), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except IntegrityError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for truncated files
        raise IntegrityError(path, f"cannot decode image ({exc})") from None


def _select(records, info: CorpusInfo, limit: Optional[int], seed: int,
            balance_attribute: Optional[str]) -> np.ndarray:
    n = len(records)
    order = np.arange(n)
    if balance_attribute is not None:
        col = info.attribute_names.index(balance_attribute)
        flags = np.array([int(r["attributes"][col]) for r in records])
        pos, neg = np.flatnonzero(flags == 1), np.flatnonzero(flags == 0)
        per_class = (limit if limit is not None else 2 * min(len(pos), len(neg))) // 2
        if per_class > min(len(pos), len(neg)):
            raise ValidationError(
                f"cannot draw {per_class} balanced examples per class for {balance_attribute!r}: "
                f"{len(pos)} positive, {len(neg)} negative"
            )
        rng = np.random.default_rng(seed)
        chosen = np.concatenate([rng.permutation(pos)[:per_class], rng.permutation(neg)[:per_class]])
        return np.sort(chosen)
    if limit is None or limit >= n:
        return order
    return np.sort(np.random.default_rng(seed).permutation(n)[:limit])


_CACHE: Dict[tuple, LabeledImageSet] = {}


def _load_split(info: CorpusInfo, root: Path, split: str, seed: int, limit, balance_attribute):
    split_dir = root / info.name / split
    if not split_dir.is_dir():
        raise NotFoundError(f"split directory not found: {split_dir}")
    manifest = split_dir / "manifest.jsonl"
    records = _read_manifest(manifest)
    expected = info.expected_counts.get(split)
    if expected is not None and limit is None and len(records) != expected:
        raise IntegrityError(manifest, f"expected {expected} records for {info.name}/{split}, found {len(records)}")
    if balance_attribute is not None and info.kind != "attributes":
        raise ValidationError(f"balance_attribute requires an attribute corpus, {info.name} is {info.kind}")
    chosen = _select(records, info, limit, seed, balance_attribute)

    images = np.empty((len(chosen), info.resolution, info.resolution, 3), dtype=np.uint8)
    if info.kind == "multiclass":
        labels = np.empty(len(chosen), dtype=np.int64)
    else:
        labels = np.empty((len(chosen), len(info.attribute_names)), dtype=np.int64)
    ids = []
    for out_i, rec_i in enumerate(chosen):
        rec = records[rec_i]
        images[out_i] = _decode(split_dir / rec["path"], info, rec.get("sha256"))
        if info.kind == "multiclass":
            label = rec.get("label")
            if not isinstance(label, int) or not 0 <= label < len(info.class_names):
                raise IntegrityError(manifest, f"record {rec_i}: label {label!r} outside [0, {len(info.class_names)})")
            labels[out_i] = label
        else:
            bits = rec.get("attributes")
            if not isinstance(bits, list) or len(bits) != len(info.attribute_names) or any(b not in (0, 1) for b in bits):
                raise IntegrityError(manifest, f"record {rec_i}: attributes must be {len(info.attribute_names)} bits")
            labels[out_i] = bits
        ids.append(f"{split}/{rec['path']}")
    return images, labels, ids


def load_dataset(
    name: str,
    root,
    split: str = "train",
    seed: int = 0,
    limit: Optional[int] = None,
    balance_attribute: Optional[str] = None,
) -> LabeledImageSet:
    """Load ``train``, ``test`` or ``all`` (train followed by test) from the on-disk layout.

    ``limit`` draws a seeded subset (kept in manifest order); attribute corpora
    apply their desk-scale default limit when none is given. With
    ``balance_attribute`` the subset holds equally many positives and negatives
    of that attribute.
    """
    info = corpus_info(name)
    if split not in SPLITS + ("all",):
        raise ValidationError(f"split must be one of {SPLITS + ('all',)}, got {split!r}")
    if limit is not None and limit <= 0:
        raise ValidationError(f"limit must be positive, got {limit}")
    if balance_attribute is not None and balance_attribute not in info.attribute_names:
        raise ValidationError(f"unknown attribute {balance_attribute!r}")
    root = Path(root)
    if not root.is_dir():
        raise NotFoundError(f"dataset root not found: {root}")
    if not (root / name).is_dir():
        raise NotFoundError(f"corpus directory not found: {root / name}")

    splits = SPLITS if split == "all" else (split,)
    parts = []
    for s in splits:
        lim = limit if limit is not None else info.default_limits.get(s)
        manifest = root / name / s / "manifest.jsonl"
        stamp = manifest.stat().st_mtime_ns if manifest.exists() else None
        key = (str(root.resolve()), name, s, seed, lim, balance_attribute, stamp)
        if key not in _CACHE:
            _CACHE[key] = _load_split(info, root, s, seed, lim, balance_attribute)
        parts.append(_CACHE[key])

    images = np.concatenate([p[0] for p in parts]).astype(np.float32) / np.float32(255.0)
    labels = np.concatenate([p[1] for p in parts])
    ids = tuple(i for p in parts for i in p[2])
    return LabeledImageSet(
        name=name,
        split=split,
        images=images,
        labels=labels,
        ids=ids,
        num_classes=len(info.class_names) if info.kind == "multiclass" else 2,
        class_names=info.class_names,
        attribute_names=info.attribute_names,
        preprocessing=info.preprocessing,
    )


def clear_cache() -> None:
    _CACHE.clear()


def attribute_view(dataset: LabeledImageSet, attribute: str) -> LabeledImageSet:
    """Relabel an attribute corpus with the 0/1 flag of one attribute; images are shared, not copied."""
    if dataset.attribute is not None:
        if attribute == dataset.attribute:
            return dataset
        raise ValidationError(f"set is already a view of {dataset.attribute!r}")
    if not dataset.attribute_names or dataset.labels.ndim != 2:
        raise ValidationError(f"{dataset.name} has no attribute annotations")
    if attribute not in dataset.attribute_names:
        raise ValidationError(
            f"unknown attribute {attribute!r}; valid names: {', '.join(dataset.attribute_names)}"
        )
    col = dataset.attribute_names.index(attribute)
    return replace(dataset, labels=np.ascontiguousarray(dataset.labels[:, col]),
                   attribute=attribute, num_classes=2)


class Batches:
    """Seeded mini-batch order over a :class:`LabeledImageSet`.

    Indexable and sized; iterating yields ``(images, labels)`` numpy slices.
    """

    def __init__(self, dataset: LabeledImageSet, batch_size: int, seed: int, shuffle: bool = True):
        if not isinstance(batch_size, (int, np.integer)) or batch_size <= 0:
            raise ValidationError(f"batch_size must be a positive integer, got {batch_size!r}")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        n = len(dataset)
        order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
        self.index_batches = [order[i:i + self.batch_size] for i in range(0, n, self.batch_size)]

    def __len__(self):
        return len(self.index_batches)

    def __getitem__(self, i) -> Tuple[np.ndarray, np.ndarray]:
        idx = self.index_batches[i]
        return self.dataset.images[idx], self.dataset.labels[idx]

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for i in range(len(self)):
            yield self[i]


def make_batches(dataset: LabeledImageSet, batch_size: int, seed: int, shuffle: bool = True) -> Batches:
    return Batches(dataset, batch_size, seed, shuffle)


# --------------------------------------------------------------------------
# writing
# --------------------------------------------------------------------------

def write_split(
    root,
    corpus: str,
    split: str,
    images: np.ndarray,
    labels: Optional[Sequence[int]] = None,
    attributes: Optional[np.ndarray] = None,
    compress_level: int = 1,
) -> Path:
    """Write uint8 ``(N, H, W, 3)`` images as PNG files plus ``manifest.jsonl``."""
    if (labels is None) == (attributes is None):
        raise ValidationError("pass exactly one of labels or attributes")
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4 or images.shape[-1] != 3:
        raise ValidationError(f"images must be uint8 (N, H, W, 3), got {images.dtype} {images.shape}")
    split_dir = Path(root) / corpus / split
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(images))))
    tmp = split_dir / "manifest.jsonl.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for i, img in enumerate(images):
            rel = f"images/{i:0{width}d}.png"
            buf = io.BytesIO()
            Image.fromarray(img).save(buf, format="PNG", compress_level=compress_level)
            raw = buf.getvalue()
            (split_dir / rel).write_bytes(raw)
            rec = {"path": rel, "sha256": hashlib.sha256(raw).hexdigest()}
            if labels is not None:
                rec["label"] = int(labels[i])
            else:
                rec["attributes"] = [int(b) for b in attributes[i]]
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, split_dir / "manifest.jsonl")
    return split_dir
