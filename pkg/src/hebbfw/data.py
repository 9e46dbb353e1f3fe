"""Character-image datasets: Omniglot ingestion, a procedural glyph corpus,
the packed cache format and per-image preprocessing."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbones import IMAGENET_MEAN, IMAGENET_STD

log = logging.getLogger(__name__)

OMNIGLOT_SPLITS = ("images_background", "images_evaluation")
OMNIGLOT_URL = "https://github.com/brendenlake/omniglot/raw/master/python/{}.zip"
PACK_MAGIC = b"HFWPACK\x00"
PACK_VERSION = 1


class DataError(RuntimeError):
    """Dataset content cannot satisfy a request."""


class IngestionError(DataError):
    pass


@dataclass
class CharacterDataset:
    """Grayscale glyphs (dark ink on white, uint8) grouped by class id."""

    images: dict[str, np.ndarray]
    extent: tuple[int, int]
    source: str = ""
    meta: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def class_ids(self) -> list[str]:
        return list(self.images)

    @property
    def n_images(self) -> int:
        return sum(len(v) for v in self.images.values())

    def min_per_class(self) -> int:
        return min(len(v) for v in self.images.values())


# ---------------------------------------------------------------------------
# Omniglot


def _decode_png(raw: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(raw)) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def _collect_tree(base: Path, split: str, out: dict, skipped: list) -> None:
    for char_dir in sorted(p for p in (base / split).glob("*/*") if p.is_dir()):
        cid = f"{split}/{char_dir.parent.name}/{char_dir.name}"
        for png in sorted(char_dir.glob("*.png")):
            try:
                out.setdefault(cid, []).append(_decode_png(png.read_bytes()))
            except Exception as exc:  # corrupt file: skip, remember
                log.warning("skipping unreadable image %s: %s", png, exc)
                skipped.append(str(png))


def _collect_zip(path: Path, split: str, out: dict, skipped: list) -> None:
    with zipfile.ZipFile(path) as zf:
        names = sorted(n for n in zf.namelist() if n.endswith(".png"))
        for name in names:
            parts = name.split("/")
            if len(parts) < 4:
                continue
            cid = f"{split}/{parts[-3]}/{parts[-2]}"
            try:
                out.setdefault(cid, []).append(_decode_png(zf.read(name)))
            except Exception as exc:
                log.warning("skipping unreadable image %s in %s: %s", name, path, exc)
                skipped.append(f"{path}:{name}")


def load_omniglot(root) -> CharacterDataset:
    """Pool the background and evaluation splits into one class dictionary.

    Each split may be an extracted directory or the original zip archive.
    Classes are keyed ``split/alphabet/character`` in lexicographic order.
    """
    root = Path(root)
    collected: dict[str, list] = {}
    skipped: list[str] = []
    for split in OMNIGLOT_SPLITS:
        if (root / split).is_dir():
            _collect_tree(root, split, collected, skipped)
        elif (root / f"{split}.zip").is_file():
            _collect_zip(root / f"{split}.zip", split, collected, skipped)
        else:
            raise IngestionError(missing_data_message(root))
    if not collected:
        raise IngestionError(missing_data_message(root))
    images = {}
    extent = None
    for cid in sorted(collected):
        arr = np.stack(collected[cid])
        if extent is None:
            extent = arr.shape[1:]
        elif arr.shape[1:] != extent:
            raise IngestionError(f"class {cid} has extent {arr.shape[1:]}, expected {extent}")
        images[cid] = arr
    return CharacterDataset(images, tuple(extent), source="omniglot", skipped=skipped)


def missing_data_message(root) -> str:
    urls = "\n".join(f"  {OMNIGLOT_URL.format(s)}" for s in OMNIGLOT_SPLITS)
    return (
        f"Omniglot not found under {root}. Expected {OMNIGLOT_SPLITS[0]}/ and {OMNIGLOT_SPLITS[1]}/ "
        f"(or the matching .zip archives). Download:\n{urls}"
    )


# ---------------------------------------------------------------------------
# procedural glyphs


def _stroke_points(rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.35:
        center = rng.uniform(0.35, 0.65, size=2)
        radius = rng.uniform(0.12, 0.3)
        start = rng.uniform(0, 2 * np.pi)
        sweep = rng.uniform(0.6, 1.6) * np.pi * rng.choice([-1, 1])
        t = start + sweep * np.linspace(0, 1, 8)
        return center + radius * np.stack([np.cos(t), np.sin(t)], axis=1)
    return rng.uniform(0.15, 0.85, size=(int(rng.integers(2, 5)), 2))


def _render(strokes: list[np.ndarray], extent: int, half_width: float) -> np.ndarray:
    grid = (np.stack(np.mgrid[0:extent, 0:extent][::-1], axis=-1).reshape(-1, 2) + 0.5)
    a = np.concatenate([s[:-1] for s in strokes]) * extent
    b = np.concatenate([s[1:] for s in strokes]) * extent
    ab = b - a
    t = ((grid[:, None, :] - a[None]) * ab[None]).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-9)[None]
    t = np.clip(t, 0.0, 1.0)
    nearest = a[None] + t[..., None] * ab[None]
    dist = np.sqrt(((grid[:, None, :] - nearest) ** 2).sum(-1)).min(axis=1)
    ink = np.clip(half_width + 0.5 - dist, 0.0, 1.0)
    return np.round(255.0 * (1.0 - ink)).astype(np.uint8).reshape(extent, extent)


def synth_glyphs(n_classes: int, per_class: int, extent: int = 28, seed: int = 7,
                 jitter: float = 0.01, stroke: float = 1.2, rotation_sd: float = 3.0) -> CharacterDataset:
    """Stroke glyphs: each class is a random set of polylines and arcs, each
    sample a jittered, slightly rotated/scaled/shifted copy of it."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("need at least 1 image per class")
    rng = np.random.default_rng(seed)
    half_width = stroke * extent / 28
    images = {}
    for c in range(n_classes):
        proto = [_stroke_points(rng) for _ in range(int(rng.integers(2, 5)))]
        samples = []
        for _ in range(per_class):
            angle = math.radians(rng.normal(0.0, rotation_sd))
            scale = 1.0 + rng.normal(0.0, 0.05)
            shift = rng.normal(0.0, 0.6 / extent, size=2)
            rot = scale * np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
            strokes = [((s + rng.normal(0.0, jitter, size=s.shape) - 0.5) @ rot.T) + 0.5 + shift for s in proto]
            samples.append(_render(strokes, extent, half_width))
        images[f"synth/{c:04d}"] = np.stack(samples)
    meta = {"n_classes": n_classes, "per_class": per_class, "extent": extent, "seed": seed, "jitter": jitter,
            "stroke": stroke, "rotation_sd": rotation_sd}
    return CharacterDataset(images, (extent, extent), source="synth", meta=meta)


def augment_classes(dataset: CharacterDataset, class_ids) -> tuple[CharacterDataset, list[str]]:
    """Add the seven non-identity rotations/reflections of each listed class
    as new classes; returns the enlarged dataset and the enlarged id list."""
    images = dict(dataset.images)
    ids = []
    for cid in class_ids:
        ids.append(cid)
        for k in range(4):
            for flip in (False, True):
                if k == 0 and not flip:
                    continue
                arr = np.rot90(dataset.images[cid], k, axes=(1, 2))
                if flip:
                    arr = arr[:, :, ::-1]
                new_id = f"{cid}/r{k}{'f' if flip else ''}"
                images[new_id] = np.ascontiguousarray(arr)
                ids.append(new_id)
    return CharacterDataset(images, dataset.extent, source=dataset.source, meta=dataset.meta,
                            skipped=dataset.skipped), ids


# ---------------------------------------------------------------------------
# packed cache


def write_pack(dataset: CharacterDataset, path) -> None:
    """Header (magic, version, JSON index) followed by raw uint8 pixels."""
    h, w = dataset.extent
    header = {
        "source": dataset.source,
        "meta": dataset.meta,
        "extent": [h, w],
        "classes": dataset.class_ids,
        "counts": [len(v) for v in dataset.images.values()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(PACK_MAGIC + struct.pack("<II", PACK_VERSION, len(blob)) + blob)
        for arr in dataset.images.values():
            fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())
    tmp.replace(path)


def read_pack_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:8] != PACK_MAGIC:
            raise IngestionError(f"{path} is not a dataset pack")
        version, n = struct.unpack("<II", head[8:])
        if version != PACK_VERSION:
            raise IngestionError(f"{path} has pack version {version}, expected {PACK_VERSION}")
        header = json.loads(fh.read(n))
    header["_offset"] = 16 + n
    return header


def read_pack(path) -> CharacterDataset:
    header = read_pack_header(path)
    h, w = header["extent"]
    raw = Path(path).read_bytes()[header["_offset"]:]
    expected = sum(header["counts"]) * h * w
    if len(raw) != expected:
        raise IngestionError(f"{path} holds {len(raw)} pixel bytes, header promises {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8)
    images, pos = {}, 0
    for cid, count in zip(header["classes"], header["counts"]):
        images[cid] = pixels[pos: pos + count * h * w].reshape(count, h, w)
        pos += count * h * w
    return CharacterDataset(images, (h, w), source=header["source"], meta=header["meta"])


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    target: int = 84
    channels: int = 3
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    crop_pad: int = 8
    hflip_p: float = 0.5
    rotation_deg: float = 15.0
    augment: bool = True

    def __post_init__(self):
        if self.target <= 0:
            raise ValueError("target extent must be positive")
        if self.rotation_deg < 0 or self.crop_pad < 0 or not 0 <= self.hflip_p <= 1:
            raise ValueError("augmentation magnitudes must be non-negative (hflip_p in [0, 1])")
        if len(self.mean) != self.channels or len(self.std) != self.channels:
            raise ValueError("mean/std need one entry per channel")


def _resize(img: np.ndarray, target: int) -> np.ndarray:
    if img.shape == (target, target):
        return img
    return np.asarray(Image.fromarray(img, mode="F").resize((target, target), Image.BILINEAR), dtype=np.float32)


def preprocess(image: np.ndarray, cfg: PreprocessConfig, train_mode: bool = False,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """uint8 grayscale glyph to a normalised ``channels×target×target`` float32 array.

    Training mode (when ``cfg.augment``): pad with white, random crop back,
    horizontal flip, random rotation with white fill. Evaluation only resizes.
    """
    img = _resize(np.asarray(image, dtype=np.float32) / 255.0, cfg.target)
    if train_mode and cfg.augment:
        if rng is None:
            raise ValueError("training-mode preprocessing needs a random stream")
        p = cfg.crop_pad
        if p:
            padded = np.pad(img, p, constant_values=1.0)
            top, left = rng.integers(0, 2 * p + 1, size=2)
            img = padded[top: top + cfg.target, left: left + cfg.target]
        if rng.random() < cfg.hflip_p:
            img = img[:, ::-1]
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) if cfg.rotation_deg else 0.0
        if angle:
            img = np.asarray(
                Image.fromarray(np.ascontiguousarray(img), mode="F").rotate(angle, Image.BILINEAR, fillcolor=1.0),
                dtype=np.float32,
            )
    out = np.repeat(img[None], cfg.channels, axis=0)
    mean = np.asarray(cfg.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(cfg.std, dtype=np.float32)[:, None, None]
    return ((out - mean) / std).astype(np.float32)


def preprocess_batch(images: np.ndarray, cfg: PreprocessConfig, train_mode: bool = False,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    return np.stack([preprocess(img, cfg, train_mode, rng) for img in images])
