"""Synthetic scenes, captions and region/grid features, plus the on-disk dataset container.

Region vectors carry clean object identity but no background; grid vectors
carry an area-weighted mixture of whatever overlaps each cell plus the
background colour. Captions need both: object attributes, a spatial relation
and the background colour.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .geometry import GridLayout, boxes_array
from .numerics.io import FormatError, load_tensor, read_tensor, write_tensor

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green", "yellow")
SIZES = ("small", "large")
BACKGROUNDS = ("white", "black", "gray", "brown")

# canonical word -> alternatives used in the non-canonical references
SYNONYMS = {
    "large": ("big",),
    "small": ("little",),
    "circle": ("disk",),
    "square": ("box",),
    "above": ("over",),
    "below": ("under",),
    "on": ("with",),
}
RELATIONS = {"left": ("left", "of"), "right": ("right", "of"), "above": ("above",), "below": ("below",)}

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
SPLITS = ("train", "val", "test")
N_REFS = 5
VARIANT_PROB = 0.05
NOISE = 0.05
MIN_CENTER_DIST = 0.1
ATTR_DIM = len(SHAPES) + len(COLORS) + len(SIZES)

DATASET_MAGIC = b"DLDS"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


def grammar_words() -> list[str]:
    words = {"a", "background", "of", "on"}
    words.update(SHAPES, COLORS, SIZES, BACKGROUNDS)
    for rel in RELATIONS.values():
        words.update(rel)
    for alts in SYNONYMS.values():
        words.update(alts)
    return sorted(words)


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return re.sub(r"[^\w\s]", " ", text.lower()).split()


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...]

    @classmethod
    def default(cls) -> "Vocab":
        return cls(SPECIALS + tuple(grammar_words()))

    @classmethod
    def from_captions(cls, captions: Iterable[str]) -> "Vocab":
        seen = sorted({w for c in captions for w in tokenize(c)})
        return cls(SPECIALS + tuple(seen))

    def __len__(self) -> int:
        return len(self.words)

    @property
    def index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.words)}

    def encode(self, text: str | Sequence[str]) -> list[int]:
        toks = tokenize(text) if isinstance(text, str) else text
        idx = self.index
        return [idx.get(t, UNK) for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.words[i])
        return out


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    box: tuple[float, float, float, float]

    @property
    def area(self) -> float:
        return (self.box[2] - self.box[0]) * (self.box[3] - self.box[1])


@dataclass(frozen=True)
class SyntheticScene:
    objects: tuple[SceneObject, ...]
    background: str


@dataclass
class FeatureBundle:
    region_feats: np.ndarray   # [N_R, d_region]
    grid_feats: np.ndarray     # [rows*cols, d_grid]
    boxes: np.ndarray          # [N_R, 4] corner quads
    layout: GridLayout

    @property
    def n_regions(self) -> int:
        return len(self.boxes)

    def __eq__(self, other) -> bool:
        return (isinstance(other, FeatureBundle) and self.layout == other.layout
                and np.array_equal(self.region_feats, other.region_feats)
                and np.array_equal(self.grid_feats, other.grid_feats)
                and np.array_equal(self.boxes, other.boxes))


@dataclass
class TrainExample:
    bundle: FeatureBundle
    captions: list[list[int]]
    scene: SyntheticScene | None = field(default=None, compare=False)

    def __eq__(self, other) -> bool:
        return isinstance(other, TrainExample) and self.bundle == other.bundle and self.captions == other.captions


@dataclass
class Dataset:
    splits: dict[str, list[TrainExample]]
    vocab: Vocab
    layout: GridLayout
    d_region: int
    d_grid: int
    meta: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.vocab == other.vocab and self.layout == other.layout
                and self.d_region == other.d_region and self.d_grid == other.d_grid
                and self.splits.keys() == other.splits.keys()
                and all(self.splits[k] == other.splits[k] for k in self.splits))

    def fingerprint(self) -> str:
        """Hash of everything a model depends on: vocabulary, feature dims and grid."""
        key = json.dumps([list(self.vocab.words), self.d_region, self.d_grid, str(self.layout)])
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def manifest(self) -> dict:
        return {
            "format": "dlct-dataset",
            "version": DATASET_VERSION,
            "counts": {k: len(v) for k, v in self.splits.items()},
            "d_region": self.d_region,
            "d_grid": self.d_grid,
            "grid": str(self.layout),
            "vocab": list(self.vocab.words),
            **self.meta,
        }


# -- scene generation ------------------------------------------------------

def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def sample_scene(rng: np.random.Generator, max_objects: int = 6) -> SyntheticScene:
    n = int(rng.integers(1, max_objects + 1))
    objects: list[SceneObject] = []
    centers: list[tuple[float, float]] = []
    while len(objects) < n:
        size = SIZES[int(rng.integers(2))]
        lo, hi = (0.12, 0.22) if size == "small" else (0.3, 0.45)
        w, h = rng.uniform(lo, hi, size=2)
        cx = rng.uniform(w / 2 + 0.005, 1 - w / 2 - 0.005)
        cy = rng.uniform(h / 2 + 0.005, 1 - h / 2 - 0.005)
        shape, color = SHAPES[int(rng.integers(3))], COLORS[int(rng.integers(4))]
        if any(np.hypot(cx - px, cy - py) < MIN_CENTER_DIST for px, py in centers):
            continue
        # attribute triples are unique within a scene
        if any((o.shape, o.color, o.size) == (shape, color, size) for o in objects):
            continue
        box = tuple(float(v) for v in _f32([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]))
        centers.append((cx, cy))
        objects.append(SceneObject(shape, color, size, box))
    return SyntheticScene(tuple(objects), BACKGROUNDS[int(rng.integers(4))])


def salient_pair(scene: SyntheticScene) -> tuple[int, int | None]:
    """Indices of the largest object and, when present, the second largest."""
    order = sorted(range(len(scene.objects)), key=lambda i: (-scene.objects[i].area, i))
    return order[0], (order[1] if len(order) > 1 else None)


def relation(a: SceneObject, b: SceneObject) -> str:
    ax, ay = (a.box[0] + a.box[2]) / 2, (a.box[1] + a.box[3]) / 2
    bx, by = (b.box[0] + b.box[2]) / 2, (b.box[1] + b.box[3]) / 2
    dx, dy = ax - bx, ay - by
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "above" if dy < 0 else "below"


def canonical_caption(scene: SyntheticScene) -> list[str]:
    i, j = salient_pair(scene)
    a = scene.objects[i]
    words = ["a", a.size, a.color, a.shape]
    if j is not None:
        b = scene.objects[j]
        words += list(RELATIONS[relation(a, b)]) + ["a", b.size, b.color, b.shape]
    words += ["on", "a", scene.background, "background"]
    return words


def caption_references(scene: SyntheticScene, rng: np.random.Generator, n_refs: int = N_REFS) -> list[list[str]]:
    """First reference is canonical; the rest swap in synonyms word by word."""
    base = canonical_caption(scene)
    refs = [base]
    for _ in range(n_refs - 1):
        refs.append([SYNONYMS[w][0] if w in SYNONYMS and rng.random() < VARIANT_PROB else w for w in base])
    return refs


def _attributes(obj: SceneObject) -> np.ndarray:
    v = np.zeros(ATTR_DIM)
    v[SHAPES.index(obj.shape)] = 1.0
    v[len(SHAPES) + COLORS.index(obj.color)] = 1.0
    v[len(SHAPES) + len(COLORS) + SIZES.index(obj.size)] = 1.0
    return v


def region_colors(bundle: FeatureBundle) -> list[str]:
    """Colour word of each region, read back from its noisy attribute slots."""
    block = bundle.region_feats[:, len(SHAPES):len(SHAPES) + len(COLORS)]
    return [COLORS[i] for i in np.argmax(block, axis=1)]


def scene_features(scene: SyntheticScene, layout: GridLayout, rng: np.random.Generator,
                   d_region: int = 32, d_grid: int = 16) -> FeatureBundle:
    if d_region < ATTR_DIM or d_grid < ATTR_DIM + len(BACKGROUNDS):
        raise DatasetError("feature dims too small for the attribute encoding")
    boxes = np.array([o.box for o in scene.objects])
    regions = np.zeros((len(boxes), d_region))
    for i, obj in enumerate(scene.objects):
        regions[i, :ATTR_DIM] = _attributes(obj)
    regions += rng.normal(0.0, NOISE, size=regions.shape)

    cells = layout.boxes()
    cell_area = (1.0 / layout.rows) * (1.0 / layout.cols)
    grids = np.zeros((layout.size, d_grid))
    covered = np.zeros(layout.size)
    for obj, box in zip(scene.objects, boxes):
        w = np.clip(np.minimum(cells[:, 2], box[2]) - np.maximum(cells[:, 0], box[0]), 0, None)
        h = np.clip(np.minimum(cells[:, 3], box[3]) - np.maximum(cells[:, 1], box[1]), 0, None)
        frac = w * h / cell_area
        grids[:, :ATTR_DIM] += frac[:, None] * _attributes(obj)
        covered += frac
    bg = np.zeros(len(BACKGROUNDS))
    bg[BACKGROUNDS.index(scene.background)] = 1.0
    grids[:, ATTR_DIM:ATTR_DIM + len(BACKGROUNDS)] = np.clip(1.0 - covered, 0.0, 1.0)[:, None] * bg
    grids += rng.normal(0.0, NOISE, size=grids.shape)
    return FeatureBundle(_f32(regions), _f32(grids), boxes, layout)


def make_example(index: int, seed: int, layout: GridLayout, vocab: Vocab,
                 d_region: int = 32, d_grid: int = 16) -> TrainExample:
    rng = np.random.default_rng([seed, index])
    scene = sample_scene(rng)
    bundle = scene_features(scene, layout, rng, d_region, d_grid)
    caps = [vocab.encode(r) for r in caption_references(scene, rng)]
    return TrainExample(bundle, caps, scene)


def generate_corpus(n: int, seed: int, layout: GridLayout | None = None,
                    d_region: int = 32, d_grid: int = 16) -> Dataset:
    """Deterministic corpus, split 90/5/5 by index."""
    if n < 10:
        raise DatasetError(f"corpus needs at least 10 examples, got {n}")
    layout = layout or GridLayout(4, 4)
    vocab = Vocab.default()
    examples = [make_example(i, seed, layout, vocab, d_region, d_grid) for i in range(n)]
    n_train = int(round(0.9 * n))
    n_val = (n - n_train) // 2
    splits = {
        "train": examples[:n_train],
        "val": examples[n_train:n_train + n_val],
        "test": examples[n_train + n_val:],
    }
    return Dataset(splits, vocab, layout, d_region, d_grid, {"n": n, "seed": seed})


# -- container I/O ---------------------------------------------------------

def _write_split(fh: BinaryIO, examples: Sequence[TrainExample]) -> None:
    fh.write(DATASET_MAGIC)
    fh.write(struct.pack("<II", DATASET_VERSION, len(examples)))
    for ex in examples:
        b = ex.bundle
        fh.write(struct.pack("<I", b.n_regions))
        fh.write(np.asarray(b.boxes, dtype="<f4").tobytes())
        write_tensor(fh, b.region_feats)
        write_tensor(fh, b.grid_feats)
        fh.write(struct.pack("<I", len(ex.captions)))
        for cap in ex.captions:
            fh.write(struct.pack("<I", len(cap)))
            fh.write(np.asarray(cap, dtype="<u4").tobytes())


def _unpack(fh: BinaryIO, fmt: str, what: str):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError(f"truncated {what}")
    return struct.unpack(fmt, buf)


def _read_split(fh: BinaryIO, layout: GridLayout, name: str) -> list[TrainExample]:
    magic = fh.read(4)
    if magic != DATASET_MAGIC:
        raise DatasetError(f"{name}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    version, count = _unpack(fh, "<II", "header")
    if version != DATASET_VERSION:
        raise DatasetError(f"{name}: unsupported version {version}")
    out = []
    for i in range(count):
        try:
            (nr,) = _unpack(fh, "<I", "region count")
            raw = fh.read(16 * nr)
            if len(raw) != 16 * nr:
                raise FormatError("truncated boxes")
            boxes = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(nr, 4)
            regions = read_tensor(fh)
            grids = read_tensor(fh)
            (ncap,) = _unpack(fh, "<I", "caption count")
            caps = []
            for _ in range(ncap):
                (length,) = _unpack(fh, "<I", "caption length")
                raw = fh.read(4 * length)
                if len(raw) != 4 * length:
                    raise FormatError("truncated caption")
                caps.append([int(t) for t in np.frombuffer(raw, dtype="<u4")])
        except FormatError as exc:
            raise DatasetError(f"{name}: example {i}: {exc}") from None
        out.append(TrainExample(FeatureBundle(regions, grids, boxes, layout), caps))
    if fh.read(1):
        raise DatasetError(f"{name}: trailing bytes after {count} examples")
    return out


def write_dataset(dataset: Dataset, path: str | os.PathLike) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for name, examples in dataset.splits.items():
        with open(root / f"{name}.bin", "wb") as fh:
            _write_split(fh, examples)
    (root / "manifest.json").write_text(json.dumps(dataset.manifest(), indent=2, sort_keys=True) + "\n")
    return root


def read_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root}/manifest.json: {exc}") from None
    if manifest.get("format") != "dlct-dataset" or manifest.get("version") != DATASET_VERSION:
        raise DatasetError(f"{root}: unsupported manifest format/version")
    layout = GridLayout.parse(manifest["grid"])
    splits = {}
    for name, count in manifest["counts"].items():
        with open(root / f"{name}.bin", "rb") as fh:
            splits[name] = _read_split(fh, layout, f"{root / name}.bin")
        if len(splits[name]) != count:
            raise DatasetError(f"{name}: manifest says {count} examples, file has {len(splits[name])}")
    meta = {k: v for k, v in manifest.items()
            if k not in ("format", "version", "counts", "d_region", "d_grid", "grid", "vocab")}
    return Dataset(splits, Vocab(tuple(manifest["vocab"])), layout, manifest["d_region"], manifest["d_grid"], meta)


def import_features(directory: str | os.PathLike, layout: GridLayout, split: str = "train") -> Dataset:
    """Build a dataset from pre-extracted features.

    Expects, per example stem, ``<stem>.regions.dlt``, ``<stem>.grids.dlt``,
    ``<stem>.boxes.dlt`` (DLT1 tensors, boxes as [N, 4] corner quads) and
    ``<stem>.txt`` with one reference caption per line.
    """
    root = Path(directory)
    stems = sorted(p.name[: -len(".regions.dlt")] for p in root.glob("*.regions.dlt"))
    if not stems:
        raise DatasetError(f"{root}: no *.regions.dlt files")
    texts = {s: [line for line in (root / f"{s}.txt").read_text().splitlines() if line.strip()] for s in stems}
    vocab = Vocab.from_captions(c for caps in texts.values() for c in caps)
    examples = []
    d_region = d_grid = None
    for s in stems:
        regions = load_tensor(root / f"{s}.regions.dlt")
        grids = load_tensor(root / f"{s}.grids.dlt")
        boxes = boxes_array(load_tensor(root / f"{s}.boxes.dlt"))
        if len(boxes) != len(regions):
            raise DatasetError(f"{s}: {len(regions)} region vectors but {len(boxes)} boxes")
        if len(grids) != layout.size:
            raise DatasetError(f"{s}: {len(grids)} grid vectors for a {layout} layout")
        d_region = d_region or regions.shape[1]
        d_grid = d_grid or grids.shape[1]
        if regions.shape[1] != d_region or grids.shape[1] != d_grid:
            raise DatasetError(f"{s}: feature width differs from earlier examples")
        examples.append(TrainExample(FeatureBundle(regions, grids, boxes, layout), [vocab.encode(c) for c in texts[s]]))
    return Dataset({split: examples}, vocab, layout, d_region, d_grid, {"source": str(root)})
