"""Synthetic compositional-scene benchmark.

Scenes are grids of colored glyph clusters. Each region is one cluster: a
subject glyph, a spatial relation, and a reference glyph placed to make
the relation visually true. The region fragment describes exactly its own
cluster; the global caption is the ordered join of fragments. A
controllable ambiguity knob corrupts fragments in the global caption only
(dropping them or replacing the subject's shape word with a generic one),
leaving region fragments clean.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .encoders import Vocab, RESERVED_TOKENS, tokenize
from .geometry import Box
from .tensorio import read_tensor, write_tensor

__all__ = [
    "GenConfig", "SceneRecord", "GenerationError", "generate_scene",
    "generate_dataset", "render", "write_dataset", "read_dataset",
    "build_vocab", "BatchLoader", "Batch", "batch_iterator", "subject_triples",
]

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.72, 0.18),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.92, 0.85, 0.12),
    "purple": (0.60, 0.18, 0.75),
    "orange": (0.95, 0.55, 0.10),
}

PLURALS = {"circle": "circles", "square": "squares",
           "triangle": "triangles", "cross": "crosses"}

QUADRANTS = ("northwest", "northeast", "southwest", "southeast")

# relation -> reference block offsets relative to the subject block
_REL_OFFSETS = {
    "left of": [(0, 1)],
    "above": [(1, 0)],
    "near": [(1, 1)],
    "surrounded by": [(-1, 0), (1, 0), (0, -1), (0, 1)],
}


class GenerationError(RuntimeError):
    """Scene construction failed; message carries the seed context."""


@dataclass
class GenConfig:
    image_size: int = 64
    block: int = 8
    colors: tuple = tuple(COLOR_RGB.keys())
    shapes: tuple = tuple(PLURALS.keys())
    sizes: tuple = ("small", "large")
    relations: tuple = tuple(_REL_OFFSETS.keys())
    regions_min: int = 2
    regions_max: int = 2
    ambiguity: float = 0.0
    seed: int = 0
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_heldout: int = 200
    heldout_triples: int = 12

    def validate(self):
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ValueError(f"ambiguity {self.ambiguity} violates 0 <= ambiguity <= 1")
        if not self.colors or not self.shapes or not self.sizes or not self.relations:
            raise ValueError("object/relation vocabulary must be non-empty")
        if not 2 <= self.regions_min <= self.regions_max <= 8:
            raise ValueError("regions per scene must satisfy 2 <= min <= max <= 8")
        if self.image_size % self.block:
            raise ValueError("image size must be a multiple of the block size")
        for rel in self.relations:
            if rel not in _REL_OFFSETS:
                raise ValueError(f"unknown relation {rel!r}")
        for c in self.colors:
            if c not in COLOR_RGB:
                raise ValueError(f"unknown color {c!r}")
        for s in self.shapes:
            if s not in PLURALS:
                raise ValueError(f"unknown shape {s!r}")
        return self

    def to_dict(self):
        d = dict(self.__dict__)
        for k in ("colors", "shapes", "sizes", "relations"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("colors", "shapes", "sizes", "relations"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()


@dataclass
class Glyph:
    shape: str
    color: str
    size: str
    block: tuple  # (row, col)


@dataclass
class SceneRecord:
    scene_id: str
    split: str
    global_caption: str
    regions: list            # [(Box, fragment), ...]
    image: Optional[np.ndarray] = None
    image_file: Optional[str] = None
    objects: Optional[list] = None      # [[Glyph, ...] per region]
    bg_tint: tuple = (0.0, 0.0, 0.0)
    clean_caption: Optional[str] = None
    image_size: int = 64
    block_px: int = 8


def subject_triples(cfg: GenConfig):
    """All (color, shape, relation) combinations a subject can take."""
    return [(c, s, r) for c in cfg.colors for s in cfg.shapes for r in cfg.relations]


def reserved_subject_triples(cfg: GenConfig):
    """The seeded heldout subset of subject triples."""
    triples = subject_triples(cfg)
    order = np.random.default_rng(cfg.seed + 0xB0C5).permutation(len(triples))
    return {triples[i] for i in order[: cfg.heldout_triples]}


# ---------------------------------------------------------------------------
# glyph rasterization


def _glyph_mask(shape, px):
    m = np.zeros((px, px), dtype=bool)
    if shape == "square":
        m[:] = True
    elif shape == "circle":
        c = (px - 1) / 2.0
        yy, xx = np.mgrid[0:px, 0:px]
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (px / 2.0) ** 2
    elif shape == "triangle":
        c = (px - 1) / 2.0
        yy, xx = np.mgrid[0:px, 0:px]
        m = np.abs(xx - c) <= (yy / 2.0 + 0.25)
    elif shape == "cross":
        t = 2 if px >= 7 else 1
        c0 = (px - t) // 2
        m[c0:c0 + t, :] = True
        m[:, c0:c0 + t] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _glyph_px(size):
    return 7 if size == "large" else 5


def _glyph_extent(glyph: Glyph, block_px):
    """Pixel bounds (y0, x0, y1, x1) of the drawn glyph, exclusive end."""
    px = _glyph_px(glyph.size)
    off = (block_px - px) // 2
    y0 = glyph.block[0] * block_px + off
    x0 = glyph.block[1] * block_px + off
    return y0, x0, y0 + px, x0 + px


def render(scene: SceneRecord) -> np.ndarray:
    """Deterministic rasterization: textured background plus hard-edge glyphs."""
    if scene.objects is None:
        raise ValueError(f"render: scene {scene.scene_id} has no object list")
    size = scene.image_size
    block_px = scene.block_px
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    img = np.empty((size, size, 3), dtype=np.float32)
    checker = ((yy // block_px + xx // block_px) % 2).astype(np.float32) * 0.02
    for ch, tint in enumerate(scene.bg_tint):
        img[:, :, ch] = 0.12 + 0.06 * (xx / size) + 0.04 * (yy / size) + checker + tint
    for cluster in scene.objects:
        for glyph in cluster:
            y0, x0, y1, x1 = _glyph_extent(glyph, block_px)
            mask = _glyph_mask(glyph.shape, y1 - y0)
            color = COLOR_RGB[glyph.color]
            for ch in range(3):
                patch = img[y0:y1, x0:x1, ch]
                patch[mask] = color[ch]
    np.clip(img, 0.0, 1.0, out=img)
    return img


# ---------------------------------------------------------------------------
# scene construction


def _fragment(subj: Glyph, rel: str, ref: Glyph, quad: str) -> str:
    if rel == "surrounded by":
        return (f"a {subj.size} {subj.color} {subj.shape} surrounded by "
                f"{ref.size} {ref.color} {PLURALS[ref.shape]} in the {quad}")
    return (f"a {subj.size} {subj.color} {subj.shape} {rel} "
            f"a {ref.size} {ref.color} {ref.shape} in the {quad}")


def _corrupt(fragment: str, subj_shape: str, rng) -> Optional[str]:
    """Drop the fragment or swap the subject's shape word for a generic one."""
    if rng.random() < 0.5:
        return None
    return fragment.replace(f" {subj_shape} ", " shape ", 1)


def _quadrant(cy, cx):
    if cy < 0.5:
        return "northwest" if cx < 0.5 else "northeast"
    return "southwest" if cx < 0.5 else "southeast"


def generate_scene(cfg: GenConfig, rng: np.random.Generator, *,
                   allowed_triples=None, required_triples=None,
                   scene_id="scene", split="train") -> SceneRecord:
    """Place non-overlapping glyph clusters and write their captions.

    `allowed_triples` restricts every cluster's (color, shape, relation)
    subject triple; `required_triples` forces the first cluster to use one
    of the given triples (the heldout mechanism).
    """
    cfg.validate()
    grid = cfg.image_size // cfg.block
    occupied = np.zeros((grid, grid), dtype=bool)
    n_regions = int(rng.integers(cfg.regions_min, cfg.regions_max + 1))

    clusters = []
    for region_idx in range(n_regions):
        pool = required_triples if (region_idx == 0 and required_triples) else allowed_triples
        placed = False
        for _ in range(100):
            if pool:
                color, shape, rel = list(pool)[int(rng.integers(len(pool)))]
            else:
                color = cfg.colors[int(rng.integers(len(cfg.colors)))]
                shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
                rel = cfg.relations[int(rng.integers(len(cfg.relations)))]
            size = cfg.sizes[int(rng.integers(len(cfg.sizes)))]
            ref_color = cfg.colors[int(rng.integers(len(cfg.colors)))]
            ref_shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
            ref_size = cfg.sizes[int(rng.integers(len(cfg.sizes)))]
            offs = _REL_OFFSETS[rel]
            r0 = int(rng.integers(grid))
            c0 = int(rng.integers(grid))
            cells = [(r0, c0)] + [(r0 + dr, c0 + dc) for dr, dc in offs]
            if any(not (0 <= r < grid and 0 <= c < grid) for r, c in cells):
                continue
            if any(occupied[r, c] for r, c in cells):
                continue
            for r, c in cells:
                occupied[r, c] = True
            subj = Glyph(shape=shape, color=color, size=size, block=(r0, c0))
            refs = [Glyph(shape=ref_shape, color=ref_color, size=ref_size,
                          block=(r0 + dr, c0 + dc)) for dr, dc in offs]
            clusters.append((subj, rel, refs))
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place cluster {region_idx} of scene {scene_id!r} "
                f"after 100 retries (seed context: {rng.bit_generator.state['state']})")

    # order regions by subject block (row-major) so captions are canonical
    clusters.sort(key=lambda cl: cl[0].block)

    regions = []
    fragments = []
    objects = []
    for subj, rel, refs in clusters:
        extents = np.array([_glyph_extent(g, cfg.block) for g in [subj] + refs])
        y0, x0 = extents[:, 0].min(), extents[:, 1].min()
        y1, x1 = extents[:, 2].max(), extents[:, 3].max()
        box = Box(cx=(x0 + x1) / 2.0 / cfg.image_size,
                  cy=(y0 + y1) / 2.0 / cfg.image_size,
                  w=(x1 - x0) / cfg.image_size,
                  h=(y1 - y0) / cfg.image_size).validate()
        quad = _quadrant(box.cy, box.cx)
        frag = _fragment(subj, rel, refs[0], quad)
        regions.append((box, frag))
        fragments.append((frag, subj.shape))
        objects.append([subj] + refs)

    clean_caption = " and ".join(f for f, _ in fragments)
    kept = []
    for frag, subj_shape in fragments:
        if rng.random() < cfg.ambiguity:
            corrupted = _corrupt(frag, subj_shape, rng)
            if corrupted is not None:
                kept.append(corrupted)
        else:
            kept.append(frag)
    caption = " and ".join(kept) if kept else "a scene"

    record = SceneRecord(
        scene_id=scene_id, split=split, global_caption=caption,
        regions=regions, objects=objects, clean_caption=clean_caption,
        bg_tint=tuple(float(t) for t in rng.uniform(0.0, 0.03, size=3)),
        image_size=cfg.image_size, block_px=cfg.block)
    record.image = render(record)
    return record


def generate_dataset(cfg: GenConfig):
    """All four splits; captions deduplicated on their clean form.

    Train/val/test scenes avoid the reserved subject triples entirely;
    heldout scenes lead with one. The ambiguity knob applies to the train
    split only (evaluation splits are generated clean).
    """
    cfg.validate()
    reserved = reserved_subject_triples(cfg)
    common = [t for t in subject_triples(cfg) if t not in reserved]
    seen_captions = set()
    records = []
    plan = [("train", cfg.n_train, cfg.ambiguity, common, None),
            ("val", cfg.n_val, 0.0, common, None),
            ("test", cfg.n_test, 0.0, common, None),
            ("heldout", cfg.n_heldout, 0.0, common, sorted(reserved))]
    for split, count, ambiguity, allowed, required in plan:
        split_cfg = GenConfig.from_dict({**cfg.to_dict(), "ambiguity": ambiguity})
        for idx in range(count):
            rng = np.random.default_rng([cfg.seed, _SPLIT_SALT[split], idx])
            for attempt in range(100):
                record = generate_scene(
                    split_cfg, rng, allowed_triples=allowed,
                    required_triples=required,
                    scene_id=f"{split}-{idx:05d}", split=split)
                if record.clean_caption not in seen_captions:
                    seen_captions.add(record.clean_caption)
                    records.append(record)
                    break
            else:
                raise GenerationError(
                    f"could not find an unseen caption for {split}-{idx:05d} "
                    f"after 100 retries (base seed {cfg.seed})")
    return records


_SPLIT_SALT = {"train": 1, "val": 2, "test": 3, "heldout": 4}


# ---------------------------------------------------------------------------
# vocabulary


def build_vocab(cfg: GenConfig) -> Vocab:
    words = {"a", "and", "in", "the", "scene", "shape"}
    words.update(cfg.sizes)
    words.update(cfg.colors)
    words.update(cfg.shapes)
    words.update(PLURALS[s] for s in cfg.shapes)
    words.update(QUADRANTS)
    for rel in cfg.relations:
        words.update(rel.split())
    return Vocab(list(RESERVED_TOKENS) + sorted(words))


# ---------------------------------------------------------------------------
# on-disk format


def write_dataset(records, out_dir):
    """manifest.jsonl plus one image tensor file per record."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="ascii") as fh:
        for rec in records:
            if rec.image is None:
                raise ValueError(f"record {rec.scene_id} has no image to write")
            rel_path = os.path.join("images", f"{rec.scene_id}.hct")
            write_tensor(os.path.join(out_dir, rel_path), rec.image.astype(np.float32))
            row = {
                "scene_id": rec.scene_id,
                "split": rec.split,
                "caption": rec.global_caption,
                "image": rel_path,
                "regions": [{"box": [b.cx, b.cy, b.w, b.h], "text": frag}
                            for b, frag in rec.regions],
            }
            fh.write(json.dumps(row) + "\n")


def read_dataset(data_dir, load_images=True):
    manifest = os.path.join(data_dir, "manifest.jsonl")
    records = []
    with open(manifest, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"manifest line {lineno}: malformed JSON ({exc})") from exc
            regions = []
            for reg in row["regions"]:
                cx, cy, w, h = reg["box"]
                try:
                    box = Box(cx, cy, w, h).validate()
                except ValueError as exc:
                    raise ValueError(
                        f"manifest line {lineno} ({row['scene_id']}): {exc}") from exc
                regions.append((box, reg["text"]))
            image = None
            if load_images:
                path = os.path.join(data_dir, row["image"])
                if not os.path.exists(path):
                    raise ValueError(f"missing image file for scene {row['scene_id']}: {path}")
                image = read_tensor(path)
            records.append(SceneRecord(
                scene_id=row["scene_id"], split=row["split"],
                global_caption=row["caption"], regions=regions,
                image=image, image_file=row["image"]))
    return records


def load_vocab(data_dir) -> Vocab:
    return Vocab.from_file(os.path.join(data_dir, "vocab.txt"))


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: np.ndarray        # (N, S, S, 3)
    cap_ids: np.ndarray       # (N, Lt)
    cap_mask: np.ndarray      # (N, Lt)
    region_crops: np.ndarray  # (R, S, S, 3)
    frag_ids: np.ndarray      # (R, Lr)
    frag_mask: np.ndarray     # (R, Lr)
    region_owner: np.ndarray  # (R,) row in this batch
    region_boxes: np.ndarray  # (R, 4) center-size fractions
    scene_ids: list

    @property
    def n(self):
        return self.images.shape[0]


class BatchLoader:
    """Tokenizes captions and pre-crops regions once, then serves batches."""

    def __init__(self, records, vocab: Vocab, *, max_text_len=32,
                 max_region_text_len=16, with_regions=True):
        from .encoders import roi_align_batch

        self.records = list(records)
        self.vocab = vocab
        self.with_regions = with_regions
        n = len(self.records)
        if n == 0:
            raise ValueError("BatchLoader: empty record list")
        size = self.records[0].image.shape[0]
        self.images = np.stack([r.image.astype(np.float32) for r in self.records])
        self.cap_ids = np.empty((n, max_text_len), dtype=np.int64)
        self.cap_mask = np.empty((n, max_text_len), dtype=np.float32)
        for i, rec in enumerate(self.records):
            seq = tokenize(rec.global_caption, vocab, max_text_len)
            self.cap_ids[i] = seq.ids
            self.cap_mask[i] = seq.mask

        if with_regions:
            owners, boxes, frags = [], [], []
            for i, rec in enumerate(self.records):
                for box, frag in rec.regions:
                    owners.append(i)
                    boxes.append([box.cx, box.cy, box.w, box.h])
                    frags.append(frag)
            self.region_owner_all = np.asarray(owners, dtype=np.int64)
            self.region_boxes_all = np.asarray(boxes, dtype=np.float32)
            self.frag_ids = np.empty((len(frags), max_region_text_len), dtype=np.int64)
            self.frag_mask = np.empty((len(frags), max_region_text_len), dtype=np.float32)
            for j, frag in enumerate(frags):
                seq = tokenize(frag, vocab, max_region_text_len)
                self.frag_ids[j] = seq.ids
                self.frag_mask[j] = seq.mask
            self.crops = roi_align_batch(
                self.images, self.region_boxes_all, self.region_owner_all, size, size)
            # region rows grouped per record for fast slicing
            self.region_slices = []
            start = 0
            for rec in self.records:
                k = len(rec.regions)
                self.region_slices.append((start, start + k))
                start += k

    def __len__(self):
        return len(self.records)

    def epoch(self, batch_size, rng: np.random.Generator, shuffle=True):
        """Yield full batches; a trailing partial batch is dropped."""
        if batch_size < 2:
            raise ValueError("batch_size must be >= 2 (matching needs a negative)")
        order = rng.permutation(len(self.records)) if shuffle else np.arange(len(self.records))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            yield self._gather(idx)

    def _gather(self, idx):
        idx = np.asarray(idx)
        if not self.with_regions:
            return Batch(
                images=self.images[idx], cap_ids=self.cap_ids[idx],
                cap_mask=self.cap_mask[idx],
                region_crops=np.empty((0,) + self.images.shape[1:], dtype=np.float32),
                frag_ids=np.empty((0, 1), dtype=np.int64),
                frag_mask=np.empty((0, 1), dtype=np.float32),
                region_owner=np.empty(0, dtype=np.int64),
                region_boxes=np.empty((0, 4), dtype=np.float32),
                scene_ids=[self.records[i].scene_id for i in idx])
        rows = []
        owner = []
        for b, i in enumerate(idx):
            s, e = self.region_slices[i]
            rows.extend(range(s, e))
            owner.extend([b] * (e - s))
        rows = np.asarray(rows, dtype=np.int64)
        return Batch(
            images=self.images[idx], cap_ids=self.cap_ids[idx],
            cap_mask=self.cap_mask[idx],
            region_crops=self.crops[rows], frag_ids=self.frag_ids[rows],
            frag_mask=self.frag_mask[rows],
            region_owner=np.asarray(owner, dtype=np.int64),
            region_boxes=self.region_boxes_all[rows],
            scene_ids=[self.records[i].scene_id for i in idx])


def batch_iterator(records, batch_size, rng, shuffle=True, *, vocab=None,
                   max_text_len=32, max_region_text_len=16, with_regions=True):
    """One epoch of batches over `records` (builds a transient loader)."""
    if vocab is None:
        raise ValueError("batch_iterator needs the dataset vocabulary")
    loader = BatchLoader(records, vocab, max_text_len=max_text_len,
                         max_region_text_len=max_region_text_len,
                         with_regions=with_regions)
    yield from loader.epoch(batch_size, rng, shuffle=shuffle)
