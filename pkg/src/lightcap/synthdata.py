"""Seeded synthetic scene/caption dataset plus annotation and vocabulary I/O.

Scenes are 64x64 aerial-style images: a class-typical textured
background with 2-5 crisply bounded colored shapes, so edge maps carry
real signal. Each image gets five templated captions naming the class,
the object count and color, and a spatial relation, all consistent with
the rendered scene by construction. Generation is a pure function of
(n, seed).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .ppm import write_ppm

CLASSES = ("residential", "river", "meadow", "runway", "industrial", "beach", "farmland")

_NOUNS = {
    "residential": "houses",
    "river": "boats",
    "meadow": "bushes",
    "runway": "markings",
    "industrial": "warehouses",
    "beach": "umbrellas",
    "farmland": "sheds",
}

_COLOR_RGB = {
    "red": (0.85, 0.15, 0.15),
    "blue": (0.15, 0.25, 0.80),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.45, 0.45, 0.45),
    "yellow": (0.90, 0.85, 0.20),
    "orange": (0.90, 0.55, 0.15),
    "brown": (0.55, 0.35, 0.20),
}

_CLASS_COLORS = {
    "residential": ("red", "gray", "brown"),
    "river": ("white", "red", "yellow"),
    "meadow": ("yellow", "white", "orange"),
    "runway": ("white", "yellow"),
    "industrial": ("blue", "gray", "white"),
    "beach": ("red", "blue", "orange"),
    "farmland": ("brown", "gray", "red"),
}

_COUNT_WORDS = {2: "two", 3: "three", 4: "four", 5: "five"}

_TEMPLATES = (
    "a {cls} area with {count} {color} {nouns}",
    "{count} {color} {nouns} in a {cls} area",
    "an aerial view of a {cls} area with {count} {color} {nouns}",
    "this {cls} area contains {count} {color} {nouns} {relation}",
    "the {cls} area shows {count} {color} {nouns}",
)

CANVAS = 64


class DatasetError(ValueError):
    """Malformed annotation file or invalid generation request."""


@dataclass
class Shape:
    kind: str  # rect | circle
    x: int
    y: int
    size: int
    color: str


@dataclass
class SceneSpec:
    label: str
    shapes: list[Shape]
    seed: int


@dataclass
class AnnotationRecord:
    image: str
    captions: list[str]


# ---------------------------------------------------------------------
# rendering


def _background(label: str, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((3, CANVAS, CANVAS), dtype=np.float64)
    base = {
        "residential": (0.58, 0.60, 0.52),
        "river": (0.36, 0.52, 0.30),
        "meadow": (0.34, 0.54, 0.28),
        "runway": (0.38, 0.38, 0.40),
        "industrial": (0.56, 0.55, 0.53),
        "beach": (0.86, 0.77, 0.55),
        "farmland": (0.42, 0.52, 0.26),
    }[label]
    img += np.asarray(base)[:, None, None]
    img += rng.normal(0.0, 0.025, (3, CANVAS, CANVAS))

    if label == "river":
        # meandering vertical band of water
        cx = rng.integers(20, 44)
        width = rng.integers(8, 13)
        wob = (4.0 * np.sin(np.arange(CANVAS) / 9.0 + rng.uniform(0, 6.0))).astype(int)
        for y in range(CANVAS):
            x0 = np.clip(cx + wob[y] - width // 2, 0, CANVAS - 1)
            img[:, y, x0 : x0 + width] = np.asarray((0.16, 0.30, 0.62))[:, None]
    elif label == "beach":
        split = rng.integers(24, 40)
        img[:, :, split:] = np.asarray((0.18, 0.38, 0.66))[:, None, None]
        img[:, :, split : split + 2] = np.asarray((0.92, 0.90, 0.78))[:, None, None]
    elif label == "runway":
        cx = rng.integers(22, 42)
        img[:, :, cx - 7 : cx + 7] = np.asarray((0.22, 0.22, 0.24))[:, None, None]
        img[:, :, cx - 1 : cx + 1] = np.asarray((0.85, 0.85, 0.85))[:, None, None]
    elif label == "farmland":
        # parallel field strips with visible boundaries
        pos = 0
        tone = rng.uniform(0.9, 1.1)
        while pos < CANVAS:
            stripe = int(rng.integers(7, 12))
            shade = np.asarray((0.40, 0.52, 0.24)) * tone * rng.uniform(0.8, 1.15)
            img[:, pos : pos + stripe, :] = shade[:, None, None]
            if pos + stripe < CANVAS:
                img[:, pos + stripe - 1 : pos + stripe, :] = 0.24
            pos += stripe
    return img


def _place_shapes(label: str, rng: np.random.Generator) -> list[Shape]:
    count = int(rng.integers(2, 6))
    color = str(rng.choice(_CLASS_COLORS[label]))
    kind = "circle" if label in ("meadow", "beach") else "rect"
    # distinct cells of a 4x4 grid keep shapes separated and countable
    cells = rng.choice(16, size=count, replace=False)
    shapes = []
    for cell in cells:
        cy, cx = divmod(int(cell), 4)
        size = int(rng.integers(6, 11))
        x = 4 + cx * 15 + int(rng.integers(0, 5))
        y = 4 + cy * 15 + int(rng.integers(0, 5))
        shapes.append(Shape(kind, x, y, size, color))
    return shapes


def render_scene(scene: SceneSpec) -> np.ndarray:
    """Deterministic 3xHxW float render in [0, 1]."""
    _, render_seed = np.random.SeedSequence(scene.seed).spawn(2)
    img = _background(scene.label, np.random.default_rng(render_seed))
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS]
    for s in scene.shapes:
        col = np.asarray(_COLOR_RGB[s.color])
        if s.kind == "rect":
            img[:, s.y : s.y + s.size, s.x : s.x + s.size] = col[:, None, None]
        else:
            r = s.size // 2
            mask = (yy - (s.y + r)) ** 2 + (xx - (s.x + r)) ** 2 <= r * r
            img[:, mask] = col[:, None]
    return np.clip(img, 0.0, 1.0)


def _relation(shapes: list[Shape]) -> str:
    cy = float(np.mean([s.y + s.size / 2 for s in shapes]))
    cx = float(np.mean([s.x + s.size / 2 for s in shapes]))
    dy, dx = cy - CANVAS / 2, cx - CANVAS / 2
    if max(abs(dy), abs(dx)) < CANVAS / 8:
        return "in the center"
    if abs(dy) >= abs(dx):
        return "near the top" if dy < 0 else "near the bottom"
    return "on the left side" if dx < 0 else "on the right side"


def captions_for(scene: SceneSpec) -> list[str]:
    slots = {
        "cls": scene.label,
        "count": _COUNT_WORDS[len(scene.shapes)],
        "color": scene.shapes[0].color,
        "nouns": _NOUNS[scene.label],
        "relation": _relation(scene.shapes),
    }
    return [t.format(**slots) for t in _TEMPLATES]


def make_scene(label: str, seed: int) -> SceneSpec:
    shape_seed, _ = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(shape_seed)
    return SceneSpec(label=label, shapes=_place_shapes(label, rng), seed=seed)


# ---------------------------------------------------------------------
# dataset generation


def generate_dataset(n_images: int, seed: int, out_dir) -> dict:
    """Write PPM images, a JSONL annotation file, and a split manifest.

    Classes are balanced (remainder images go to the earlier classes);
    the 80/10/10 split is a seeded shuffle of the index list. Everything
    is byte-deterministic in (n_images, seed).
    """
    if n_images < 1:
        raise DatasetError("need at least one image")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(n_images, dtype=np.uint64)

    records = []
    classes = {}
    for i in range(n_images):
        label = CLASSES[i % len(CLASSES)]
        scene = make_scene(label, int(seeds[i]))
        img = render_scene(scene)
        name = f"images/img_{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, name), img)
        records.append(AnnotationRecord(image=name, captions=captions_for(scene)))
        classes[name] = label

    ann_path = os.path.join(out_dir, "annotations.jsonl")
    with open(ann_path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps({"image": rec.image, "captions": rec.captions}, sort_keys=True))
            fh.write("\n")

    order = np.random.default_rng(seed).permutation(n_images)
    n_train = int(0.8 * n_images)
    n_val = int(0.1 * n_images)
    names = [records[i].image for i in order]
    manifest = {
        "seed": seed,
        "n": n_images,
        "split": {
            "train": sorted(names[:n_train]),
            "val": sorted(names[n_train : n_train + n_val]),
            "test": sorted(names[n_train + n_val :]),
        },
        "classes": classes,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True))
        fh.write("\n")
    return manifest


def manifest_digest(out_dir) -> str:
    """SHA-256 of the manifest file; stable across runs and platforms."""
    with open(os.path.join(out_dir, "manifest.json"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------
# annotations


def load_annotations(path) -> list[AnnotationRecord]:
    """Parse JSONL records; schema problems name the offending line."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc})") from exc
            if not isinstance(doc, dict) or "image" not in doc:
                raise DatasetError(f"line {lineno}: record needs an 'image' field")
            if "captions" not in doc:
                raise DatasetError(f"line {lineno}: record missing 'captions'")
            caps = doc["captions"]
            if not isinstance(caps, list) or len(caps) != 5:
                raise DatasetError(f"line {lineno}: expected exactly 5 captions")
            if not all(isinstance(c, str) and c.strip() for c in caps):
                raise DatasetError(f"line {lineno}: captions must be nonempty strings")
            records.append(AnnotationRecord(image=doc["image"], captions=list(caps)))
    return records


# ---------------------------------------------------------------------
# vocabulary

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
_SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]
    min_freq: int = 1

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.id_to_token[int(i)])
        return out

    def to_dict(self) -> dict:
        return {"tokens": self.id_to_token[len(_SPECIALS) :], "min_freq": self.min_freq}

    @classmethod
    def from_dict(cls, d) -> "Vocabulary":
        return cls.from_tokens(d["tokens"], d.get("min_freq", 1))

    @classmethod
    def from_tokens(cls, tokens, min_freq: int = 1) -> "Vocabulary":
        id_to_token = list(_SPECIALS) + list(tokens)
        return cls({t: i for i, t in enumerate(id_to_token)}, id_to_token, min_freq)


def build_vocab(records: list[AnnotationRecord], min_freq: int = 1) -> Vocabulary:
    """Frequency-sorted vocabulary, ties broken lexicographically."""
    from .metrics import tokenize

    freq: dict[str, int] = {}
    for rec in records:
        for cap in rec.captions:
            for tok in tokenize(cap):
                freq[tok] = freq.get(tok, 0) + 1
    kept = sorted(
        (t for t, c in freq.items() if c >= min_freq),
        key=lambda t: (-freq[t], t),
    )
    return Vocabulary.from_tokens(kept, min_freq)
