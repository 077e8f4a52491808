"""Synthetic referring-grounding scenes.

Each scene holds 2-5 flat-colored shapes on a noisy gray canvas. The query is
a fixed-order token sequence ``COLOR [SIZE] SHAPE [POSITION]`` that matches
exactly one object; its box is the target.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import GenConfig
from .embedder import PAD_ID, save_vocab
from .errors import GenerationError, InputError
from .objectives import iou
from .pyramid import read_image, write_image

COLORS = {
    "red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0), "cyan": (0.0, 1.0, 1.0), "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0),
}
SIZES = ("small", "large")
SHAPES = ("rect", "ellipse", "triangle")
POSITIONS = ("left", "right", "top", "bottom")
VOCAB = ["[PAD]", *COLORS, *SIZES, *SHAPES, *POSITIONS]
TOKEN_ID = {t: i for i, t in enumerate(VOCAB)}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    box: tuple          # normalized (x, y, w, h), center form
    pixels: tuple       # (x0, y0, w, h) in pixels


@dataclass
class Sample:
    image: np.ndarray   # (side, side, 3) float32
    ids: np.ndarray     # (text_len,) int64, PAD-filled
    box: np.ndarray     # (4,) float64
    objects: list
    words: list


@dataclass
class Dataset:
    images: np.ndarray  # (n, side, side, 3)
    ids: np.ndarray     # (n, L)
    boxes: np.ndarray   # (n, 4)

    def __len__(self) -> int:
        return len(self.boxes)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.ids[index], self.boxes[index])


# -- predicates ---------------------------------------------------------------

def _matches(obj: SceneObject, words) -> bool:
    x, y = obj.box[0], obj.box[1]
    for w in words:
        if w in COLORS and obj.color != w:
            return False
        if w in SIZES and obj.size != w:
            return False
        if w in SHAPES and obj.shape != w:
            return False
        if (w == "left" and not x < 0.5) or (w == "right" and not x > 0.5):
            return False
        if (w == "top" and not y < 0.5) or (w == "bottom" and not y > 0.5):
            return False
    return True


def verify_unique_referent(objects, query) -> bool:
    """True iff exactly one object satisfies every predicate of ``query``.

    ``query`` is a list of words or token ids; padding is ignored. Positions
    test the box center strictly against the canvas midline.
    """
    words = [VOCAB[int(t)] if not isinstance(t, str) else t for t in query]
    words = [w for w in words if w != "[PAD]"]
    return sum(_matches(o, words) for o in objects) == 1


def encode_query(words, text_len: int) -> np.ndarray:
    if len(words) > text_len:
        raise InputError(f"query of {len(words)} words exceeds length {text_len}")
    try:
        ids = [TOKEN_ID[w] for w in words]
    except KeyError as exc:
        raise InputError(f"unknown word {exc.args[0]!r}") from exc
    return np.array(ids + [PAD_ID] * (text_len - len(ids)), dtype=np.int64)


def decode_query(ids) -> list[str]:
    return [VOCAB[int(t)] for t in ids if int(t) != PAD_ID]


# -- rendering --------------------------------------------------------------

def _mask(shape: str, x0: int, y0: int, w: int, h: int, side: int) -> np.ndarray:
    py, px = np.mgrid[0:side, 0:side] + 0.5
    inside = (px >= x0) & (px < x0 + w) & (py >= y0) & (py < y0 + h)
    if shape == "rect":
        return inside
    cx, cy = x0 + w / 2, y0 + h / 2
    if shape == "ellipse":
        return inside & (((px - cx) / (w / 2)) ** 2 + ((py - cy) / (h / 2)) ** 2 <= 1.0)
    # apex at the top center, base along the bottom edge
    return inside & (np.abs(px - cx) <= (py - y0) / h * (w / 2))


def _place(rng, cfg: GenConfig, n: int):
    side = cfg.image
    boxes, sizes = [], []
    for _ in range(n):
        for _ in range(cfg.retries):
            size = SIZES[rng.integers(2)]
            lo, hi = (cfg.small_min, cfg.small_max) if size == "small" else (cfg.large_min, cfg.large_max)
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x0, y0 = int(rng.integers(0, side - w + 1)), int(rng.integers(0, side - h + 1))
            box = ((x0 + w / 2) / side, (y0 + h / 2) / side, w / side, h / side)
            if all(iou(box, b) <= cfg.max_iou for b, _ in boxes):
                boxes.append((box, (x0, y0, w, h)))
                sizes.append(size)
                break
        else:
            raise GenerationError(f"could not place {n} objects within {cfg.retries} tries")
    return boxes, sizes


def _query_forms(target: SceneObject):
    for size, pos in itertools.product((None, target.size), (None, *POSITIONS)):
        words = [target.color] + ([size] if size else []) + [target.shape] + ([pos] if pos else [])
        if _matches(target, words):
            yield words


def generate_sample(seed: int, cfg: GenConfig | None = None) -> Sample:
    """Deterministic scene + unique-referent query for ``seed``."""
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed)
    side = cfg.image
    for _ in range(cfg.retries):
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        placed, sizes = _place(rng, cfg, n)
        colors = [list(COLORS)[i] for i in rng.integers(len(COLORS), size=n)]
        shapes = [SHAPES[i] for i in rng.integers(len(SHAPES), size=n)]
        # a look-alike distractor now and then forces size and position words
        if n > 1 and rng.random() < 0.4:
            colors[1], shapes[1] = colors[0], shapes[0]
        objects = [SceneObject(shapes[i], colors[i], sizes[i], placed[i][0], placed[i][1]) for i in range(n)]
        target = objects[0]
        forms = [f for f in _query_forms(target) if verify_unique_referent(objects, f)]
        if not forms:
            continue
        words = forms[int(rng.integers(len(forms)))]
        image = cfg.background + rng.uniform(-cfg.noise, cfg.noise, size=(side, side, 3))
        order = rng.permutation(n)
        for i in order:
            o = objects[i]
            image[_mask(o.shape, *o.pixels, side)] = COLORS[o.color]
        return Sample(image.astype(np.float32), encode_query(words, cfg.text_len),
                      np.array(target.box, dtype=np.float64), objects, words)
    raise GenerationError(f"seed {seed}: no unique query within {cfg.retries} scene draws")


def make_dataset(n: int, seed: int, cfg: GenConfig | None = None) -> Dataset:
    """``n`` samples from consecutive seeds ``seed, seed + 1, ...`` held in memory."""
    cfg = cfg or GenConfig()
    images = np.empty((n, cfg.image, cfg.image, 3), dtype=np.float32)
    ids = np.empty((n, cfg.text_len), dtype=np.int64)
    boxes = np.empty((n, 4), dtype=np.float64)
    for i in range(n):
        s = generate_sample(seed + i, cfg)
        images[i], ids[i], boxes[i] = s.image, s.ids, s.box
    return Dataset(images, ids, boxes)


# -- files ------------------------------------------------------------------

def render_dataset(n: int, seed: int, out_dir, cfg: GenConfig | None = None) -> Path:
    """Write ``images/*.bin``, ``manifest.txt`` and ``vocab.txt``; returns the manifest path."""
    cfg = cfg or GenConfig()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        s = generate_sample(seed + i, cfg)
        rel = f"images/{i:06d}.bin"
        write_image(out / rel, s.image)
        ids = " ".join(str(int(t)) for t in s.ids)
        box = " ".join(f"{v:.8f}" for v in s.box)
        lines.append(f"{rel}\t{ids}\t{box}\n")
    manifest = out / "manifest.txt"
    manifest.write_text("".join(lines))
    save_vocab(out / "vocab.txt", VOCAB)
    return manifest


def load_manifest(path) -> Dataset:
    """Read a manifest written by :func:`render_dataset` with its images."""
    path = Path(path)
    images, ids, boxes = [], [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise InputError(f"{path}:{lineno}: expected 3 tab-separated fields")
        images.append(read_image(path.parent / parts[0]))
        ids.append([int(t) for t in parts[1].split()])
        boxes.append([float(v) for v in parts[2].split()])
    if not images:
        return Dataset(np.zeros((0, 0, 0, 3), np.float32), np.zeros((0, 0), np.int64), np.zeros((0, 4)))
    return Dataset(np.stack(images), np.array(ids, dtype=np.int64), np.array(boxes))
