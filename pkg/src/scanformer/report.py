"""Multiply-accumulate accounting, selection statistics and selection-map images."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import InputError

OUTLINE = (255, 0, 0)
GRAY = 0.5


@dataclass
class ScaleCost:
    total: int          # patch tokens at this scale
    kept: int
    replaced: int
    merged_tokens: int  # kept + one constant representative if anything was replaced
    macs_merged: int
    macs_dense: int

    @property
    def effective(self) -> int:
        """Sequence length after merging, [REG] included."""
        return self.merged_tokens + 1


@dataclass
class FlopReport:
    text_tokens: int
    text_macs: int
    scales: list

    @property
    def macs_merged(self) -> int:
        return self.text_macs + sum(s.macs_merged for s in self.scales)

    @property
    def macs_dense(self) -> int:
        return self.text_macs + sum(s.macs_dense for s in self.scales)

    @property
    def ratio(self) -> float:
        return self.macs_merged / self.macs_dense

    def format(self) -> str:
        lines = [f"text tokens {self.text_tokens} (with [CLS]), MACs {self.text_macs}",
                 "scale,total,kept,replaced,effective,macs_merged,macs_dense"]
        for l, s in enumerate(self.scales):
            lines.append(f"{l},{s.total},{s.kept},{s.replaced},{s.merged_tokens} + reg,"
                         f"{s.macs_merged},{s.macs_dense}")
        lines.append(f"total MACs merged {self.macs_merged} dense {self.macs_dense} "
                     f"ratio {self.ratio:.4f}")
        return "\n".join(lines)


def _layer_macs(cfg: ModelConfig, n: int, ctx: int) -> int:
    """Projections (4 d^2), feed-forward (8 d^2) and attention scores + mixing per token."""
    d = cfg.d
    return cfg.layers * (12 * n * d * d + 2 * n * ctx * d)


def _scale_macs(cfg: ModelConfig, level: int, embedded: int, seq: int, ctx: int) -> int:
    d, width = cfg.d, cfg.patch * cfg.patch * cfg.channels
    embed = embedded * width * d + embedded * (3 * d + d * d)
    select = embedded * d * 4 if level < cfg.scales - 1 else 0
    box = 2 * d * d + 4 * d
    return embed + _layer_macs(cfg, seq, ctx) + select + box


def flops_estimate(cfg: ModelConfig, kept, text_len: int) -> FlopReport:
    """Analytic MACs of one scan with ``kept[l]`` selected patches at scale ``l``.

    ``text_len`` counts query words (the [CLS] token is added here). The
    dense figures model the physical-duplicate path, which embeds and encodes
    every patch position.
    """
    kept = [int(k) for k in kept]
    if len(kept) != cfg.scales:
        raise InputError(f"{len(kept)} kept counts for {cfg.scales} scales")
    if not 0 <= text_len <= cfg.text_len:
        raise InputError(f"text length {text_len} outside 0..{cfg.text_len}")
    totals = [cfg.tokens(l) for l in range(cfg.scales)]
    for l, (k, t) in enumerate(zip(kept, totals)):
        if not 0 <= k <= t:
            raise InputError(f"scale {l}: kept {k} outside 0..{t}")
    if kept[0] != totals[0]:
        raise InputError("every coarsest-scale patch is always selected")
    for l in range(1, cfg.scales):
        if kept[l] > 4 * kept[l - 1]:
            raise InputError(f"scale {l}: {kept[l]} kept exceeds 4x the {kept[l - 1]} kept parents")
    n_text = text_len + 1
    text_macs = _layer_macs(cfg, n_text, n_text)
    ctx_m = ctx_d = n_text
    scales = []
    for l, (k, t) in enumerate(zip(kept, totals)):
        merged_tokens = k + (1 if k < t else 0)
        seq_m, seq_d = merged_tokens + 1, t + 1
        ctx_m += seq_m
        ctx_d += seq_d
        scales.append(ScaleCost(t, k, t - k, merged_tokens,
                                _scale_macs(cfg, l, k, seq_m, ctx_m),
                                _scale_macs(cfg, l, t, seq_d, ctx_d)))
    return FlopReport(n_text, text_macs, scales)


# -- selection statistics ----------------------------------------------------------

def selection_stats(kept, totals) -> str:
    """Histogram table of kept-token counts as CSV.

    ``kept`` is ``(n_samples, S)``. Rows: ``scale,<l>,<kept>,<count>`` per scale,
    ``total,all,<kept sum>,<count>`` for per-sample totals and
    ``ratio,<l>,<mean kept ratio>,<n>``.
    """
    kept = np.asarray(kept, dtype=np.int64)
    if kept.ndim != 2 or len(kept) == 0:
        raise InputError("selection statistics need at least one sample")
    lines = ["kind,scale,value,count"]
    for l in range(kept.shape[1]):
        for value, count in sorted(Counter(kept[:, l].tolist()).items()):
            lines.append(f"scale,{l},{value},{count}")
    for value, count in sorted(Counter(kept.sum(axis=1).tolist()).items()):
        lines.append(f"total,all,{value},{count}")
    ratios = (kept / np.asarray(totals)).mean(axis=0)
    for l, r in enumerate(ratios):
        lines.append(f"ratio,{l},{r:.6f},{len(kept)}")
    return "\n".join(lines) + "\n"


# -- selection maps --------------------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 pixmap from an ``(H, W, 3)`` uint8 array."""
    h, w, _ = rgb.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6" or len(parts) < 5:
        raise InputError(f"{path}: not a binary P6 pixmap")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3)


def to_rgb8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def box_outline(side: int, box) -> np.ndarray:
    """Boolean ``(side, side)`` mask of a 1-pixel rectangle around a normalized box."""
    x, y, w, h = box
    x0 = int(np.clip(np.floor((x - w / 2) * side), 0, side - 1))
    x1 = int(np.clip(np.ceil((x + w / 2) * side) - 1, 0, side - 1))
    y0 = int(np.clip(np.floor((y - h / 2) * side), 0, side - 1))
    y1 = int(np.clip(np.ceil((y + h / 2) * side) - 1, 0, side - 1))
    mask = np.zeros((side, side), dtype=bool)
    mask[y0, x0:x1 + 1] = mask[y1, x0:x1 + 1] = True
    mask[y0:y1 + 1, x0] = mask[y0:y1 + 1, x1] = True
    return mask


def selection_map(level_image: np.ndarray, selected: np.ndarray, patch: int, box=None) -> np.ndarray:
    """Kept patches copied from the level image, replaced ones mid-gray, box outlined."""
    side = level_image.shape[0]
    cols = side // patch
    out = np.full(level_image.shape, GRAY, dtype=np.float64)
    for i in np.flatnonzero(np.asarray(selected) > 0.5):
        r, c = divmod(int(i), cols)
        sl = (slice(r * patch, (r + 1) * patch), slice(c * patch, (c + 1) * patch))
        out[sl] = level_image[sl]
    rgb = to_rgb8(out)
    if box is not None:
        rgb[box_outline(side, box)] = OUTLINE
    return rgb


def emit_selection_map(state, levels, out_path, patch: int) -> list[Path]:
    """Write one ``<stem>_scale<l>.ppm`` per scale of a finished single-sample scan.

    ``levels`` are the pyramid images, coarse first.
    """
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    stem = out.name[:-4] if out.name.endswith(".ppm") else out.name
    paths = []
    for l, img in enumerate(levels):
        img = np.asarray(img)
        if img.ndim == 4:
            img = img[0]
        rgb = selection_map(img, state.factors[l].s.data[0], patch, state.boxes[l].data[0])
        p = out.parent / f"{stem}_scale{l}.ppm"
        write_ppm(p, rgb)
        paths.append(p)
    return paths
