"""Image scale pyramids, patch grids and the parent -> child patch mapping.

Level 0 is the coarsest image; level ``S - 1`` is the input. Patches are laid
out row-major everywhere, so patch ``r * cols + c`` sits at grid row ``r``,
column ``c``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, InputError


@dataclass
class ImagePyramid:
    levels: list  # list of (side_l, side_l, C) float arrays, coarse first

    @property
    def scales(self) -> int:
        return len(self.levels)

    def side(self, level: int) -> tuple[int, int]:
        h, w = self.levels[level].shape[:2]
        return h, w


@dataclass
class PatchSet:
    level: int
    flat: np.ndarray    # (N, P*P*C)
    coords: np.ndarray  # (N, 3) rows of (cx, cy, s)
    grid: tuple         # (rows, cols)
    patch: int

    def __len__(self) -> int:
        return self.flat.shape[0]


def build_pyramid(image: np.ndarray, scales: int, patch: int | None = None) -> ImagePyramid:
    """Repeated 2x2 area averaging; ``levels[-1]`` is ``image`` itself."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise InputError(f"expected an H x W x C image, got shape {image.shape}")
    if scales < 1:
        raise ConfigError("need at least one scale")
    h, w = image.shape[:2]
    f = 2 ** (scales - 1)
    if h % f or w % f:
        raise ConfigError(f"{h}x{w} image is not divisible by 2^(S-1) = {f}")
    if patch is not None:
        for lvl in range(scales):
            div = 2 ** (scales - 1 - lvl)
            if (h // div) % patch or (w // div) % patch:
                raise ConfigError(f"level {lvl} side {h // div}x{w // div} not divisible by patch {patch}")
    levels = [np.ascontiguousarray(image)]
    for _ in range(scales - 1):
        levels.append(kernels.downsample2x(levels[-1]))
    return ImagePyramid(levels[::-1])


def patch_coords(rows: int, cols: int, patch: int, side: int) -> np.ndarray:
    r, c = np.divmod(np.arange(rows * cols), cols)
    s = np.full(rows * cols, patch / side)
    return np.stack([(c + 0.5) / cols, (r + 0.5) / rows, s], axis=1)


def patchify(image: np.ndarray, patch: int, level: int = 0) -> PatchSet:
    h, w, c = image.shape
    if h % patch or w % patch:
        raise ConfigError(f"side {h}x{w} not divisible by patch {patch}")
    rows, cols = h // patch, w // patch
    flat = (image.reshape(rows, patch, cols, patch, c)
                 .transpose(0, 2, 1, 3, 4)
                 .reshape(rows * cols, patch * patch * c))
    return PatchSet(level, np.ascontiguousarray(flat), patch_coords(rows, cols, patch, max(h, w)),
                    (rows, cols), patch)


def patchify_batch(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W, C) -> (B, N, P*P*C)`` in the same order as :func:`patchify`."""
    b, h, w, c = images.shape
    rows, cols = h // patch, w // patch
    return np.ascontiguousarray(
        images.reshape(b, rows, patch, cols, patch, c)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(b, rows * cols, patch * patch * c))


def unpatchify(patches: PatchSet, channels: int = 3) -> np.ndarray:
    rows, cols = patches.grid
    p = patches.patch
    return (patches.flat.reshape(rows, cols, p, p, channels)
                        .transpose(0, 2, 1, 3, 4)
                        .reshape(rows * p, cols * p, channels))


def pyramid_batch(images: np.ndarray, scales: int) -> list[np.ndarray]:
    """Batched pyramid, coarse first: list of ``(B, side_l, side_l, C)`` arrays."""
    levels = [images]
    for _ in range(scales - 1):
        x = levels[-1]
        b, h, w, c = x.shape
        levels.append(x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4), dtype=np.float64)
                       .astype(x.dtype))
    return levels[::-1]


def children_of(index: int, grid: tuple, grid_next: tuple) -> list[int]:
    rows, cols = grid
    if grid_next != (2 * rows, 2 * cols):
        raise ConfigError(f"next grid {grid_next} must double {grid}")
    r, c = divmod(index, cols)
    nc = grid_next[1]
    top = 2 * r * nc + 2 * c
    return [top, top + 1, top + nc, top + nc + 1]


def child_table(grid: tuple) -> np.ndarray:
    """``(N_l, 4)`` children of every parent in a ``grid`` -> doubled grid step."""
    rows, cols = grid
    nxt = (2 * rows, 2 * cols)
    return np.array([children_of(i, grid, nxt) for i in range(rows * cols)], dtype=np.int64)


def parent_table(grid: tuple) -> np.ndarray:
    """For each patch of the doubled grid, its parent index in ``grid``."""
    table = child_table(grid)
    parent = np.empty(table.size, dtype=np.int64)
    parent[table.reshape(-1)] = np.repeat(np.arange(table.shape[0]), 4)
    return parent


# -- binary image files -----------------------------------------------------
# Layout: three little-endian uint32 (height, width, channels) followed by
# height*width*channels little-endian float32 values in row-major order.

_HEADER = struct.Struct("<III")


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 3:
        raise InputError(f"expected H x W x C, got {image.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*image.shape))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InputError(f"{path}: truncated header")
    h, w, c = _HEADER.unpack_from(raw)
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * h * w * c:
        raise InputError(f"{path}: expected {4 * h * w * c} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
