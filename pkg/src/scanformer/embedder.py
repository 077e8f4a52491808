"""Token embeddings for the text pass and every image scale.

Image-side tokens (patches, [REG], the constant token) carry the image type
embedding; text tokens carry the text type embedding. The constant token that
replaces unselected patches is a complete embedded token, so every replaced
position is bit-identical before the encoder sees it.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .errors import ConfigError, InputError
from .numerics import Tensor
from .params import ParamStore

PAD_ID = 0
# Unit-scale tables so token identity survives the first residual updates.
EMBED_STD = 1.0
# Pixels are centered and scaled before projection; raw [0, 1] values bury
# patch content under the shared offset.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class TokenSequence:
    feats: Tensor                   # (..., n, d)
    kinds: list                     # per token: text | cls | patch | reg | const
    coords: np.ndarray | None = None  # (n_patch, 3) for patch tokens, in order

    def __len__(self) -> int:
        return self.feats.shape[-2]


class Embedder:
    def __init__(self, cfg: ModelConfig, store: ParamStore):
        d, p = cfg.d, cfg.patch
        self.cfg = cfg
        self.word = store.normal("text.word", (cfg.vocab, d), std=EMBED_STD)
        self.cls = store.normal("text.cls", (d,), std=EMBED_STD)
        self.text_pos = store.normal("text.pos", (cfg.text_len + 1, d), std=EMBED_STD)
        self.text_type = store.normal("text.type", (d,), std=EMBED_STD)
        self.patch_w = store.glorot("patch.w", p * p * cfg.channels, d)
        self.patch_b = store.zeros("patch.b", (d,))
        # first layer spread wide so the perceptron starts with a range of spatial frequencies
        self.pse_w1 = store.normal("pse.w1", (3, d), std=4.0)
        self.pse_b1 = store.normal("pse.b1", (d,), std=1.0)
        self.pse_w2 = store.glorot("pse.w2", d, d)
        self.pse_b2 = store.zeros("pse.b2", (d,))
        self.image_type = store.normal("image.type", (d,), std=EMBED_STD)
        self.reg = store.normal("image.reg", (d,), std=EMBED_STD)
        self.const = store.normal("image.const", (d,), std=EMBED_STD)

    # -- text ------------------------------------------------------------
    def embed_text(self, ids) -> TokenSequence:
        """``[CLS] + ids`` with positions and the text type; ids may carry a batch axis."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab):
            raise InputError(f"token id outside vocabulary of size {self.cfg.vocab}")
        n = ids.shape[-1] + 1
        if n > self.cfg.text_len + 1:
            raise InputError(f"text of {n - 1} tokens exceeds max length {self.cfg.text_len}")
        lead = ids.shape[:-1]
        cls = nx.broadcast_to(self.cls, lead + (1, self.cfg.d))
        words = self.word[ids]
        feats = nx.concat([cls, words], axis=-2) + self.text_pos[:n] + self.text_type
        return TokenSequence(feats, ["cls"] + ["text"] * (n - 1))

    # -- image -----------------------------------------------------------
    def pse(self, coords) -> Tensor:
        """Position-scale embedding of ``(..., 3)`` normalized (cx, cy, s) triples."""
        coords = np.asarray(coords)
        if coords.shape[-1] != 3:
            raise InputError(f"pse expects (..., 3) coordinates, got {coords.shape}")
        if (coords < 0).any() or (coords > 1).any():
            raise InputError("pse coordinates must lie in [0, 1]")
        x = Tensor(coords.astype(self.pse_w1.dtype))
        h = nx.gelu(nx.linear(x, self.pse_w1, self.pse_b1))
        return nx.linear(h, self.pse_w2, self.pse_b2)

    def embed_patches(self, flat, coords) -> TokenSequence:
        """``norm(flat) @ W + b + PSE(coords) + E_type``; ``flat`` is ``(..., N, P*P*C)``."""
        flat = np.asarray(flat)
        width = self.patch_w.shape[0]
        if flat.shape[-1] != width:
            raise ConfigError(f"patch width {flat.shape[-1]} != P*P*C = {width}")
        if flat.shape[-2] != len(coords):
            raise ConfigError(f"{flat.shape[-2]} patches but {len(coords)} coordinate rows")
        pixels = (flat.astype(self.patch_w.dtype) - PIXEL_MEAN) * (1.0 / PIXEL_STD)
        proj = nx.linear(Tensor(pixels.astype(self.patch_w.dtype, copy=False)), self.patch_w, self.patch_b)
        feats = proj + self.pse(coords) + self.image_type
        return TokenSequence(feats, ["patch"] * len(coords), np.asarray(coords))

    def reg_token(self) -> Tensor:
        return self.reg + self.image_type

    def const_token(self) -> Tensor:
        return self.const + self.image_type

    def append_reg(self, seq: TokenSequence) -> TokenSequence:
        lead = seq.feats.shape[:-2]
        reg = nx.broadcast_to(self.reg_token(), lead + (1, self.cfg.d))
        return TokenSequence(nx.concat([seq.feats, reg], axis=-2), seq.kinds + ["reg"], seq.coords)


def load_vocab(path) -> list[str]:
    """One token per line; the id of a token is its zero-based line number."""
    return Path(path).read_text().splitlines()


def save_vocab(path, tokens) -> None:
    Path(path).write_text("".join(f"{t}\n" for t in tokens))
