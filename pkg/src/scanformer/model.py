"""The unified encoder and the coarse-to-fine scan.

A scan runs the text through every layer first, then visits the pyramid from
the coarsest scale to the finest. Each scale's tokens attend to themselves and
to every cached earlier segment. The Encoder1 output (after ``cfg.split``
layers) of each patch produces the selection logits of its four children at
the next scale; the [REG] token at the top of the stack gives one box per
scale.

Two execution paths share the parameters:

* dense: every patch position is materialized; unselected ones carry the
  constant token. Used for training (soft factors) and as the
  physical-duplicate reference at evaluation.
* merged (evaluation, one sample): only kept patches are materialized plus a
  single constant representative whose keys count ``n_const`` times.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import (BLOCKED, AttnParams, KVCache, block_causal_bias, masked_mha,
                        mha_with_cache)
from .config import ModelConfig
from .embedder import PAD_ID, Embedder, TokenSequence
from .errors import ContractError, InputError
from .numerics import MacMeter, Tensor
from .params import ParamStore
from .pyramid import patch_coords, patchify_batch, pyramid_batch
from .selector import SelectionFactor, SelectionHeads, gate_children, replace_tokens, sample_selection


@dataclass
class ScanState:
    caches: KVCache
    boxes: list = field(default_factory=list)       # per scale, (B, 4) Tensor
    factors: list = field(default_factory=list)     # per scale, SelectionFactor
    flop_meter: MacMeter = field(default_factory=MacMeter)
    text_tokens: int = 0
    kept: list = field(default_factory=list)        # per scale, (B,) kept counts
    merged: bool = False
    encoder1: list = field(default_factory=list)    # per scale, Encoder1 patch features

    def box_array(self) -> np.ndarray:
        """``(S, B, 4)`` predicted boxes."""
        return np.stack([b.data for b in self.boxes])

    def selection_ratio(self, level: int) -> np.ndarray:
        return self.factors[level].s.data.mean(axis=-1)


class EncoderLayer:
    def __init__(self, cfg: ModelConfig, store: ParamStore):
        d = cfg.d
        self.ln1 = (store.ones("ln1.g", (d,)), store.zeros("ln1.b", (d,)))
        self.attn = AttnParams(store.glorot("attn.wqkv", d, 3 * d), store.zeros("attn.bqkv", (3 * d,)),
                               store.glorot("attn.wo", d, d), store.zeros("attn.bo", (d,)), cfg.heads)
        self.ln2 = (store.ones("ln2.g", (d,)), store.zeros("ln2.b", (d,)))
        self.w1 = store.glorot("ffn.w1", d, 4 * d)
        self.b1 = store.zeros("ffn.b1", (4 * d,))
        self.w2 = store.glorot("ffn.w2", 4 * d, d)
        self.b2 = store.zeros("ffn.b2", (d,))

    def ffn(self, x: Tensor) -> Tensor:
        h = nx.layer_norm(x, *self.ln2)
        return nx.linear(nx.gelu(nx.linear(h, self.w1, self.b1)), self.w2, self.b2)

    def __call__(self, x: Tensor, cache, tag, bias=None, const_index=None, n_const=0,
                 store_detached=True) -> Tensor:
        h = nx.layer_norm(x, *self.ln1)
        x = x + mha_with_cache(h, cache, self.attn, tag, bias, const_index, n_const, store_detached)
        return x + self.ffn(x)

    def full(self, x: Tensor, mask) -> Tensor:
        """The same block over a whole sequence under an explicit score mask."""
        x = x + masked_mha(nx.layer_norm(x, *self.ln1), self.attn, mask)
        return x + self.ffn(x)


class ScanFormer:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore(np.random.default_rng(cfg.seed))
        self.embedder = Embedder(cfg, self.store)
        self.layers = [EncoderLayer(cfg, self.store.child(f"layer{i}.")) for i in range(cfg.layers)]
        self.final_ln = (self.store.ones("final_ln.g", (cfg.d,)), self.store.zeros("final_ln.b", (cfg.d,)))
        self.selector = SelectionHeads(cfg, self.store)
        box = self.store.child("box.")
        self.box_w1, self.box_b1 = box.glorot("w1", cfg.d, cfg.d), box.zeros("b1", (cfg.d,))
        self.box_w2, self.box_b2 = box.glorot("w2", cfg.d, cfg.d), box.zeros("b2", (cfg.d,))
        self.box_w3, self.box_b3 = box.glorot("w3", cfg.d, 4), box.zeros("b3", (4,))
        self.coords = [patch_coords(*cfg.grid(l), cfg.patch, cfg.level_side(l)) for l in range(cfg.scales)]

    # -- parameters --------------------------------------------------------
    @property
    def params(self) -> "ParamStore":
        return self.store

    def astype(self, dtype) -> "ScanFormer":
        for t in self.store.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def zero_grad(self) -> None:
        nx.zero_grad(self.store.values())

    # -- heads ---------------------------------------------------------------
    def predict_box(self, reg_feat: Tensor) -> Tensor:
        """Shared d -> d -> d -> 4 perceptron with sigmoid outputs."""
        h = nx.gelu(nx.linear(reg_feat, self.box_w1, self.box_b1))
        h = nx.gelu(nx.linear(h, self.box_w2, self.box_b2))
        return nx.sigmoid(nx.linear(h, self.box_w3, self.box_b3))

    def _grad_flags(self):
        mode = self.cfg.cache_grad
        return mode == "none", mode != "all"   # (detach text segment, detach image segments)

    # -- text pass -----------------------------------------------------------
    def forward_text(self, text_ids, state: ScanState) -> ScanState:
        """Encode ``[CLS] + ids`` through every layer and cache the text segment.

        ``text_ids`` is ``(B, L)``; ``PAD_ID`` positions are masked out of
        every later attention.
        """
        if any(layer.segments for layer in state.caches.layers):
            raise ContractError("forward_text needs empty caches")
        ids = np.asarray(text_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        seq = self.embedder.embed_text(ids)
        pad = np.concatenate([np.zeros((ids.shape[0], 1), bool), ids == PAD_ID], axis=1)
        bias = np.where(pad, BLOCKED, 0.0).astype(seq.feats.dtype) if pad.any() else None
        detach_text, _ = self._grad_flags()
        x = seq.feats
        with nx.count_macs(state.flop_meter):
            for layer, cache in zip(self.layers, state.caches.layers):
                x = layer(x, cache, "text", bias, store_detached=detach_text)
        state.text_tokens = int((~pad).sum(axis=1).max())
        return state

    # -- one scale -----------------------------------------------------------
    def _run_stack(self, x: Tensor, state: ScanState, level: int, n_patch: int, const_index=None,
                   n_const=0):
        _, detach_img = self._grad_flags()
        enc1 = None
        for i, (layer, cache) in enumerate(zip(self.layers, state.caches.layers)):
            x = layer(x, cache, level, None, const_index, n_const, store_detached=detach_img)
            if i + 1 == self.cfg.split:
                enc1 = x[:, :n_patch]
        reg = nx.layer_norm(x[:, -1], *self.final_ln)
        return enc1, self.predict_box(reg)

    def forward_scale(self, level: int, patches: np.ndarray, factor: SelectionFactor,
                      state: ScanState, merge: bool = False):
        """Run scale ``level``; returns ``(box (B, 4), child logits (B, N_{l+1}) or None)``.

        ``patches`` is the ``(B, N_l, P*P*C)`` flattened level image and
        ``factor.s`` the ``(B, N_l)`` selection factors.
        """
        expected = state.caches[0].expected_tag()
        if expected != level:
            raise ContractError(f"scale {level} run where {expected!r} was expected")
        cfg, emb = self.cfg, self.embedder
        coords = self.coords[level]
        last = level == cfg.scales - 1
        with nx.count_macs(state.flop_meter):
            if not merge:
                tokens = emb.embed_patches(patches, coords).feats
                if level > 0:
                    tokens = replace_tokens(tokens, factor.s, emb.const_token())
                x = emb.append_reg(TokenSequence(tokens, ["patch"] * tokens.shape[1])).feats
                enc1, box = self._run_stack(x, state, level, tokens.shape[1])
                logits = None if last else self.selector.child_logits(level, enc1)
                kept = factor.s.data.sum(axis=-1)
            else:
                if patches.shape[0] != 1:
                    raise ContractError("merged scans take one sample at a time")
                s = factor.s.data[0]
                if ((s != 0) & (s != 1)).any():
                    raise ContractError("merged scans need hard selection factors")
                keep = np.flatnonzero(s == 1)
                n_rep = len(s) - len(keep)
                parts = [emb.embed_patches(patches[:, keep], coords[keep]).feats]
                const_index = None
                if n_rep:
                    const_index = len(keep)
                    parts.append(nx.reshape(emb.const_token(), (1, 1, cfg.d)))
                parts.append(nx.reshape(emb.reg_token(), (1, 1, cfg.d)))
                x = nx.concat(parts, axis=1)
                enc1, box = self._run_stack(x, state, level, len(keep), const_index, n_rep)
                logits = None if last else self.selector.child_logits(level, enc1, keep)
                kept = np.array([len(keep)], dtype=np.float64)
        state.boxes.append(box)
        state.encoder1.append(enc1)
        state.kept.append(kept)
        return box, logits

    # -- full scan -------------------------------------------------------------
    def scan(self, images, text_ids, mode: str = "eval", rng: np.random.Generator | None = None,
             merge: bool | None = None, branch: str | None = None) -> ScanState:
        """Text pass plus all scales, coarse to fine.

        ``images`` is ``(H, W, C)`` or ``(B, H, W, C)``; ``text_ids`` ``(L,)`` or
        ``(B, L)``. Merging defaults to on for single-sample evaluation. With a
        single sample, trailing padding is stripped from the text.
        """
        cfg = self.cfg
        images = np.asarray(images)
        ids = np.asarray(text_ids, dtype=np.int64)
        if images.ndim == 3:
            images = images[None]
        if ids.ndim == 1:
            ids = ids[None]
        if images.shape[1:] != (cfg.image, cfg.image, cfg.channels):
            raise InputError(f"image shape {images.shape[1:]} does not match the model config")
        if images.shape[0] != ids.shape[0]:
            raise InputError(f"{images.shape[0]} images for {ids.shape[0]} queries")
        batch = images.shape[0]
        if merge is None:
            merge = mode == "eval" and batch == 1
        if merge and mode != "eval":
            raise ContractError("merged scans are evaluation-only")
        if batch == 1:
            ids = ids[:, ids[0] != PAD_ID]
        dtype = self.store["text.word"].dtype
        levels = pyramid_batch(images.astype(dtype, copy=False), cfg.scales)
        state = ScanState(KVCache.empty(cfg.layers), merged=merge)
        self.forward_text(ids, state)
        factor = SelectionFactor.all_selected((batch, cfg.tokens(0)), dtype)
        for level in range(cfg.scales):
            state.factors.append(factor)
            patches = patchify_batch(levels[level], cfg.patch)
            _, logits = self.forward_scale(level, patches, factor, state, merge)
            if logits is None:
                break
            child = sample_selection(logits, mode, rng, branch)
            parent_s = factor.s
            child.s = gate_children(child.s, parent_s, self.selector.parent_of(level))
            factor = child
        return state

    # -- reference path ----------------------------------------------------------
    def full_sequence(self, images, text_ids, factors, future_zero_from: int | None = None):
        """One pass over ``[text; scale 0; ...; scale S-1]`` under the block-causal mask.

        ``factors`` are the per-scale ``(B, N_l)`` selection factors (for
        example taken from a dense scan). Segments from ``future_zero_from``
        on are zero-filled before encoding. Returns ``(boxes (S, B, 4),
        features (B, n, d), segment lengths)``.
        """
        cfg, emb = self.cfg, self.embedder
        images = np.asarray(images)
        ids = np.asarray(text_ids, dtype=np.int64)
        if images.ndim == 3:
            images, ids = images[None], ids[None]
        dtype = self.store["text.word"].dtype
        text = emb.embed_text(ids).feats
        pad = np.concatenate([np.zeros((ids.shape[0], 1), bool), ids == PAD_ID], axis=1)
        levels = pyramid_batch(images.astype(dtype, copy=False), cfg.scales)
        parts, lengths = [text], [text.shape[1]]
        for level in range(cfg.scales):
            tokens = emb.embed_patches(patchify_batch(levels[level], cfg.patch), self.coords[level]).feats
            if level > 0:
                s = np.asarray(getattr(factors[level], "data", factors[level]), dtype=dtype)
                tokens = replace_tokens(tokens, Tensor(s), emb.const_token())
            seq = nx.concat([tokens, nx.broadcast_to(emb.reg_token(), (tokens.shape[0], 1, cfg.d))], axis=1)
            if future_zero_from is not None and level >= future_zero_from:
                seq = Tensor(np.zeros(seq.shape, dtype=dtype))
            parts.append(seq)
            lengths.append(seq.shape[1])
        x = nx.concat(parts, axis=1)
        key_bias = np.concatenate([np.where(pad, BLOCKED, 0.0), np.zeros((len(pad), sum(lengths[1:])))], axis=1)
        mask = block_causal_bias(lengths)[None, None] + key_bias[:, None, None, :].astype(np.float32)
        for layer in self.layers:
            x = layer.full(x, mask)
        ends = np.cumsum(lengths)
        boxes = [self.predict_box(nx.layer_norm(x[:, e - 1], *self.final_ln)).data for e in ends[1:]]
        return np.stack(boxes), x.data, lengths
