"""Learned patch selection.

Each patch of scale ``l + 1`` gets a logit from the Encoder1 output of its
parent patch at scale ``l``. During training the logit is perturbed with
Gaussian noise and the forward pass picks, per patch and with equal odds,
either the soft value ``sharp_sigmoid(r + n)`` or the hard value
``1[r + n >= 0]``; the backward pass always differentiates the soft value.
Evaluation is noise-free and hard.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .numerics import Tensor
from .params import ParamStore
from .pyramid import child_table, parent_table

# Largest input at which sharp_sigmoid is exactly 0: 1.2 * sigmoid(x) = 0.1.
CLAMP_LOW = math.log(1.0 / 11.0)
# Smallest input at which it is exactly 1: 1.2 * sigmoid(x) = 1.1.
CLAMP_HIGH = math.log(11.0)


def sharp_sigmoid(x) -> Tensor:
    """``clamp(1.2 * sigmoid(x) - 0.1, 0, 1)``; flat (zero gradient) where clamped."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    return nx.clip(nx.sigmoid(x) * 1.2 - 0.1, 0.0, 1.0)


@dataclass
class SelectionFactor:
    """Selection state for every patch of one scale (arrays share the patch axis)."""

    r: Tensor | None       # logits; None at the coarsest scale
    n: np.ndarray          # Gaussian noise (zeros in eval)
    n_s: np.ndarray        # branch draw; v1 is used where n_s >= 0.5
    v1: Tensor             # soft value
    v2: np.ndarray         # hard value
    s: Tensor              # factor applied to the tokens
    mode: str

    @property
    def used_soft(self) -> np.ndarray:
        return self.n_s >= 0.5

    @property
    def hard(self) -> np.ndarray:
        return self.s.data

    @classmethod
    def all_selected(cls, shape, dtype=np.float32) -> "SelectionFactor":
        ones = np.ones(shape, dtype=dtype)
        return cls(None, np.zeros(shape), np.zeros(shape), Tensor(ones), ones.copy(), Tensor(ones), "eval")


def sample_selection(r: Tensor, mode: str, rng: np.random.Generator | None = None,
                     branch: str | None = None) -> SelectionFactor:
    """Draw selection factors for logits ``r``.

    ``branch`` forces every patch onto ``"v1"`` or ``"v2"`` (probing and
    gradient checks); by default the branch is drawn uniformly.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be train or eval, got {mode!r}")
    shape = r.shape
    if mode == "train":
        if rng is None:
            raise ContractError("training-mode selection needs an rng")
        n = rng.standard_normal(shape).astype(r.dtype)
        n_s = rng.random(shape)
    else:
        n = np.zeros(shape, dtype=r.dtype)
        n_s = np.zeros(shape)
    if branch == "v1":
        n_s = np.ones(shape)
    elif branch == "v2":
        n_s = np.zeros(shape)
    elif branch is not None:
        raise ContractError(f"branch must be v1 or v2, got {branch!r}")
    rn = r + n
    v1 = sharp_sigmoid(rn)
    v2 = (rn.data >= 0).astype(r.dtype)
    if mode == "eval":
        s = nx.straight_through(v1, v2)
    else:
        s = nx.straight_through(v1, np.where(n_s >= 0.5, v1.data, v2))
    return SelectionFactor(r, n, n_s, v1, v2, s, mode)


def replace_tokens(tokens: Tensor, s: Tensor, const_token: Tensor) -> Tensor:
    """Row-wise ``s * tokens + (1 - s) * const_token`` over ``(..., N, d)`` tokens."""
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=tokens.dtype))
    if s.shape != tokens.shape[:-1]:
        raise ContractError(f"factors {s.shape} do not match tokens {tokens.shape}")
    if (s.data < 0).any() or (s.data > 1).any():
        raise ContractError("selection factors must lie in [0, 1]")
    sb = nx.broadcast_to(nx.reshape(s, s.shape + (1,)), tokens.shape)
    return sb * tokens + (1.0 - sb) * const_token


def gate_children(child_s: Tensor, parent_s: Tensor, parent_of: np.ndarray) -> Tensor:
    """Multiply each child's factor by its parent's (0 parents silence their children)."""
    return child_s * parent_s[:, parent_of]


class SelectionHeads:
    """One LayerNorm + ``d -> 4`` head per scale transition; logits land in child order."""

    def __init__(self, cfg, store: ParamStore):
        self.cfg = cfg
        self.heads = []
        for lvl in range(cfg.scales - 1):
            sub = store.child(f"select{lvl}.")
            self.heads.append((sub.ones("ln.g", (cfg.d,)), sub.zeros("ln.b", (cfg.d,)),
                               sub.glorot("w", cfg.d, 4), sub.zeros("b", (4,))))
        # slot[c] = 4 * parent + k where c is the parent's k-th child
        self.slots = []
        self.parents = []
        for lvl in range(cfg.scales - 1):
            table = child_table(cfg.grid(lvl))
            slot = np.empty(table.size, dtype=np.int64)
            slot[table.reshape(-1)] = np.arange(table.size)
            self.slots.append(slot)
            self.parents.append(parent_table(cfg.grid(lvl)))

    def child_logits(self, level: int, parent_feats: Tensor, parent_index=None) -> Tensor:
        """Logits ``(B, N_{l+1})`` for the children of the given level-``l`` parents.

        ``parent_index`` lists which parents the rows of ``parent_feats`` are
        (all of them, in order, when omitted); children of absent parents get
        logit 0 and are expected to be gated off by the caller.
        """
        if level >= self.cfg.scales - 1:
            raise ContractError(f"level {level} is the finest scale; it has no children")
        g, b, w, bias = self.heads[level]
        logits4 = nx.linear(nx.layer_norm(parent_feats, g, b), w, bias)  # (B, n, 4)
        batch = parent_feats.shape[0]
        n_parents = self.cfg.tokens(level)
        if parent_index is not None:
            parent_index = np.asarray(parent_index, dtype=np.int64)
            if len(parent_index) != n_parents or (parent_index != np.arange(n_parents)).any():
                full = Tensor(np.zeros((batch, n_parents, 4), dtype=logits4.dtype))
                if len(parent_index):
                    full = _scatter_rows(full, logits4, parent_index)
                logits4 = full
        flat = nx.reshape(logits4, (batch, n_parents * 4))
        return flat[:, self.slots[level]]

    def parent_of(self, level: int) -> np.ndarray:
        """Parent index (at ``level``) of every patch at ``level + 1``."""
        return self.parents[level]


def _scatter_rows(base: Tensor, rows: Tensor, index: np.ndarray) -> Tensor:
    """Place ``rows[:, j]`` at ``index[j]`` along axis 1; other positions keep ``base`` (zeros)."""
    n = base.shape[1]
    pos = np.full(n, len(index))
    pos[index] = np.arange(len(index))
    return nx.concat([rows, base[:, :1]], axis=1)[:, pos]
