"""AdamW training, evaluation and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ModelConfig, TrainConfig
from .errors import InputError, TrainingError
from .model import ScanFormer
from .objectives import detection_loss, iou_batch, sparsity_loss, sparsity_targets
from .synthgym import Dataset

log = logging.getLogger(__name__)


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, state: OptimState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.0) -> None:
    """One decoupled-weight-decay Adam update of every parameter that has a gradient."""
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype)


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warm-up from 0 to the peak, then linear decay to 0 at ``total_steps``."""
    if step < 0:
        raise InputError("step must be non-negative")
    warm = cfg.warmup_steps
    if warm and step < warm:
        return cfg.peak_lr * step / warm
    span = max(total_steps - warm, 1)
    return cfg.peak_lr * max(0.0, 1.0 - (step - warm) / span)


def clip_global_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# -- evaluation -------------------------------------------------------------------

@dataclass
class EvalResult:
    boxes: np.ndarray       # (n, S, 4)
    ious: np.ndarray        # (n, S)
    kept: np.ndarray        # (n, S) kept patch counts
    macs: np.ndarray        # (n,)
    totals: list            # tokens per scale

    @property
    def acc(self) -> np.ndarray:
        """Per-scale Acc@0.5 in percent."""
        return 100.0 * (self.ious > 0.5).mean(axis=0)

    @property
    def mean_iou(self) -> np.ndarray:
        return self.ious.mean(axis=0)

    @property
    def ratio(self) -> np.ndarray:
        return (self.kept / np.asarray(self.totals)).mean(axis=0)


def evaluate(model: ScanFormer, data: Dataset, merge: bool = True, batch_size: int = 64) -> EvalResult:
    """Noise-free scans over ``data``; merged scans go one sample at a time."""
    n, scales = len(data), model.cfg.scales
    if n == 0:
        raise InputError("evaluation set is empty")
    boxes = np.zeros((n, scales, 4))
    kept = np.zeros((n, scales))
    macs = np.zeros(n)
    with nx.no_grad():
        if merge:
            for i in range(n):
                st = model.scan(data.images[i], data.ids[i], mode="eval", merge=True)
                boxes[i] = st.box_array()[:, 0]
                kept[i] = [k[0] for k in st.kept]
                macs[i] = st.flop_meter.macs
        else:
            for lo in range(0, n, batch_size):
                sl = slice(lo, min(n, lo + batch_size))
                st = model.scan(data.images[sl], data.ids[sl], mode="eval", merge=False)
                boxes[sl] = st.box_array().transpose(1, 0, 2)
                kept[sl] = np.stack(st.kept, axis=1)
                macs[sl] = st.flop_meter.macs / (sl.stop - sl.start)
    gt = np.asarray(data.boxes)
    ious = np.stack([iou_batch(boxes[:, l], gt) for l in range(scales)], axis=1)
    return EvalResult(boxes, ious, kept, macs, [model.cfg.tokens(l) for l in range(scales)])


# -- training ------------------------------------------------------------------------

def train_step(model: ScanFormer, images, ids, gt, rng, lam_sparse: float = 0.05):
    """Forward + backward on one batch; returns ``(total, bbox, sparse, state)`` losses."""
    model.zero_grad()
    st = model.scan(images, ids, mode="train", rng=rng)
    l_box = detection_loss(st.boxes, gt)
    l_sp = sparsity_loss([f.s for f in st.factors], sparsity_targets(model.cfg.scales), lam_sparse)
    total = l_box + l_sp
    total.backward()
    return total.item(), l_box.item(), l_sp.item(), st


METRIC_HEADER = "epoch,l_bbox,l_sparse,{acc},{ratio},mean_macs"


def metric_header(scales: int) -> str:
    return METRIC_HEADER.format(acc=",".join(f"acc{l}" for l in range(scales)),
                                ratio=",".join(f"ratio{l}" for l in range(scales)))


def train(model: ScanFormer, cfg: TrainConfig, train_data: Dataset, val_data: Dataset | None = None,
          out_dir=None, checkpoint=None, progress=None) -> list[dict]:
    """Minimize L_bbox + L_sparse; returns one metrics dict per epoch.

    With ``out_dir`` the per-epoch metrics go to ``metrics.csv``; with
    ``checkpoint`` the best-by-validation (scale-finest Acc@0.5) weights are
    saved there.
    """
    n = len(train_data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.warmup_steps > total_steps:
        raise TrainingError(f"warm-up of {cfg.warmup_steps} steps exceeds {total_steps} total steps")
    state = OptimState()
    order_rng = np.random.default_rng([cfg.seed, 0])
    params = model.store
    history, best = [], -1.0
    csv_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        csv_path = Path(out_dir) / "metrics.csv"
        csv_path.write_text(metric_header(model.cfg.scales) + "\n")
    step = 0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        sums = np.zeros(2)
        for b in range(steps_per_epoch):
            idx = np.sort(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            rng = np.random.default_rng([cfg.seed, 1, step])
            try:
                total, l_box, l_sp, _ = train_step(model, train_data.images[idx], train_data.ids[idx],
                                                   train_data.boxes[idx], rng, cfg.lambda_sparse)
            except nx.NumericalError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            if not math.isfinite(total):
                raise TrainingError(f"epoch {epoch} batch {b}: loss is {total}")
            clip_global_norm(params.values(), cfg.clip_norm)
            adamw_step(params, state, lr_at(step, cfg, total_steps), cfg.beta1, cfg.beta2, cfg.eps,
                       cfg.weight_decay)
            sums += (l_box, l_sp)
            step += 1
            if progress is not None:
                progress(epoch, b, total)
        row = {"epoch": epoch, "l_bbox": sums[0] / steps_per_epoch, "l_sparse": sums[1] / steps_per_epoch}
        if val_data is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            res = evaluate(model, val_data, merge=False)
            for l in range(model.cfg.scales):
                row[f"acc{l}"] = float(res.acc[l])
            for l in range(model.cfg.scales):
                row[f"ratio{l}"] = float(res.ratio[l])
            row["mean_macs"] = float(res.macs.mean())
            score = float(res.acc[-1])
            if checkpoint is not None and score > best:
                best = score
                save_checkpoint(model, checkpoint)
        history.append(row)
        log.info("epoch %d %s", epoch, row)
        if csv_path is not None:
            with csv_path.open("a") as fh:
                fh.write(format_metric_row(row, model.cfg.scales) + "\n")
    if checkpoint is not None and best < 0:
        save_checkpoint(model, checkpoint)
    return history


def format_metric_row(row: dict, scales: int) -> str:
    keys = ["l_bbox", "l_sparse"] + [f"acc{l}" for l in range(scales)] + \
           [f"ratio{l}" for l in range(scales)] + ["mean_macs"]
    vals = [str(row["epoch"])] + [f"{row[k]:.6f}" if k in row else "" for k in keys]
    return ",".join(vals)


# -- checkpoints -------------------------------------------------------------------
# Layout: 8-byte little-endian manifest length, UTF-8 JSON manifest
# {"config": ..., "tensors": [{"name", "shape", "offset"}, ...]}, then the
# tensors as little-endian float32 at the listed byte offsets of the payload.

def save_checkpoint(model: ScanFormer, path) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in model.store.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"config": asdict(model.cfg), "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ScanFormer:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise InputError(f"{path}: truncated checkpoint")
    (size,) = struct.unpack("<Q", raw[:8])
    try:
        manifest = json.loads(raw[8:8 + size])
    except ValueError as exc:
        raise InputError(f"{path}: unreadable checkpoint manifest") from exc
    model = ScanFormer(ModelConfig(**manifest["config"]))
    payload = memoryview(raw)[8 + size:]
    names = {e["name"] for e in manifest["tensors"]}
    if names != set(model.store):
        raise InputError(f"{path}: parameter set does not match the configured model")
    for e in manifest["tensors"]:
        t = model.store[e["name"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if end > len(payload):
            raise InputError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        t.data = arr.astype(np.float32)
    return model
