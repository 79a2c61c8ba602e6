"""Pixel-to-pixel training and inference machinery.

Covers sample splitting, patch sampling with augmentation, the sparse-
label cross-entropy, sliding-window inference with overlap averaging,
classification metrics, and the compact-network training loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import optim
from .tensor import Tensor, backward, default_dtype, log_softmax, no_grad

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# sample splitting


@dataclass
class SampleSplit:
    train: np.ndarray   # (n, 2) row/col coordinates
    val: np.ndarray
    test: np.ndarray
    seed: int

    def counts(self):
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def sample_split(labels, n_train_per_class, n_val_per_class, seed) -> SampleSplit:
    """Uniform per-class draw without replacement; the rest becomes test."""
    labels = np.asarray(labels)
    classes = sorted(int(c) for c in np.unique(labels) if c > 0)
    if not classes:
        raise ValueError("label map has no labeled pixels")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in classes:
        coords = np.argwhere(labels == c)
        if len(coords) == 0:
            raise ValueError(f"class {c} has no labeled pixels")
        want = n_train_per_class + n_val_per_class
        if len(coords) < want:
            logger.warning("class %d has only %d labeled pixels (< %d); taking all",
                           c, len(coords), want)
        order = rng.permutation(len(coords))
        coords = coords[order]
        n_tr = min(n_train_per_class, len(coords))
        n_va = min(n_val_per_class, len(coords) - n_tr)
        train.append(coords[:n_tr])
        val.append(coords[n_tr : n_tr + n_va])
        test.append(coords[n_tr + n_va :])
    cat = lambda parts: (np.concatenate(parts, axis=0) if parts else np.zeros((0, 2), dtype=int))
    return SampleSplit(train=cat(train), val=cat(val), test=cat(test), seed=seed)


def masked_labels(labels, coords):
    """Label map exposing only the given coordinates (everything else 0)."""
    out = np.zeros_like(labels)
    if len(coords):
        out[coords[:, 0], coords[:, 1]] = labels[coords[:, 0], coords[:, 1]]
    return out


# ---------------------------------------------------------------------------
# patch sampling and augmentation


def rotate90(arr, k):
    """Rotate the trailing two axes clockwise k quarter turns."""
    return np.rot90(arr, k=-k, axes=(-2, -1))


def augment_pair(patch, label_patch, rng):
    """Joint random flips and quarter rotations of a cube slice and labels."""
    if rng.random() < 0.5:
        patch = patch[..., ::-1, :]
        label_patch = label_patch[..., ::-1, :]
    if rng.random() < 0.5:
        patch = patch[..., :, ::-1]
        label_patch = label_patch[..., :, ::-1]
    k = int(rng.integers(0, 4))
    if k:
        patch = rotate90(patch, k)
        label_patch = rotate90(label_patch, k)
    return np.ascontiguousarray(patch), np.ascontiguousarray(label_patch)


class PatchSampler:
    """Yields training batches of cube patches with sparse label maps.

    Each patch is anchored on a random labeled pixel of the split so the
    masked loss always has support. Augmentation applies flips and
    90-degree rotations jointly to the cube slice and the label slice.
    """

    def __init__(self, cube_data, labels, coords, patch, batch, seed, augment=True):
        if patch > min(labels.shape):
            raise ValueError(f"patch {patch} exceeds cube extent {labels.shape}")
        if len(coords) == 0:
            raise ValueError("cannot sample batches from an empty coordinate set")
        self.data = cube_data
        self.labels = masked_labels(labels, coords)
        self.coords = coords
        self.patch = patch
        self.batch = batch
        self.augment = augment
        self.rng = np.random.default_rng(seed)

    def next_batch(self):
        p = self.patch
        H, W = self.labels.shape
        xs, ys = [], []
        for _ in range(self.batch):
            r, c = self.coords[int(self.rng.integers(0, len(self.coords)))]
            oy = int(self.rng.integers(max(0, r - p + 1), min(H - p, r) + 1))
            ox = int(self.rng.integers(max(0, c - p + 1), min(W - p, c) + 1))
            cube_patch = self.data[:, oy : oy + p, ox : ox + p]
            label_patch = self.labels[oy : oy + p, ox : ox + p]
            if self.augment:
                cube_patch, label_patch = augment_pair(cube_patch, label_patch, self.rng)
            xs.append(cube_patch[None])
            ys.append(label_patch)
        x = np.stack(xs).astype(default_dtype())
        y = np.stack(ys).astype(np.int32)
        return x, y


# ---------------------------------------------------------------------------
# sparse-label loss


def masked_cross_entropy(logits, labels):
    """Mean cross entropy over labeled pixels only (label 0 is ignored).

    logits: Tensor (B, C, H, W); labels: int array (B, H, W) with values
    in 0..C. Raises if the batch contains no labeled pixel.
    """
    labels = np.asarray(labels)
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    mask = labels > 0
    n = int(mask.sum())
    if n == 0:
        raise ValueError("batch has no labeled pixels; resample upstream")
    b, r, c = np.nonzero(mask)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[b, labels[mask] - 1, r, c] = 1.0
    logp = log_softmax(logits, axis=1)
    return (logp * Tensor(onehot)).sum() * (-1.0 / n)


# ---------------------------------------------------------------------------
# sliding-window inference


def tile_positions(extent, window, stride):
    """Start offsets covering [0, extent); the last window is edge-aligned."""
    if window > extent:
        raise ValueError(f"window {window} exceeds extent {extent}")
    positions = list(range(0, extent - window + 1, stride))
    if positions[-1] != extent - window:
        positions.append(extent - window)
    return positions


def _softmax_np(logits, axis):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def infer_overlap(predict_fn, cube_data, window, num_classes, overlap=True, tile_batch=8):
    """Dense prediction by sliding a fixed window over the cube.

    ``predict_fn`` maps a batch (N, 1, bands, window, window) to logits
    (N, C, window, window). With overlap enabled the stride is half the
    window and per-pixel class probabilities are averaged over every
    covering window; otherwise tiles abut. Returns (class map with values
    1..C, averaged probability map (C, H, W), coverage counts (H, W)).
    """
    bands, H, W = cube_data.shape
    stride = max(1, window // 2) if overlap else window
    ys = tile_positions(H, window, stride)
    xs = tile_positions(W, window, stride)
    origins = [(y, x) for y in ys for x in xs]

    probs = np.zeros((num_classes, H, W), dtype=np.float64)
    counts = np.zeros((H, W), dtype=np.int64)
    for lo in range(0, len(origins), tile_batch):
        chunk = origins[lo : lo + tile_batch]
        batch = np.stack([cube_data[:, y : y + window, x : x + window] for y, x in chunk])
        logits = predict_fn(batch[:, None].astype(default_dtype()))
        p = _softmax_np(np.asarray(logits, dtype=np.float64), axis=1)
        for (y, x), tile in zip(chunk, p):
            probs[:, y : y + window, x : x + window] += tile
            counts[y : y + window, x : x + window] += 1
    probs /= counts[None]
    class_map = probs.argmax(axis=0).astype(np.int32) + 1
    return class_map, probs, counts


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    confusion: np.ndarray      # (C, C) counts, rows = truth, cols = prediction
    per_class: np.ndarray      # recall per class, NaN when absent from eval set
    oa: float
    aa: float
    kappa: float

    def to_dict(self):
        return {
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in self.per_class],
            "oa": float(self.oa),
            "aa": float(self.aa),
            "kappa": float(self.kappa),
        }

    def to_text(self, class_names=None):
        C = self.confusion.shape[0]
        names = class_names or [f"class_{k}" for k in range(1, C + 1)]
        width = max(len(n) for n in names) + 2
        lines = ["per-class accuracy:"]
        for name, v in zip(names, self.per_class):
            shown = "   n/a" if np.isnan(v) else f"{v:6.4f}"
            lines.append(f"  {name:<{width}} {shown}")
        lines.append(f"OA    {self.oa:.4f}")
        lines.append(f"AA    {self.aa:.4f}")
        lines.append(f"kappa {self.kappa:.4f}")
        return "\n".join(lines)


def confusion_matrix(pred, truth, num_classes):
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (truth - 1, pred - 1), 1)
    return conf


def metrics_from_confusion(conf) -> MetricsReport:
    conf = np.asarray(conf, dtype=np.int64)
    total = conf.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    oa = np.trace(conf) / total
    row = conf.sum(axis=1)
    col = conf.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(row > 0, np.diag(conf) / row, np.nan)
    aa = float(np.nanmean(per_class))
    pe = float((row * col).sum()) / (total * total)
    kappa = (oa - pe) / (1.0 - pe) if pe < 1.0 else 1.0
    return MetricsReport(confusion=conf, per_class=per_class, oa=float(oa), aa=aa, kappa=float(kappa))


def compute_metrics(pred_map, labels, eval_coords, num_classes) -> MetricsReport:
    """Confusion-matrix metrics over an evaluation coordinate set."""
    eval_coords = np.asarray(eval_coords)
    if len(eval_coords) == 0:
        raise ValueError("empty evaluation set")
    truth = labels[eval_coords[:, 0], eval_coords[:, 1]]
    if np.any(truth <= 0):
        raise ValueError("evaluation set contains unlabeled pixels")
    pred = pred_map[eval_coords[:, 0], eval_coords[:, 1]]
    return metrics_from_confusion(confusion_matrix(pred, truth, num_classes))


def accuracy_on_coords(class_map, labels, coords):
    truth = labels[coords[:, 0], coords[:, 1]]
    pred = class_map[coords[:, 0], coords[:, 1]]
    return float((pred == truth).mean())


def cross_entropy_on_coords(prob_map, labels, coords):
    truth = labels[coords[:, 0], coords[:, 1]]
    p = prob_map[truth - 1, coords[:, 0], coords[:, 1]]
    return float(-np.log(np.clip(p, 1e-12, None)).mean())


# ---------------------------------------------------------------------------
# compact-network training


@dataclass
class TrainedModel:
    state: dict                # best parameter/buffer arrays
    best_iter: int
    best_val_oa: float
    best_val_loss: float
    log: list = field(default_factory=list)


def _model_predict_fn(net):
    def fn(batch):
        with no_grad():
            return net(Tensor(batch)).data
    return fn


def evaluate_model(net, cube_data, labels, coords, window, num_classes, overlap=False):
    """Tiled inference restricted to a coordinate set; returns (oa, ce loss)."""
    was_training = net.training
    net.eval()
    class_map, prob_map, _ = infer_overlap(_model_predict_fn(net), cube_data,
                                          window, num_classes, overlap=overlap)
    if was_training:
        net.train()
    return (accuracy_on_coords(class_map, labels, coords),
            cross_entropy_on_coords(prob_map, labels, coords))


def train_compact(net, cube, split, cfg, seed=None, progress=None) -> TrainedModel:
    """Poly-decay SGD training of a compact network on sparse labels.

    Validates by tiled inference every ``val_iters`` iterations and keeps
    the checkpoint with the best accuracy (ties: lower loss, then earlier).
    """
    tc = cfg.train
    seed = cfg.seed if seed is None else seed
    sampler = PatchSampler(cube.data, cube.labels, split.train, tc.patch, tc.batch,
                           seed=seed, augment=tc.augment)
    params = net.parameters()
    sgd = optim.SGD(params, lr=tc.init_lr, momentum=cfg.sgd.momentum,
                    weight_decay=cfg.sgd.weight_decay)
    best = None
    log = []
    net.train()
    for it in range(tc.iters):
        sgd.lr = optim.poly_lr(it, tc.iters, tc.init_lr, tc.power)
        x, y = sampler.next_batch()
        net.zero_grad()
        loss = masked_cross_entropy(net(Tensor(x)), y)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            logger.error("training diverged at iteration %d (loss=%r)", it, loss_val)
            raise RuntimeError(f"training loss became non-finite at iteration {it}")
        grads = backward(loss)
        optim.clip_grad_norm(grads, tc.grad_clip)
        sgd.step(grads)
        if (it + 1) % tc.val_iters == 0 or it + 1 == tc.iters:
            val_oa, val_loss = evaluate_model(net, cube.data, cube.labels, split.val,
                                              tc.patch, cube.num_classes)
            entry = {"iter": it + 1, "train_loss": loss_val,
                     "val_oa": val_oa, "val_loss": val_loss,
                     "lr": sgd.lr}
            log.append(entry)
            key = (-val_oa, val_loss, it + 1)
            if best is None or key < best[0]:
                best = (key, {k: v.copy() for k, v in net.state_dict().items()}, entry)
            if progress:
                progress(entry)
    if best is None:
        raise RuntimeError("no validation point was recorded; check val_iters")
    _, best_state, best_entry = best
    net.load_state_dict(best_state)
    return TrainedModel(state=best_state, best_iter=best_entry["iter"],
                        best_val_oa=best_entry["val_oa"],
                        best_val_loss=best_entry["val_loss"], log=log)
