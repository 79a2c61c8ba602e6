"""Supernet assembly and the bilevel architecture search loop.

The supernet stacks a spectral-reducing stem, L layers that each fuse a
space-dominated and a spectrum-dominated supercell, and a head that
pools the spectral axis and projects to per-pixel class logits. Search
alternates one Adam step on the architecture logits (validation batch)
with one SGD step on the operation weights (training batch) after a
weights-only warm-up.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn, optim
from .checkpoint import save_checkpoint
from .pipeline import PatchSampler, accuracy_on_coords, cross_entropy_on_coords, \
    masked_cross_entropy, infer_overlap
from .search_space import SuperLayer
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


def depth_plan(bands, num_layers):
    """Spectral depth at the stem output and at each layer.

    The stem halves the band count; each later layer transition halves
    the working depth again, never dropping below 1.
    """
    stem_depth = nn.conv_out_extent(bands, 3, 2, 1)
    depths = [stem_depth]
    for _ in range(1, num_layers):
        prev = depths[-1]
        depths.append(max(1, (prev - 1) // 2 + 1 if prev > 1 else 1))
    return stem_depth, depths


def _stride_for(d_in, d_out):
    s = math.ceil(d_in / d_out)
    if (d_in - 1) // s + 1 != d_out:
        raise ValueError(f"no integer stride maps depth {d_in} to {d_out}")
    return s


class Stem(nn.Module):
    """Conv(3x1x1, spectral stride 2) from the raw band axis to ``width``."""

    def __init__(self, width, rng=None):
        super().__init__()
        self.conv = nn.Conv3d(1, width, (3, 1, 1), stride=(2, 1, 1), padding=(1, 0, 0), rng=rng)
        self.bn = nn.BatchNorm(width)
        self.act = nn.LeakyReLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Head(nn.Module):
    """Spectral global average pool, then a per-pixel linear classifier.

    Accepts (B, C, D, H, W) and pools the spectral axis, or already-pooled
    (B, C, H, W) features.
    """

    def __init__(self, in_channels, num_classes, rng=None):
        super().__init__()
        self.proj = nn.Linear(in_channels, num_classes, bias=True, rng=rng)

    def forward(self, x):
        if x.ndim == 5:
            x = x.mean(axis=2)                       # (B, C, H, W)
        tokens = x.transpose(0, 2, 3, 1)             # (B, H, W, C)
        return self.proj(tokens).transpose(0, 3, 1, 2)


def layer_io_channels(layer_index, width, num_nodes):
    cell_out = num_nodes * width
    if layer_index == 0:
        return (width, width)
    if layer_index == 1:
        return (cell_out, width)
    return (cell_out, cell_out)


def layer_strides(layer_index, depths, stem_depth):
    target = depths[layer_index]
    d_prev = depths[layer_index - 1] if layer_index >= 1 else stem_depth
    d_prev2 = depths[layer_index - 2] if layer_index >= 2 else stem_depth
    return (_stride_for(d_prev, target), _stride_for(d_prev2, target))


class SuperNet(nn.Module):
    def __init__(self, bands, num_classes, num_layers, num_nodes, width, seed=0):
        super().__init__()
        self.bands = bands
        self.num_classes = num_classes
        self.num_layers = num_layers
        self.num_nodes = num_nodes
        self.width = width
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.stem_depth, self.depths = depth_plan(bands, num_layers)
        self.stem = Stem(width, rng=rng)
        layers = []
        for l in range(num_layers):
            layers.append(SuperLayer(num_nodes, width,
                                     layer_io_channels(l, width, num_nodes),
                                     layer_strides(l, self.depths, self.stem_depth), rng=rng))
        self.layers = nn.ModuleList(layers)
        self.head = Head(num_nodes * width, num_classes, rng=rng)
        self.bind_names()

    def forward(self, x):
        if x.shape[1] != 1 or x.shape[2] != self.bands:
            raise ValueError(f"expected input (B, 1, {self.bands}, H, W), got {x.shape}")
        s = self.stem(x)
        prev, prev2 = s, s
        for layer in self.layers:
            prev, prev2 = layer(prev, prev2), prev
        return self.head(prev)

    def weight_parameters(self):
        return [p for p in self.parameters() if p.group == "weight"]

    def arch_parameters(self):
        return [p for p in self.parameters() if p.group == "arch"]

    def arch_snapshot(self):
        return {p.name: p.data.copy() for p in self.arch_parameters()}

    def load_arch_snapshot(self, snapshot):
        for p in self.arch_parameters():
            if p.name not in snapshot:
                raise KeyError(f"snapshot is missing arch parameter {p.name!r}")
            p.data = np.asarray(snapshot[p.name], dtype=p.data.dtype).copy()

    def parameter_report(self):
        w = sum(p.size for p in self.weight_parameters())
        a = sum(p.size for p in self.arch_parameters())
        return {"weight": int(w), "arch": int(a),
                "mixed_edges": sum(1 for l in self.layers
                                   for cell in (l.spa, l.spe)
                                   for _ in cell.edge_iter())}


def build_supernet(cfg, bands, num_classes, seed=None) -> SuperNet:
    """Deterministic supernet construction from a run config."""
    sn = cfg.supernet
    if sn.width < 1 or sn.nodes < 1 or sn.layers < 1:
        raise ValueError("layers, nodes and width must all be >= 1")
    net = SuperNet(bands, num_classes, sn.layers, sn.nodes, sn.width,
                   seed=cfg.seed if seed is None else seed)
    report = net.parameter_report()
    logger.info("supernet built: %d weight params, %d arch logits over %d mixed edges",
                report["weight"], report["arch"], report["mixed_edges"])
    return net


# ---------------------------------------------------------------------------
# search


@dataclass
class SearchRecord:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_oa: float = -1.0
    best_val_loss: float = float("inf")
    best_arch: dict = field(default_factory=dict)

    def consider(self, epoch, val_oa, val_loss, arch_snapshot):
        key = (-val_oa, val_loss, epoch)
        cur = (-self.best_val_oa, self.best_val_loss, self.best_epoch)
        if self.best_epoch < 0 or key < cur:
            self.best_epoch = epoch
            self.best_val_oa = val_oa
            self.best_val_loss = val_loss
            self.best_arch = arch_snapshot

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_oa": self.best_val_oa,
            "best_val_loss": self.best_val_loss,
            "best_arch": {k: v.tolist() for k, v in self.best_arch.items()},
        }


def _weight_step(net, sgd, batch, grad_clip=0.0):
    x, y = batch
    net.zero_grad()
    loss = masked_cross_entropy(net(Tensor(x)), y)
    grads = backward(loss)
    optim.clip_grad_norm(grads, grad_clip)
    sgd.step(grads)
    return float(loss.data)


def warmup_epoch(net, sampler, sgd, iters, grad_clip=0.0):
    """Weights-only updates; architecture logits stay untouched."""
    losses = [_weight_step(net, sgd, sampler.next_batch(), grad_clip) for _ in range(iters)]
    return float(np.mean(losses))


def alternating_step(net, train_batch, val_batch, sgd, adam, grad_clip=0.0):
    """One Adam step on arch logits (val loss), then one SGD step on weights."""
    if len(val_batch[0]) == 0 or len(train_batch[0]) == 0:
        raise ValueError("empty batch")
    xv, yv = val_batch
    net.zero_grad()
    val_loss = masked_cross_entropy(net(Tensor(xv)), yv)
    adam.step(backward(val_loss))
    train_loss = _weight_step(net, sgd, train_batch, grad_clip)
    return train_loss, float(val_loss.data)


def evaluate_supernet(net, cube_data, labels, coords, window, num_classes):
    was_training = net.training
    net.eval()

    def predict(batch):
        with no_grad():
            return net(Tensor(batch)).data

    class_map, prob_map, _ = infer_overlap(predict, cube_data, window,
                                          num_classes, overlap=False)
    if was_training:
        net.train()
    return (accuracy_on_coords(class_map, labels, coords),
            cross_entropy_on_coords(prob_map, labels, coords))


def search(cfg, cube, split, out_dir=None, progress=None):
    """Warm-up plus alternating bilevel search; returns (net, SearchRecord).

    Validation runs every ``val_interval`` epochs and the architecture
    snapshot with the best validation accuracy is kept (ties broken by
    lower validation loss, then earlier epoch).
    """
    sn = cfg.supernet
    net = build_supernet(cfg, cube.bands, cube.num_classes)
    seq = np.random.SeedSequence(cfg.seed).spawn(2)
    train_sampler = PatchSampler(cube.data, cube.labels, split.train, sn.patch, sn.batch,
                                 seed=seq[0], augment=False)
    val_sampler = PatchSampler(cube.data, cube.labels, split.val, sn.patch, sn.batch,
                               seed=seq[1], augment=False)
    iters = sn.iters_per_epoch or max(1, math.ceil(len(split.train) / sn.batch))
    total_epochs = sn.warmup_epochs + sn.search_epochs

    sgd = optim.SGD(net.weight_parameters(), lr=cfg.sgd.lr_max,
                    momentum=cfg.sgd.momentum, weight_decay=cfg.sgd.weight_decay)
    adam = optim.Adam(net.arch_parameters(), lr=cfg.adam.lr,
                      beta1=cfg.adam.beta1, beta2=cfg.adam.beta2,
                      eps=cfg.adam.eps, weight_decay=cfg.adam.weight_decay)

    record = SearchRecord()
    for epoch in range(total_epochs):
        sgd.lr = optim.cosine_lr(epoch, total_epochs, cfg.sgd.lr_max, cfg.sgd.lr_min)
        losses = []
        if epoch < sn.warmup_epochs:
            losses.append(warmup_epoch(net, train_sampler, sgd, iters, sn.grad_clip))
        else:
            for _ in range(iters):
                tl, _ = alternating_step(net, train_sampler.next_batch(),
                                         val_sampler.next_batch(), sgd, adam,
                                         sn.grad_clip)
                losses.append(tl)
        train_loss = float(np.mean(losses))
        entry = {"epoch": epoch, "train_loss": train_loss, "lr": sgd.lr,
                 "phase": "warmup" if epoch < sn.warmup_epochs else "search"}
        if (epoch + 1) % sn.val_interval == 0 or epoch + 1 == total_epochs:
            val_oa, val_loss = evaluate_supernet(net, cube.data, cube.labels, split.val,
                                                 sn.patch, cube.num_classes)
            entry.update(val_oa=val_oa, val_loss=val_loss)
            record.consider(epoch, val_oa, val_loss, net.arch_snapshot())
        record.epochs.append(entry)
        if progress:
            progress(entry)
    if out_dir is not None:
        save_search_checkpoint(os.path.join(out_dir, "search_checkpoint.bin"),
                               net, record, cfg, cube)
    return net, record


def save_search_checkpoint(path, net, record, cfg, cube):
    arrays = dict(net.state_dict())
    for name, arr in record.best_arch.items():
        arrays[f"best_arch/{name}"] = arr
    extra = {
        "kind": "search",
        "config": dataclasses.asdict(cfg),
        "bands": cube.bands,
        "num_classes": cube.num_classes,
        "class_names": list(cube.class_names),
        "best": {"epoch": record.best_epoch, "val_oa": record.best_val_oa,
                 "val_loss": record.best_val_loss},
        "arch_names": sorted(record.best_arch),
    }
    save_checkpoint(path, arrays, extra)
    return path
