"""Discrete architecture derivation and the compact network it builds.

Derivation keeps, per node, the two incoming edges whose best retained
candidate carries the largest softmax weight, and on each kept edge the
argmax candidate. The zero op cannot carry signal, so it is excluded
from selection. Ties break deterministically: lower input index first,
then menu order. Per layer the cell kind with the larger fusion logit is
kept (spatial on an exact tie).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .attention import TransformerBlock
from .search_space import MENUS, FixedCell
from .supernet import Head, Stem, SuperNet, depth_plan, layer_io_channels, layer_strides

GENOTYPE_SCHEMA = 1


@dataclass
class Genotype:
    num_layers: int
    num_nodes: int
    width: int
    bands: int
    num_classes: int
    layers: list                     # per layer: {"cell_kind", "nodes": [[(idx, op), (idx, op)], ...]}
    schema_version: int = GENOTYPE_SCHEMA

    def validate(self):
        if self.schema_version != GENOTYPE_SCHEMA:
            raise ValueError(f"unsupported genotype schema {self.schema_version}")
        if len(self.layers) != self.num_layers:
            raise ValueError("genotype layer count mismatch")
        for entry in self.layers:
            kind = entry["cell_kind"]
            if kind not in MENUS:
                raise ValueError(f"unknown cell kind {kind!r}")
            if len(entry["nodes"]) != self.num_nodes:
                raise ValueError("genotype node count mismatch")
            for i, node in enumerate(entry["nodes"]):
                if len(node) != 2:
                    raise ValueError(f"node must keep exactly 2 edges, got {len(node)}")
                indices = [idx for idx, _ in node]
                if len(set(indices)) != 2 or any(not 0 <= idx < 2 + i for idx in indices):
                    raise ValueError(f"invalid input indices {indices} for node {i}")
                for _, op in node:
                    if op == "discarding":
                        raise ValueError("genotype must not contain the discarding op")
                    if op not in MENUS[kind]:
                        raise ValueError(f"op {op!r} not in the {kind} menu")
        return self

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "num_layers": self.num_layers,
            "num_nodes": self.num_nodes,
            "width": self.width,
            "bands": self.bands,
            "num_classes": self.num_classes,
            "layers": [
                {"cell_kind": e["cell_kind"],
                 "nodes": [[[int(i), str(n)] for i, n in node] for node in e["nodes"]]}
                for e in self.layers
            ],
        }

    def to_json(self):
        """Canonical byte-stable encoding (sorted keys, no whitespace)."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, d):
        g = cls(
            num_layers=int(d["num_layers"]),
            num_nodes=int(d["num_nodes"]),
            width=int(d["width"]),
            bands=int(d["bands"]),
            num_classes=int(d["num_classes"]),
            layers=[
                {"cell_kind": e["cell_kind"],
                 "nodes": [[(int(i), str(n)) for i, n in node] for node in e["nodes"]]}
                for e in d["layers"]
            ],
            schema_version=int(d.get("schema_version", 0)),
        )
        return g.validate()

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _softmax_np(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def derive_genotype(arch_snapshot, num_layers, num_nodes, width, bands, num_classes) -> Genotype:
    """Prune learned architecture logits down to a discrete genotype."""
    layers = []
    for l in range(num_layers):
        ab = np.asarray(arch_snapshot[f"layers.{l}.alpha_beta"], dtype=np.float64)
        kind = "spa" if ab[0] >= ab[1] else "spe"
        menu = MENUS[kind]
        retained = [k for k, name in enumerate(menu) if name != "discarding"]
        nodes = []
        for i in range(num_nodes):
            scored = []
            for j in range(2 + i):
                key = f"layers.{l}.{kind}.nodes.{i}.{j}.omega"
                if key not in arch_snapshot:
                    raise KeyError(f"snapshot is missing {key!r}")
                w = _softmax_np(np.asarray(arch_snapshot[key], dtype=np.float64))
                best_k = min(retained, key=lambda k: (-w[k], k))
                scored.append((j, best_k, float(w[best_k])))
            top2 = sorted(scored, key=lambda e: (-e[2], e[0]))[:2]
            nodes.append([(j, menu[k]) for j, k, _ in sorted(top2, key=lambda e: e[0])])
        layers.append({"cell_kind": kind, "nodes": nodes})
    return Genotype(num_layers=num_layers, num_nodes=num_nodes, width=width,
                    bands=bands, num_classes=num_classes, layers=layers).validate()


def derive_from_search_checkpoint(arrays, extra) -> Genotype:
    """Derive from a search checkpoint's stored best-architecture snapshot."""
    if extra.get("kind") != "search":
        raise ValueError(f"checkpoint kind {extra.get('kind')!r} is not a search checkpoint")
    snapshot = {name[len("best_arch/"):]: arr for name, arr in arrays.items()
                if name.startswith("best_arch/")}
    if not snapshot:
        raise ValueError("search checkpoint carries no best-architecture snapshot")
    sn = extra["config"]["supernet"]
    return derive_genotype(snapshot, sn["layers"], sn["nodes"], sn["width"],
                           extra["bands"], extra["num_classes"])


# ---------------------------------------------------------------------------
# genotype statistics


OP_CATEGORIES = ("2d_spatial", "2d_spectral", "3d", "skip")


def classify_op(name):
    if name.startswith(("acon_", "asep_")):
        return "2d_spatial"
    if name.startswith(("econ_", "esep_")):
        return "2d_spectral"
    if name.startswith("con_3-"):
        return "3d"
    if name == "skip_connection":
        return "skip"
    raise ValueError(f"cannot classify op {name!r}")


@dataclass
class GenotypeStats:
    overall: dict
    per_layer: list
    counts: dict

    def to_dict(self):
        return {"overall": self.overall, "per_layer": self.per_layer, "counts": self.counts}

    def to_text(self):
        header = f"{'layer':<8}" + "".join(f"{c:>14}" for c in OP_CATEGORIES)
        lines = [header]
        for i, props in enumerate(self.per_layer):
            lines.append(f"{i:<8}" + "".join(f"{props[c]:>14.4f}" for c in OP_CATEGORIES))
        lines.append(f"{'overall':<8}" + "".join(f"{self.overall[c]:>14.4f}" for c in OP_CATEGORIES))
        return "\n".join(lines)


def genotype_stats(g: Genotype) -> GenotypeStats:
    """Proportion of spatial / spectral / 3D / skip ops, per layer and overall."""
    totals = {c: 0 for c in OP_CATEGORIES}
    per_layer = []
    for entry in g.layers:
        counts = {c: 0 for c in OP_CATEGORIES}
        for node in entry["nodes"]:
            for _, op in node:
                counts[classify_op(op)] += 1
        n = sum(counts.values())
        per_layer.append({c: counts[c] / n for c in OP_CATEGORIES})
        for c in OP_CATEGORIES:
            totals[c] += counts[c]
    n = sum(totals.values())
    overall = {c: totals[c] / n for c in OP_CATEGORIES}
    return GenotypeStats(overall=overall, per_layer=per_layer, counts=totals)


# ---------------------------------------------------------------------------
# compact network


class CompactNet(nn.Module):
    """The pruned network, optionally with attention blocks before the head."""

    def __init__(self, genotype: Genotype, transformer=None, grid=None, seed=0):
        super().__init__()
        genotype.validate()
        self.genotype = genotype
        g = genotype
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.stem_depth, self.depths = depth_plan(g.bands, g.num_layers)
        self.stem = Stem(g.width, rng=rng)
        cells = []
        for l, entry in enumerate(g.layers):
            cells.append(FixedCell(entry["cell_kind"], entry["nodes"], g.width,
                                   layer_io_channels(l, g.width, g.num_nodes),
                                   layer_strides(l, self.depths, self.stem_depth), rng=rng))
        self.cells = nn.ModuleList(cells)
        feat_channels = g.num_nodes * g.width
        self.grid = tuple(grid) if grid else None
        blocks = []
        if transformer is not None and transformer.blocks > 0:
            if self.grid is None:
                raise ValueError("attention blocks need a fixed (H, W) grid")
            for _ in range(transformer.blocks):
                blocks.append(TransformerBlock(feat_channels, self.grid,
                                               heads=transformer.heads,
                                               mlp_ratio=transformer.mlp_ratio, rng=rng))
        self.blocks = nn.ModuleList(blocks)
        self.head = Head(feat_channels, g.num_classes, rng=rng)
        self.bind_names()

    @property
    def has_transformer(self):
        return len(self.blocks) > 0

    def forward(self, x, return_attention=False):
        g = self.genotype
        if x.shape[1] != 1 or x.shape[2] != g.bands:
            raise ValueError(f"expected input (B, 1, {g.bands}, H, W), got {x.shape}")
        if self.has_transformer and tuple(x.shape[3:]) != self.grid:
            raise ValueError(
                f"attention grid is fixed at {self.grid}, got spatial extent {tuple(x.shape[3:])}")
        s = self.stem(x)
        prev, prev2 = s, s
        for cell in self.cells:
            prev, prev2 = cell(prev, prev2), prev
        feat = prev.mean(axis=2)
        attn_maps = []
        for blk in self.blocks:
            if return_attention:
                feat, attn = blk(feat, return_attention=True)
                attn_maps.append(attn)
            else:
                feat = blk(feat)
        logits = self.head(feat)
        if return_attention:
            return logits, attn_maps
        return logits


def build_compact(genotype: Genotype, cfg=None, transformer=None, grid=None, seed=None) -> CompactNet:
    """Fresh compact network for a genotype.

    When a run config is given, the transformer settings, grid (training
    patch) and seed default from it, and the genotype is checked against
    the configured width.
    """
    if cfg is not None:
        if cfg.supernet.width != genotype.width:
            raise ValueError(
                f"config width {cfg.supernet.width} != genotype width {genotype.width}")
        transformer = cfg.transformer if transformer is None else transformer
        grid = grid or (cfg.train.patch, cfg.train.patch)
        seed = cfg.seed if seed is None else seed
    return CompactNet(genotype, transformer=transformer, grid=grid, seed=seed or 0)


def transfer_supernet_weights(supernet: SuperNet, compact: CompactNet):
    """Copy surviving supernet weights into a compact net (for consistency checks).

    The compact net must have been built from a genotype derived against
    the same supernet geometry.
    """
    g = compact.genotype
    compact.stem.load_state_dict(supernet.stem.state_dict())
    compact.head.load_state_dict(supernet.head.state_dict())
    for l, entry in enumerate(g.layers):
        src_cell = getattr(supernet.layers[l], entry["cell_kind"])
        dst_cell = compact.cells[l]
        dst_cell.pre0.load_state_dict(src_cell.pre0.state_dict())
        dst_cell.pre1.load_state_dict(src_cell.pre1.state_dict())
        menu = MENUS[entry["cell_kind"]]
        for i, node in enumerate(entry["nodes"]):
            for slot, (src_idx, op_name) in enumerate(node):
                src_op = src_cell.nodes[i][src_idx].ops[menu.index(op_name)]
                dst_cell.nodes[i][slot].op.load_state_dict(src_op.state_dict())


def saturated_arch_snapshot(supernet: SuperNet, genotype: Genotype, hi=20.0, lo=-20.0):
    """One-hot architecture logits that make the supernet act like the genotype.

    Kept edges saturate at their selected op; every other edge saturates
    at the zero op so it contributes nothing.
    """
    snapshot = {}
    for l, entry in enumerate(genotype.layers):
        ab = np.full(2, lo)
        ab[0 if entry["cell_kind"] == "spa" else 1] = hi
        snapshot[f"layers.{l}.alpha_beta"] = ab
        for kind in ("spa", "spe"):
            menu = MENUS[kind]
            keep = {}
            if kind == entry["cell_kind"]:
                for i, node in enumerate(entry["nodes"]):
                    for src_idx, op_name in node:
                        keep[(i, src_idx)] = menu.index(op_name)
            cell = getattr(supernet.layers[l], kind)
            for i, j, edge in cell.edge_iter():
                om = np.full(len(menu), lo)
                om[keep.get((i, j), menu.index("discarding"))] = hi
                snapshot[f"layers.{l}.{kind}.nodes.{i}.{j}.omega"] = om
    return snapshot
