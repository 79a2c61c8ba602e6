"""The hybrid search space: candidate menus, mixed edges, and supercells.

Two cell kinds share one topology. The space-dominated menu leans on
spatial 1xkxk kernels, the spectrum-dominated menu on spectral kx1x1
kernels; both include the two mixed conv pipelines, a skip and a zero op.
Every candidate maps C channels to C channels at unchanged extents so
edge outputs can be summed and node outputs concatenated.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .tensor import Parameter, concat, softmax

SPA_CANDIDATES = (
    "acon_3-1",
    "acon_5-1",
    "asep_3-1",
    "asep_5-1",
    "con_3-3",
    "con_3-5",
    "skip_connection",
    "discarding",
)

SPE_CANDIDATES = (
    "econ_3-1",
    "econ_5-1",
    "esep_3-1",
    "esep_5-1",
    "con_3-3",
    "con_3-5",
    "skip_connection",
    "discarding",
)

MENUS = {"spa": SPA_CANDIDATES, "spe": SPE_CANDIDATES}

# op name -> (structure, kernel geometry)
OP_SPECS = {
    "acon_3-1": ("conv", (1, 3, 3)),
    "acon_5-1": ("conv", (1, 5, 5)),
    "asep_3-1": ("sep", (1, 3, 3)),
    "asep_5-1": ("sep", (1, 5, 5)),
    # the name encodes the spectral kernel extent: econ_5-1 is Conv(5x1x1)
    "econ_3-1": ("conv", (3, 1, 1)),
    "econ_5-1": ("conv", (5, 1, 1)),
    "esep_3-1": ("sep", (3, 1, 1)),
    "esep_5-1": ("sep", (5, 1, 1)),
    "con_3-3": ("conv2", ((1, 3, 3), (3, 1, 1))),
    "con_3-5": ("conv2", ((1, 3, 3), (5, 1, 1))),
    "skip_connection": ("identity", None),
    "discarding": ("zero", None),
}


def op_pipeline(name):
    """Human-readable primitive sequence for one candidate."""
    kind, geom = OP_SPECS[name]
    if kind == "identity":
        return ["identity"]
    if kind == "zero":
        return ["zero"]
    fmt = lambda k: "x".join(str(v) for v in k)
    if kind == "conv":
        return ["lrelu", f"conv {fmt(geom)}", "bn"]
    if kind == "sep":
        return ["lrelu", f"sep {fmt(geom)}", "bn"]
    return ["lrelu", f"conv {fmt(geom[0])}", f"conv {fmt(geom[1])}", "bn"]


def menu_as_dict():
    return {
        kind: [{"name": n, "pipeline": op_pipeline(n)} for n in menu]
        for kind, menu in MENUS.items()
    }


def build_candidate(name, channels, rng=None):
    """Instantiate one candidate operation with its own parameters."""
    if name not in OP_SPECS:
        raise ValueError(f"unknown candidate operation {name!r}")
    kind, geom = OP_SPECS[name]
    if kind == "identity":
        return nn.Identity()
    if kind == "zero":
        return nn.Zero()
    rng = rng or np.random.default_rng(0)
    steps = [nn.LeakyReLU()]
    if kind == "conv":
        steps.append(nn.Conv3d(channels, channels, geom, rng=rng))
    elif kind == "sep":
        steps.append(nn.SepConv3d(channels, channels, geom, rng=rng))
    else:
        steps.append(nn.Conv3d(channels, channels, geom[0], rng=rng))
        steps.append(nn.Conv3d(channels, channels, geom[1], rng=rng))
    steps.append(nn.BatchNorm(channels))
    return nn.Sequential(*steps)


class MixedEdge(nn.Module):
    """Continuous relaxation of one edge: softmax(omega)-weighted op sum."""

    def __init__(self, cell_kind, channels, rng=None):
        super().__init__()
        self.cell_kind = cell_kind
        self.menu = MENUS[cell_kind]
        self.ops = nn.ModuleList(build_candidate(n, channels, rng=rng) for n in self.menu)
        from .tensor import default_dtype

        self.omega = Parameter(np.zeros(len(self.menu), dtype=default_dtype()), group="arch")

    def forward(self, x):
        w = softmax(self.omega, axis=0)
        out = None
        for j, op in enumerate(self.ops):
            term = w[j] * op(x)
            out = term if out is None else out + term
        return out


class FixedEdge(nn.Module):
    """A pruned edge: exactly one retained operation."""

    def __init__(self, cell_kind, op_name, channels, rng=None):
        super().__init__()
        self.cell_kind = cell_kind
        self.op_name = op_name
        self.op = build_candidate(op_name, channels, rng=rng)

    def forward(self, x):
        return self.op(x)


class Preprocess(nn.Module):
    """Projects a cell input to the working width and spectral depth."""

    def __init__(self, in_channels, out_channels, spectral_stride, rng=None):
        super().__init__()
        self.act = nn.LeakyReLU()
        self.conv = nn.Conv3d(in_channels, out_channels, (1, 1, 1),
                              stride=(spectral_stride, 1, 1), padding=(0, 0, 0), rng=rng)
        self.bn = nn.BatchNorm(out_channels)

    def forward(self, x):
        return self.bn(self.conv(self.act(x)))


def node_input_count(node_index):
    # two cell inputs plus all previous nodes
    return 2 + node_index


class SuperCell(nn.Module):
    """N-node cell whose edges are all mixed; output concatenates node outputs."""

    def __init__(self, kind, num_nodes, channels, in_channels, strides, rng=None):
        super().__init__()
        if kind not in MENUS:
            raise ValueError(f"unknown cell kind {kind!r}")
        self.kind = kind
        self.num_nodes = num_nodes
        self.channels = channels
        self.pre0 = Preprocess(in_channels[0], channels, strides[0], rng=rng)
        self.pre1 = Preprocess(in_channels[1], channels, strides[1], rng=rng)
        self.nodes = nn.ModuleList(
            nn.ModuleList(MixedEdge(kind, channels, rng=rng) for _ in range(node_input_count(i)))
            for i in range(num_nodes)
        )

    def forward(self, in0, in1):
        if in0.shape[1] != self.pre0.conv.in_channels or in1.shape[1] != self.pre1.conv.in_channels:
            raise ValueError(
                f"cell inputs have {in0.shape[1]}/{in1.shape[1]} channels, "
                f"expected {self.pre0.conv.in_channels}/{self.pre1.conv.in_channels}")
        states = [self.pre0(in0), self.pre1(in1)]
        for edges in self.nodes:
            acc = None
            for state, edge in zip(states, edges):
                term = edge(state)
                acc = term if acc is None else acc + term
            states.append(acc)
        return concat(states[2:], axis=1)

    def edge_iter(self):
        """Yields (node_index, input_index, MixedEdge)."""
        for i, edges in enumerate(self.nodes):
            for j, edge in enumerate(edges):
                yield i, j, edge


class FixedCell(nn.Module):
    """Cell fixed to a derived topology: two retained edges per node."""

    def __init__(self, kind, node_choices, channels, in_channels, strides, rng=None):
        super().__init__()
        self.kind = kind
        self.channels = channels
        self.node_choices = [tuple((int(i), str(n)) for i, n in node) for node in node_choices]
        self.pre0 = Preprocess(in_channels[0], channels, strides[0], rng=rng)
        self.pre1 = Preprocess(in_channels[1], channels, strides[1], rng=rng)
        self.nodes = nn.ModuleList(
            nn.ModuleList(FixedEdge(kind, name, channels, rng=rng) for _, name in node)
            for node in self.node_choices
        )

    def forward(self, in0, in1):
        states = [self.pre0(in0), self.pre1(in1)]
        for node, edges in zip(self.node_choices, self.nodes):
            acc = None
            for (src, _), edge in zip(node, edges):
                term = edge(states[src])
                acc = term if acc is None else acc + term
            states.append(acc)
        return concat(states[2:], axis=1)


class SuperLayer(nn.Module):
    """Fuses the two cell kinds with a softmax over two scalar logits."""

    def __init__(self, num_nodes, channels, in_channels, strides, rng=None):
        super().__init__()
        self.spa = SuperCell("spa", num_nodes, channels, in_channels, strides, rng=rng)
        self.spe = SuperCell("spe", num_nodes, channels, in_channels, strides, rng=rng)
        from .tensor import default_dtype

        self.alpha_beta = Parameter(np.zeros(2, dtype=default_dtype()), group="arch")

    def forward(self, in0, in1):
        ab = softmax(self.alpha_beta, axis=0)
        return ab[0] * self.spa(in0, in1) + ab[1] * self.spe(in0, in1)
