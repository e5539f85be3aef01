"""Message-passing layers (GCN, SAGE, GIN, MGN) with optional centering.

Node-level centering subtracts the mean node embedding as the last step of a
layer.  Message-level centering subtracts the mean aggregated message after
aggregation and before the node update; GCN has no separate update step and
therefore only supports node-level centering.
"""

from __future__ import annotations

import numpy as np

from . import grad
from .errors import ConfigError, ContractError, DimensionError
from .meshcore import DirectedGraph

KINDS = ("gcn", "sage", "gin", "mgn")


def init_weight(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return grad.Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


class MlpBlock:
    """Affine layers with ReLU between them; the last layer is purely affine."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise DimensionError("MlpBlock needs matching, non-empty weight and bias lists")
        for w0, w1 in zip(weights, weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise DimensionError(f"MlpBlock layers do not chain: {w0.shape} -> {w1.shape}")
        for w, b in zip(weights, biases):
            if b.shape != (w.shape[1],):
                raise DimensionError(f"bias {b.shape} does not match weight {w.shape}")
        self.weights = list(weights)
        self.biases = list(biases)

    @classmethod
    def init(cls, sizes, rng, zero_last=False):
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            ws.append(init_weight(rng, a, b))
            bs.append(grad.Tensor(np.zeros(b)))
        if zero_last:
            ws[-1].data[:] = 0.0
        return cls(ws, bs)

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def named_parameters(self, prefix):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{i}", w
            yield f"{prefix}.b{i}", b

    def __call__(self, x):
        return mlp_forward(self, x)


def mlp_forward(block, x):
    x = grad.as_tensor(x)
    if x.shape[1] != block.in_dim:
        raise DimensionError(f"MLP expects width {block.in_dim}, got {x.shape[1]}")
    last = len(block.weights) - 1
    for i, (w, b) in enumerate(zip(block.weights, block.biases)):
        x = grad.linear(x, w, b)
        if i < last:
            x = grad.relu(x)
    return x


def mlp_forward_blocks(block, parts):
    """``mlp_forward`` on the column-concatenation of ``parts`` without building it.

    ``parts`` is a list of ``(tensor, segments)``; when ``segments`` is given the
    tensor's rows are gathered by it after the first-layer product, so a product
    over per-node inputs is computed once per node instead of once per edge.
    """
    w0, b0 = block.weights[0], block.biases[0]
    start = 0
    pre = None
    for t, seg in parts:
        t = grad.as_tensor(t)
        stop = start + t.shape[1]
        y = grad.linear(t, grad.row_slice(w0, start, stop))
        if seg is not None:
            y = grad.gather_rows(y, seg)
        pre = y if pre is None else grad.add(pre, y)
        start = stop
    if start != block.in_dim:
        raise DimensionError(f"MLP expects width {block.in_dim}, got {start}")
    x = grad.add_bias(pre, b0)
    last = len(block.weights) - 1
    if last == 0:
        return x
    x = grad.relu(x)
    for i in range(1, last + 1):
        x = grad.linear(x, block.weights[i], block.biases[i])
        if i < last:
            x = grad.relu(x)
    return x


def gcn_edge_weights(edges, n):
    """Symmetric-normalized weights for ``edges`` plus one self-loop per node.

    Returns ``(src, dst, weight)`` with the self-loops appended after the input
    edges; degrees count the self-loop.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([edges[:, 0], loops])
    dst = np.concatenate([edges[:, 1], loops])
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    w = 1.0 / np.sqrt(deg[src] * deg[dst])
    return src, dst, w


def _gcn_structure(graph):
    cached = graph.__dict__.get("_gcn")
    if cached is None:
        src, dst, w = gcn_edge_weights(graph.pairs, graph.n)
        cached = (grad.Segments.build(src, graph.n), grad.Segments.build(dst, graph.n), w)
        graph.__dict__["_gcn"] = cached
    return cached


class MpnnLayer:
    """One message-passing layer of a given ``kind`` at hidden width ``h``."""

    def __init__(self, kind, params, node_centering=False, message_centering=False):
        if kind not in KINDS:
            raise ConfigError(f"unknown MPNN kind {kind!r}; expected one of {KINDS}")
        if kind == "gcn" and message_centering:
            raise ConfigError("message-level centering is not defined for gcn")
        self.kind = kind
        self.params = params
        self.node_centering = bool(node_centering)
        self.message_centering = bool(message_centering)

    @classmethod
    def init(cls, kind, hidden, rng, node_centering=False, message_centering=False):
        if kind == "gcn":
            params = {"theta": init_weight(rng, hidden, hidden)}
        elif kind == "sage":
            params = {"w1": init_weight(rng, hidden, hidden), "w2": init_weight(rng, hidden, hidden)}
        elif kind == "gin":
            params = {"mlp": MlpBlock.init([hidden] * 4, rng), "eps": grad.Tensor(np.zeros(1))}
        elif kind == "mgn":
            params = {"mlp_e": MlpBlock.init([3 * hidden, hidden, hidden, hidden], rng),
                      "mlp_x": MlpBlock.init([2 * hidden, hidden, hidden, hidden], rng)}
        else:
            raise ConfigError(f"unknown MPNN kind {kind!r}; expected one of {KINDS}")
        return cls(kind, params, node_centering, message_centering)

    def named_parameters(self, prefix):
        for name in sorted(self.params):
            p = self.params[name]
            if isinstance(p, MlpBlock):
                yield from p.named_parameters(f"{prefix}.{name}")
            else:
                yield f"{prefix}.{name}", p

    def __call__(self, x, graph, e=None):
        return layer_forward(self, x, graph, e)


def _as_graph(edges, n):
    if isinstance(edges, DirectedGraph):
        if edges.n != n:
            raise DimensionError(f"graph has {edges.n} nodes, embeddings have {n} rows")
        return edges
    return DirectedGraph.from_directed(edges, n)


def layer_forward(layer, x, edges, e=None):
    """Apply ``layer`` to node embeddings ``x``; returns ``(x_new, e_new)``.

    ``edges`` is a :class:`DirectedGraph` or an (E x 2) array of (src, dst)
    pairs.  Only MGN reads and updates the edge embeddings ``e``.
    """
    x = grad.as_tensor(x)
    g = _as_graph(edges, x.shape[0])
    p = layer.params
    n = g.n

    if layer.kind == "gcn":
        seg_src, seg_dst, w = _gcn_structure(g)
        xt = grad.linear(x, p["theta"])
        msg = grad.mul_rows(grad.gather_rows(xt, seg_src), w)
        out = grad.segment_sum(msg, seg_dst)
    else:
        if layer.kind == "mgn":
            if e is None:
                raise ContractError("MGN layer needs edge embeddings")
            e = grad.as_tensor(e)
            if e.shape[0] != g.n_edges:
                raise DimensionError(f"{e.shape[0]} edge rows for {g.n_edges} edges")
            # e_ij <- MLP_e(x_i, x_j, e_ij) for the edge j -> i
            e = mlp_forward_blocks(p["mlp_e"], [(x, g.dst_segments), (x, g.src_segments),
                                                (e, None)])
            agg = grad.segment_sum(e, g.dst_segments)
        else:
            x_j = grad.gather_rows(x, g.src_segments)
            if layer.kind == "sage":
                agg = grad.segment_mean(x_j, g.dst_segments)
            else:
                agg = grad.segment_sum(x_j, g.dst_segments)
        if layer.message_centering:
            agg = grad.center_rows(agg)
        if layer.kind == "sage":
            out = grad.add(grad.linear(x, p["w1"]), grad.linear(agg, p["w2"]))
        elif layer.kind == "gin":
            one_plus_eps = grad.add(p["eps"], np.ones(1))
            out = mlp_forward(p["mlp"], grad.add(grad.scale_by(x, one_plus_eps), agg))
        else:
            out = mlp_forward_blocks(p["mlp_x"], [(x, None), (agg, None)])

    if layer.node_centering:
        out = grad.center_rows(out)
    if out.shape[0] != n:
        raise DimensionError("layer changed the node count")
    return out, e
