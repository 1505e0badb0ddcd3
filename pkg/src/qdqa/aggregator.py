"""Graph-attention answer aggregation over a decomposition graph.

Each node starts from its backbone joint feature; every layer lets a node
attend over its direct children (plus itself), the per-layer outputs are
concatenated into the answer head, and edge representations feed a
same-operator/other-operator triplet loss.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, ShapeError, Tensor
from .metrics import MissingGoldError
from .qdg import QDG

MASK_OFF = -1e9


def init_aggregator_params(store: ParamStore, h: int, layers: int,
                           vocab_size: int, edge_dim: int | None = None):
    for k in range(layers):
        store.add(f"ag.l{k}.a", (h,))
        store.linear(f"ag.l{k}.ws", 2 * h, h)
        store.linear(f"ag.l{k}.wg", h, h)
    store.linear("ag.head", layers * h, vocab_size)
    # edge vectors are built from the head features f^a (vocab width)
    store.linear("ag.edge", 2 * vocab_size, edge_dim or h)


def _neighbor_mask(g: QDG, order: list[str]) -> np.ndarray:
    """mask[i, j] = 1 where node i may attend node j: its children and
    itself (self-loop keeps childless nodes alive)."""
    pos = {nid: i for i, nid in enumerate(order)}
    n = len(order)
    mask = np.eye(n)
    for e in g.edges:
        mask[pos[e.parent], pos[e.child]] = 1.0
    return mask


def gat_layer(feats: Tensor, mask: np.ndarray, store: ParamStore,
              prefix: str) -> tuple[Tensor, Tensor]:
    """One attention layer over [n, h] features; returns (output, alpha)."""
    n, h = feats.shape
    ws, wsb = store[f"{prefix}.ws.w"], store[f"{prefix}.ws.b"]
    # [f_i || f_j] @ Ws splits into row blocks of Ws
    left = ad.matmul(feats, ad.getitem(ws, slice(0, h)))
    right = ad.add(ad.matmul(feats, ad.getitem(ws, slice(h, 2 * h))), wsb)
    pair = ad.add(ad.reshape(left, (n, 1, h)), ad.reshape(right, (1, n, h)))
    scores = ad.matmul(ad.leaky_relu(pair), store[f"{prefix}.a"])  # [n, n]
    masked = ad.add(scores, MASK_OFF * (1.0 - mask))
    alpha = ad.softmax(masked, axis=-1)
    alpha = ad.mul(alpha, mask)  # zero the masked tail exactly
    transformed = ad.add(ad.matmul(feats, store[f"{prefix}.wg.w"]),
                         store[f"{prefix}.wg.b"])
    return ad.relu(ad.matmul(alpha, transformed)), alpha


def gat_forward(node_features: dict, g: QDG, store: ParamStore,
                layers: int):
    """Run all layers; returns (order, [per-layer [n, h] Tensors], alphas).

    node_features maps node id -> Tensor [h].  Node order is sorted id.
    """
    order = sorted(node_features)
    if set(order) != {n.id for n in g.nodes}:
        raise ShapeError("feature ids do not match graph nodes")
    widths = {node_features[i].shape[-1] for i in order}
    if len(widths) != 1:
        raise ShapeError("node feature widths differ")
    feats = ad.stack([node_features[i] for i in order], axis=0)
    mask = _neighbor_mask(g, order)
    outputs, alphas = [], []
    for k in range(layers):
        feats, alpha = gat_layer(feats, mask, store, f"ag.l{k}")
        outputs.append(feats)
        alphas.append(alpha)
    return order, outputs, alphas


def predict_answers(order: list[str], layer_outputs: list[Tensor],
                    store: ParamStore):
    """Concat per-layer features into the head; returns (logits, dists) as
    maps node id -> Tensor.  Logits are also the edge-feature inputs."""
    stacked = ad.concat(layer_outputs, axis=-1)  # [n, K*h]
    head = ad.add(ad.matmul(stacked, store["ag.head.w"]), store["ag.head.b"])
    dists = ad.softmax(head, axis=-1)
    logits = {nid: ad.getitem(head, i) for i, nid in enumerate(order)}
    dist_map = {nid: ad.getitem(dists, i) for i, nid in enumerate(order)}
    return logits, dist_map


def node_head_features(order: list[str], layer_outputs: list[Tensor],
                       store: ParamStore) -> dict:
    """The pre-softmax projected features f^a used for edge vectors."""
    stacked = ad.concat(layer_outputs, axis=-1)
    head = ad.add(ad.matmul(stacked, store["ag.head.w"]), store["ag.head.b"])
    return {nid: ad.getitem(head, i) for i, nid in enumerate(order)}


def edge_representations(graphs_and_features, store: ParamStore):
    """Edge vectors W_e [f^a_parent || f^a_child] + b_e over a batch.

    graphs_and_features: iterable of (QDG, map node id -> f^a Tensor).
    Returns a list of (edge_type, vector Tensor).
    """
    reprs = []
    for g, feats in graphs_and_features:
        for e in g.edges:
            pair = ad.concat([feats[e.parent], feats[e.child]], axis=-1)
            vec = ad.add(ad.matmul(pair, store["ag.edge.w"]),
                         store["ag.edge.b"])
            reprs.append((e.op, vec))
    return reprs


def edge_triplet_loss(edge_reprs, margin: float, rng) -> Tensor:
    """Hinge loss pulling same-type edges together, pushing other types a
    margin apart.  One sampled positive and negative per edge; edges with
    no valid candidate contribute zero."""
    if not edge_reprs:
        return Tensor(0.0)
    by_type: dict[str, list[int]] = {}
    for i, (etype, _) in enumerate(edge_reprs):
        by_type.setdefault(etype, []).append(i)
    terms = []
    for i, (etype, vec) in enumerate(edge_reprs):
        same = [j for j in by_type[etype] if j != i]
        other = [j for t, idxs in by_type.items() if t != etype
                 for j in idxs]
        if not same or not other:
            continue
        pos = edge_reprs[same[int(rng.integers(len(same)))]][1]
        neg = edge_reprs[other[int(rng.integers(len(other)))]][1]
        gap = ad.add(
            ad.add(ad.euclidean_distance(vec, pos),
                   ad.mul(ad.euclidean_distance(vec, neg), -1.0)),
            margin,
        )
        terms.append(ad.relu(gap))
    if not terms:
        return Tensor(0.0)
    return ad.mul(ad.reduce_sum(ad.stack(terms)), 1.0 / len(edge_reprs))


def aggregation_loss(clusters, triplet: Tensor, vocab_index: dict) -> Tensor:
    """Triplet term plus mean answer CE over every node of every cluster.

    clusters: iterable of (QDG, map node id -> logits Tensor).
    """
    ces = []
    for g, logits in clusters:
        for node in g.nodes:
            if node.gold_answer is None:
                raise MissingGoldError(node.id)
            target = vocab_index[node.gold_answer.strip().casefold()]
            ces.append(ad.softmax_cross_entropy(logits[node.id], target))
    ce = ad.mul(ad.reduce_sum(ad.stack(ces)), 1.0 / len(ces))
    return ad.add(triplet, ce)
