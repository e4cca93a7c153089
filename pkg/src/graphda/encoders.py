"""Local-view (sampled neighborhood mean) and global-view (diffusion) encoders.

Weights are stored as ``(in, out)`` so a batch of row vectors maps as
``H @ W``.  Node sets are expanded hop by hop; each hop's node list starts
with the previous hop's nodes in the same order, so the rows a layer keeps
are always a prefix of the rows it reads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad


class EncoderError(ValueError):
    pass


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class EncoderParams:
    local_weights: list
    global_weights: list

    @property
    def depth(self) -> int:
        return max(len(self.local_weights), len(self.global_weights))

    @classmethod
    def init(cls, in_dim, dims, rng, local=True, global_=True):
        dims = list(dims)
        if not dims:
            raise EncoderError("need at least one layer")
        local_w, global_w = [], []
        prev = in_dim
        for d in dims:
            if local:
                local_w.append(ad.parameter(glorot(rng, 2 * prev, d)))
            if global_:
                global_w.append(ad.parameter(glorot(rng, prev, d)))
            prev = d
        return cls(local_w, global_w)

    def tensors(self) -> dict:
        out = {f"local.{k}": w for k, w in enumerate(self.local_weights)}
        out.update({f"global.{k}": w for k, w in enumerate(self.global_weights)})
        return out


@dataclass(frozen=True)
class SamplePlan:
    """Hop-indexed node sets and aggregation operators for one batch.

    ``nodes[k]`` lists the node ids needed at hop ``k`` (``nodes[0]`` is the
    batch).  ``lists[k-1]`` has one row of ``sizes[k-1]`` sampled neighbor
    ids per node of ``nodes[k-1]``; ``agg[k-1]`` is the matching row-mean
    operator from ``nodes[k]`` rows onto ``nodes[k-1]`` rows.
    """

    batch: np.ndarray
    sizes: tuple
    nodes: tuple
    lists: tuple
    agg: tuple


@dataclass(frozen=True)
class GlobalPlan:
    batch: np.ndarray
    nodes: tuple
    agg: tuple


def _expand(prev_nodes, cols, num_nodes):
    """Append unseen ids of ``cols`` (first-seen order) to ``prev_nodes``.

    Returns the expanded id list and the position of every entry of ``cols``.
    """
    lookup = np.full(num_nodes, -1, dtype=np.int64)
    lookup[prev_nodes] = np.arange(prev_nodes.size)
    fresh = cols[lookup[cols] < 0]
    uniq, first = np.unique(fresh, return_index=True)
    new = uniq[np.argsort(first, kind="stable")]
    lookup[new] = prev_nodes.size + np.arange(new.size)
    return np.concatenate([prev_nodes, new]), lookup[cols]


def sample_neighborhoods(graph, batch, sizes, seed) -> SamplePlan:
    batch = np.asarray(batch, dtype=np.int64)
    if np.unique(batch).size != batch.size:
        raise EncoderError("batch contains duplicate node ids")
    rng = np.random.default_rng(seed)
    nodes = [batch]
    lists, agg = [], []
    for s in sizes:
        s = int(s)
        cur = nodes[-1]
        rows = np.empty((cur.size, s), dtype=np.int64)
        for i, v in enumerate(cur):
            nb = graph.neighbors(v)
            if nb.size == 0:
                rows[i] = v
            elif nb.size >= s:
                rows[i] = nb[rng.permutation(nb.size)[:s]]
            else:
                rows[i] = nb[rng.integers(0, nb.size, size=s)]
        nxt, cols = _expand(cur, rows.ravel(), graph.num_nodes)
        m = sp.csr_matrix(
            (np.full(rows.size, 1.0 / s), (np.repeat(np.arange(cur.size), s), cols)),
            shape=(cur.size, nxt.size),
        )
        m.sum_duplicates()
        nodes.append(nxt)
        lists.append(rows)
        agg.append(m)
    return SamplePlan(batch, tuple(int(s) for s in sizes), tuple(nodes), tuple(lists), tuple(agg))


def global_plan(diffusion, batch, depth) -> GlobalPlan:
    batch = np.asarray(batch, dtype=np.int64)
    full = diffusion.csr
    nodes = [batch]
    agg = []
    for _ in range(depth):
        cur = nodes[-1]
        sub = full[cur]
        nxt, cols = _expand(cur, sub.indices.astype(np.int64), diffusion.num_nodes)
        agg.append(sp.csr_matrix((sub.data, cols, sub.indptr), shape=(cur.size, nxt.size)))
        nodes.append(nxt)
    return GlobalPlan(batch, tuple(nodes), tuple(agg))


def _check_width(attributes, weights, factor):
    need = weights[0].shape[0] // factor
    if attributes.shape[1] != need:
        raise EncoderError(f"attribute width {attributes.shape[1]} does not match encoder input width {need}")


def encode_local(attributes, plan: SamplePlan, params: EncoderParams):
    """Embeddings of ``plan.batch`` from the sampled neighborhood encoder.

    ``attributes`` is the full N x U array (possibly corrupted).
    """
    weights = params.local_weights
    depth = len(weights)
    if depth != len(plan.sizes):
        raise EncoderError(f"plan depth {len(plan.sizes)} does not match encoder depth {depth}")
    _check_width(attributes, weights, 2)
    h = ad.constant(attributes[plan.nodes[depth]])
    for layer in range(1, depth + 1):
        hop = depth - layer
        keep = plan.nodes[hop].size
        neigh = ad.spmatmul(plan.agg[hop], h)
        own = ad.take_rows(h, np.arange(keep))
        h = ad.relu(ad.matmul(ad.concat([own, neigh]), weights[layer - 1]))
    return h


def encode_global(attributes, diffusion, batch, params: EncoderParams, plan: GlobalPlan | None = None):
    weights = params.global_weights
    depth = len(weights)
    if diffusion.num_nodes != attributes.shape[0]:
        raise EncoderError(f"diffusion covers {diffusion.num_nodes} nodes, graph has {attributes.shape[0]}")
    _check_width(attributes, weights, 1)
    if plan is None:
        plan = global_plan(diffusion, batch, depth)
    h = ad.constant(attributes[plan.nodes[depth]])
    for layer in range(1, depth + 1):
        hop = depth - layer
        h = ad.relu(ad.matmul(ad.spmatmul(plan.agg[hop], h), weights[layer - 1]))
    return h


def embed(local, global_):
    if local.shape[0] != global_.shape[0]:
        raise EncoderError(f"row count mismatch: {local.shape[0]} vs {global_.shape[0]}")
    return ad.concat([local, global_])
