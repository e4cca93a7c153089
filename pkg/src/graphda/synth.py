"""Paired stochastic-block-model graphs with a controllable domain shift."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph import AttributeVocabulary, Graph, GraphError, align_attributes, from_edges


@dataclass(frozen=True)
class SbmSpec:
    num_nodes: int = 600
    num_classes: int = 3
    intra_prob: float = 0.02
    inter_prob: float = 0.004
    attr_dim: int = 200
    prototype_strength: float = 1.0
    noise: float = 1.0
    domain_shift: float = 0.3
    label_noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("intra_prob", "inter_prob", "domain_shift", "label_noise"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise GraphError(f"{name} must lie in [0, 1], got {val}")
        if self.intra_prob < self.inter_prob:
            raise GraphError("intra_prob must be at least inter_prob")
        if self.num_nodes < self.num_classes or self.num_classes < 1:
            raise GraphError("need at least one node per class")
        if self.attr_dim < 1:
            raise GraphError("attr_dim must be positive")
        if self.prototype_strength < 0 or self.noise < 0:
            raise GraphError("prototype_strength and noise must be nonnegative")

    def as_dict(self) -> dict:
        return asdict(self)


def _sbm_edges(classes, p_in, p_out, rng):
    n = classes.size
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(classes[iu] == classes[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    return list(zip(iu[keep].tolist(), ju[keep].tolist()))


def _attributes(classes, prototypes, spec, rng):
    x = prototypes[classes] * spec.prototype_strength
    x = x + spec.noise * rng.uniform(-0.5, 0.5, size=x.shape)
    return np.clip(x, 0.0, None)


def generate_pair(spec: SbmSpec):
    """Return ``(source, target, vocab)``.

    Both graphs carry all ground-truth labels; the target's ``labeled`` set
    is empty until :func:`graphda.graph.select_labeled_per_class` is applied.
    Attribute columns are in the union vocabulary.  ``domain_shift`` mixes
    the target class prototypes toward fresh random directions and swaps a
    ``domain_shift / 2`` fraction of the target vocabulary for novel tokens.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    u, c = spec.attr_dim, spec.num_classes

    src_tokens = [f"a{i}" for i in range(u)]
    n_swap = int(round(spec.domain_shift * u / 2))
    swapped = np.sort(rng.choice(u, size=n_swap, replace=False)) if n_swap else np.array([], dtype=int)
    tgt_tokens = list(src_tokens)
    for j, col in enumerate(swapped):
        tgt_tokens[col] = f"b{j}"
    vocab = align_attributes(src_tokens, tgt_tokens)

    proto_src = (rng.random((c, u)) < 0.5).astype(float)
    fresh = (rng.random((c, u)) < 0.5).astype(float)
    proto_tgt = (1.0 - spec.domain_shift) * proto_src + spec.domain_shift * fresh

    graphs = []
    for side, proto in (("source", proto_src), ("target", proto_tgt)):
        classes = np.sort(np.arange(spec.num_nodes) % c)
        edges = _sbm_edges(classes, spec.intra_prob, spec.inter_prob, rng)
        local = _attributes(classes, proto, spec, rng)
        x = np.zeros((spec.num_nodes, vocab.size))
        cols = [vocab.index_map(side)[i] for i in range(u)]
        x[:, cols] = local
        labels = classes.copy()
        if spec.label_noise > 0:
            flip = rng.random(spec.num_nodes) < spec.label_noise
            labels[flip] = rng.integers(0, c, size=int(flip.sum()))
        labeled = None if side == "source" else []
        graphs.append(from_edges(spec.num_nodes, edges, x, labels, c, labeled))
    return graphs[0], graphs[1], vocab


def intra_class_edge_fraction(graph: Graph) -> float:
    edges = graph.edges()
    if not edges:
        return 0.0
    same = sum(graph.labels[u] == graph.labels[v] for u, v in edges)
    return same / len(edges)


__all__ = ["SbmSpec", "generate_pair", "intra_class_edge_fraction", "AttributeVocabulary"]
