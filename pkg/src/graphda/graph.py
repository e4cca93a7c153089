"""Attributed graphs, the shared attribute vocabulary, and the text loaders."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNKNOWN = -1


class GraphError(ValueError):
    pass


class LoadError(GraphError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


@dataclass(frozen=True)
class AttributeVocabulary:
    source_names: tuple
    target_names: tuple
    union_names: tuple
    source_index_map: dict = field(repr=False)
    target_index_map: dict = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.union_names)

    def index_map(self, side: str) -> dict:
        if side == "source":
            return self.source_index_map
        if side == "target":
            return self.target_index_map
        raise GraphError(f"side must be 'source' or 'target', got {side!r}")

    def names(self, side: str) -> tuple:
        return self.source_names if side == "source" else self.target_names


def _check_unique(tokens, which):
    seen = set()
    for tok in tokens:
        if tok in seen:
            raise GraphError(f"duplicate token {tok!r} in {which} vocabulary")
        seen.add(tok)


def align_attributes(source_vocab, target_vocab) -> AttributeVocabulary:
    """Build the union vocabulary: source tokens in order, then unseen target tokens."""
    source_vocab = tuple(source_vocab)
    target_vocab = tuple(target_vocab)
    _check_unique(source_vocab, "source")
    _check_unique(target_vocab, "target")
    position = {tok: i for i, tok in enumerate(source_vocab)}
    union = list(source_vocab)
    for tok in target_vocab:
        if tok not in position:
            position[tok] = len(union)
            union.append(tok)
    return AttributeVocabulary(
        source_names=source_vocab,
        target_names=target_vocab,
        union_names=tuple(union),
        source_index_map={i: position[t] for i, t in enumerate(source_vocab)},
        target_index_map={i: position[t] for i, t in enumerate(target_vocab)},
    )


def common_attribute_rate(vocab: AttributeVocabulary) -> float:
    if not vocab.union_names:
        return 0.0
    shared = set(vocab.source_names) & set(vocab.target_names)
    return len(shared) / len(vocab.union_names)


class Graph:
    """Immutable undirected attributed graph.

    ``labels`` holds the ground-truth class id (or ``UNKNOWN``) for every
    node; ``labeled`` is the subset whose labels the learner may use.  For a
    source graph every labeled node is in ``labeled``; for a target graph it
    is the small per-class set and ``unlabeled`` is the evaluation set.
    """

    def __init__(self, neighbors, attributes, labels, num_classes, labeled=None):
        self.num_nodes = len(neighbors)
        self._neighbors = tuple(np.asarray(sorted(set(nb)), dtype=np.int64) for nb in neighbors)
        attributes = np.array(attributes, dtype=np.float64)
        if attributes.ndim != 2 or attributes.shape[0] != self.num_nodes:
            raise GraphError(f"attribute matrix must be {self.num_nodes} x U, got {attributes.shape}")
        if np.any(attributes < 0):
            raise GraphError("attribute values must be nonnegative")
        attributes.setflags(write=False)
        self.attributes = attributes
        labels = np.array(labels, dtype=np.int64)
        if labels.shape != (self.num_nodes,):
            raise GraphError("labels must have one entry per node")
        if np.any((labels != UNKNOWN) & ((labels < 0) | (labels >= num_classes))):
            raise GraphError(f"label ids must lie in [0, {num_classes})")
        labels.setflags(write=False)
        self.labels = labels
        self.num_classes = int(num_classes)
        if labeled is None:
            labeled = np.flatnonzero(labels != UNKNOWN)
        labeled = np.unique(np.asarray(labeled, dtype=np.int64))
        if labeled.size and np.any(labels[labeled] == UNKNOWN):
            raise GraphError("every labeled node needs a class id")
        labeled.setflags(write=False)
        self.labeled = labeled
        mask = np.ones(self.num_nodes, dtype=bool)
        mask[labeled] = False
        unlabeled = np.flatnonzero(mask)
        unlabeled.setflags(write=False)
        self.unlabeled = unlabeled
        for v, nb in enumerate(self._neighbors):
            if nb.size and (nb[0] < 0 or nb[-1] >= self.num_nodes):
                raise GraphError(f"node {v} has a neighbor out of range")
            if np.any(nb == v):
                raise GraphError(f"self-loop on node {v}")

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    def neighbors(self, v) -> np.ndarray:
        return self._neighbors[v]

    def degree(self, v) -> int:
        return int(self._neighbors[v].size)

    def degrees(self) -> np.ndarray:
        return np.array([nb.size for nb in self._neighbors], dtype=np.int64)

    def num_edges(self) -> int:
        return int(self.degrees().sum()) // 2

    def edges(self):
        """Undirected edges as (u, v) pairs with u < v, sorted."""
        return [(u, int(v)) for u, nb in enumerate(self._neighbors) for v in nb if u < v]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        for u, nb in enumerate(self._neighbors):
            a[u, nb] = 1.0
        return a

    def is_symmetric(self) -> bool:
        arcs = {(u, int(v)) for u, nb in enumerate(self._neighbors) for v in nb}
        return all((v, u) in arcs for u, v in arcs)

    def with_labeled(self, labeled) -> "Graph":
        return Graph(self._neighbors, self.attributes, self.labels, self.num_classes, labeled)

    def with_attributes(self, attributes) -> "Graph":
        return Graph(self._neighbors, attributes, self.labels, self.num_classes, self.labeled)

    def permuted(self, perm) -> "Graph":
        """Relabel nodes so that old node ``perm[i]`` becomes new node ``i``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        nbrs = [inv[self._neighbors[old]] for old in perm]
        return Graph(nbrs, self.attributes[perm], self.labels[perm], self.num_classes, inv[self.labeled])


def from_edges(num_nodes, edges, attributes, labels, num_classes, labeled=None) -> Graph:
    nbrs = [set() for _ in range(num_nodes)]
    for u, v in edges:
        if u == v:
            continue
        nbrs[u].add(v)
        nbrs[v].add(u)
    return Graph(nbrs, attributes, labels, num_classes, labeled)


def _data_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _node_id(tok, path, lineno, num_nodes):
    try:
        v = int(tok)
    except ValueError:
        raise LoadError(path, lineno, f"malformed node id {tok!r}") from None
    if not 0 <= v < num_nodes:
        raise LoadError(path, lineno, f"node id {v} out of range [0, {num_nodes})")
    return v


def _header_value(path, key):
    """Integer from a ``# key=value`` comment line, if any."""
    if path is None:
        return None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if line.startswith("#"):
                for tok in line[1:].split():
                    name, _, val = tok.partition("=")
                    if name == key and val.isdigit():
                        return int(val)
    return None


def count_nodes(edge_path, attr_path, label_path) -> int:
    """Largest node id mentioned in any of the three files, plus one."""
    top = -1
    for path in (edge_path, attr_path, label_path):
        if path is None:
            continue
        for lineno, parts in _data_lines(path):
            ids = parts[:2] if path == edge_path else parts[:1]
            for tok in ids:
                try:
                    top = max(top, int(tok))
                except ValueError:
                    raise LoadError(path, lineno, f"malformed node id {tok!r}") from None
    return top + 1


def read_vocabulary(attr_path) -> list:
    """Attribute tokens in first-appearance order."""
    seen = {}
    for lineno, parts in _data_lines(attr_path):
        if len(parts) != 3:
            raise LoadError(attr_path, lineno, "expected 'node_id attr_token value'")
        seen.setdefault(parts[1], None)
    return list(seen)


def load_graph(edge_path, attr_path, label_path, vocab: AttributeVocabulary, side: str,
               num_classes=None, num_nodes=None) -> Graph:
    index_map = vocab.index_map(side)
    token_col = {tok: index_map[i] for i, tok in enumerate(vocab.names(side))}
    if num_nodes is None:
        num_nodes = _header_value(edge_path, "nodes")
    if num_nodes is None:
        num_nodes = count_nodes(edge_path, attr_path, label_path)
    if num_classes is None:
        num_classes = _header_value(label_path, "classes")

    edges = []
    for lineno, parts in _data_lines(edge_path):
        if len(parts) != 2:
            raise LoadError(edge_path, lineno, "expected 'u v'")
        u = _node_id(parts[0], edge_path, lineno, num_nodes)
        v = _node_id(parts[1], edge_path, lineno, num_nodes)
        edges.append((u, v))

    x = np.zeros((num_nodes, vocab.size))
    for lineno, parts in _data_lines(attr_path):
        if len(parts) != 3:
            raise LoadError(attr_path, lineno, "expected 'node_id attr_token value'")
        v = _node_id(parts[0], attr_path, lineno, num_nodes)
        if parts[1] not in token_col:
            raise LoadError(attr_path, lineno, f"token {parts[1]!r} not in {side} vocabulary")
        try:
            val = float(parts[2])
        except ValueError:
            raise LoadError(attr_path, lineno, f"malformed value {parts[2]!r}") from None
        if not np.isfinite(val) or val < 0:
            raise LoadError(attr_path, lineno, f"attribute value must be finite and nonnegative, got {val}")
        x[v, token_col[parts[1]]] = val

    labels = np.full(num_nodes, UNKNOWN, dtype=np.int64)
    raw = []
    for lineno, parts in _data_lines(label_path):
        if len(parts) != 2:
            raise LoadError(label_path, lineno, "expected 'node_id class_id'")
        v = _node_id(parts[0], label_path, lineno, num_nodes)
        try:
            c = int(parts[1])
        except ValueError:
            raise LoadError(label_path, lineno, f"malformed class id {parts[1]!r}") from None
        if c < 0 or (num_classes is not None and c >= num_classes):
            raise LoadError(label_path, lineno, f"class id {c} out of range [0, {num_classes})")
        raw.append((v, c))
        labels[v] = c
    if num_classes is None:
        num_classes = max((c for _, c in raw), default=-1) + 1

    return from_edges(num_nodes, edges, x, labels, num_classes)


def load_structure(edge_path, num_nodes=None) -> Graph:
    """Edges only, with placeholder attributes; enough for diffusion preprocessing."""
    if num_nodes is None:
        num_nodes = _header_value(edge_path, "nodes")
    if num_nodes is None:
        num_nodes = count_nodes(edge_path, None, None)
    edges = []
    for lineno, parts in _data_lines(edge_path):
        if len(parts) != 2:
            raise LoadError(edge_path, lineno, "expected 'u v'")
        edges.append((_node_id(parts[0], edge_path, lineno, num_nodes), _node_id(parts[1], edge_path, lineno, num_nodes)))
    return from_edges(num_nodes, edges, np.zeros((num_nodes, 1)), np.full(num_nodes, UNKNOWN), 0)


def write_graph(graph: Graph, vocab_names, edge_path, attr_path, label_path) -> None:
    """Write the three text files read by :func:`load_graph`.

    ``vocab_names`` maps each attribute column of ``graph`` to its token.
    """
    with open(edge_path, "w") as fh:
        fh.write(f"# nodes={graph.num_nodes}\n")
        for u, v in graph.edges():
            fh.write(f"{u} {v}\n")
    with open(attr_path, "w") as fh:
        for v in range(graph.num_nodes):
            for col in np.flatnonzero(graph.attributes[v]):
                fh.write(f"{v} {vocab_names[col]} {float(graph.attributes[v, col])!r}\n")
    with open(label_path, "w") as fh:
        fh.write(f"# classes={graph.num_classes}\n")
        for v in range(graph.num_nodes):
            if graph.labels[v] != UNKNOWN:
                fh.write(f"{v} {int(graph.labels[v])}\n")


def select_labeled_per_class(graph: Graph, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` labeled node ids per class uniformly without replacement."""
    if n < 0:
        raise GraphError("n must be nonnegative")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(graph.num_classes):
        pool = np.flatnonzero(graph.labels == c)
        if pool.size < n:
            raise GraphError(f"class {c} has only {pool.size} labeled nodes, need {n}")
        if n:
            chosen.append(rng.choice(pool, size=n, replace=False))
    if not chosen:
        return np.array([], dtype=np.int64)
    return np.sort(np.concatenate(chosen))
