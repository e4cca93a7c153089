"""Personalized-PageRank diffusion of a graph and its top-s sparsification."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp

DENSE_SOLVE_LIMIT = 5000


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiffusionMatrix:
    """Row-wise retained PPR entries.

    ``rows[v]`` is a pair ``(ids, weights)``; ids are sorted by weight
    descending, ties by node id ascending.  Weights are the raw PPR values,
    so a row sum may be below one once entries are dropped.
    """

    alpha: float
    s: int
    rows: tuple

    @property
    def num_nodes(self) -> int:
        return len(self.rows)

    def neighbors(self, v):
        return self.rows[v]

    @cached_property
    def csr(self) -> sp.csr_matrix:
        """Row-order-preserving CSR view (entries keep the weight ordering)."""
        return self.to_sparse()

    def to_sparse(self) -> sp.csr_matrix:
        indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([ids.size for ids, _ in self.rows])
        indices = np.concatenate([ids for ids, _ in self.rows]) if self.rows else np.array([], dtype=np.int64)
        data = np.concatenate([w for _, w in self.rows]) if self.rows else np.array([])
        return sp.csr_matrix((data, indices, indptr), shape=(self.num_nodes, self.num_nodes))

    def renormalized(self) -> "DiffusionMatrix":
        rows = []
        for ids, w in self.rows:
            total = w.sum()
            rows.append((ids, w / total if total > 0 else w))
        return DiffusionMatrix(self.alpha, self.s, tuple(rows))


def transition_matrix(graph) -> np.ndarray:
    """Symmetric normalization of the adjacency with self-loops."""
    a = graph.adjacency() + np.eye(graph.num_nodes)
    d = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def diffuse(transition, alpha: float) -> np.ndarray:
    if not 0.0 < alpha < 1.0:
        raise DiffusionError(f"alpha must lie in (0, 1), got {alpha}")
    transition = np.asarray(transition, dtype=np.float64)
    n = transition.shape[0]
    if n > DENSE_SOLVE_LIMIT:
        return diffuse_series(transition, alpha)
    system = np.eye(n) - (1.0 - alpha) * transition
    try:
        lu = scipy.linalg.lu_factor(system, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DiffusionError(f"diffusion system is singular: {exc}") from exc
    if np.any(np.abs(np.diag(lu[0])) < 1e-14):
        raise DiffusionError("diffusion system is numerically singular")
    out = alpha * scipy.linalg.lu_solve(lu, np.eye(n))
    # the exact result is symmetric with entries in [0, 1]; remove solver round-off
    return np.clip(0.5 * (out + out.T), 0.0, 1.0)


def diffuse_series(transition, alpha: float, terms: int = 200) -> np.ndarray:
    """alpha * sum_{k < terms} ((1 - alpha) P)^k."""
    transition = np.asarray(transition, dtype=np.float64)
    term = np.eye(transition.shape[0])
    acc = term.copy()
    for _ in range(terms - 1):
        term = (1.0 - alpha) * (term @ transition)
        acc += term
    return alpha * acc


def sparsify_topk(dense, s: int, alpha: float = float("nan")) -> DiffusionMatrix:
    if s < 1:
        raise DiffusionError(f"s must be at least 1, got {s}")
    dense = np.asarray(dense, dtype=np.float64)
    rows = []
    for v in range(dense.shape[0]):
        row = dense[v]
        nz = np.flatnonzero(row)
        # lexsort: last key is primary -> weight descending, then id ascending
        order = nz[np.lexsort((nz, -row[nz]))][:s]
        rows.append((order.astype(np.int64), row[order].copy()))
    return DiffusionMatrix(alpha=alpha, s=s, rows=tuple(rows))


def build_diffusion(graph, alpha: float, s: int, renormalize: bool = False) -> DiffusionMatrix:
    dm = sparsify_topk(diffuse(transition_matrix(graph), alpha), s, alpha)
    return dm.renormalized() if renormalize else dm


def save_diffusion(dm: DiffusionMatrix, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# alpha={float(dm.alpha)!r} s={dm.s} nodes={dm.num_nodes}\n")
        for v, (ids, w) in enumerate(dm.rows):
            for u, p in zip(ids, w):
                fh.write(f"{v} {int(u)} {float(p)!r}\n")


def load_diffusion(path) -> DiffusionMatrix:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise DiffusionError(f"{path}: missing header line")
        fields = dict(tok.split("=", 1) for tok in header[1:].split())
        try:
            alpha, s, n = float(fields["alpha"]), int(fields["s"]), int(fields["nodes"])
        except (KeyError, ValueError) as exc:
            raise DiffusionError(f"{path}: bad header {header.strip()!r}") from exc
        ids = [[] for _ in range(n)]
        weights = [[] for _ in range(n)]
        for lineno, line in enumerate(fh, 2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise DiffusionError(f"{path}:{lineno}: expected 'v u p_vu'")
            v, u = int(parts[0]), int(parts[1])
            if not (0 <= v < n and 0 <= u < n):
                raise DiffusionError(f"{path}:{lineno}: node id out of range")
            ids[v].append(u)
            weights[v].append(float(parts[2]))
    rows = tuple((np.array(i, dtype=np.int64), np.array(w, dtype=np.float64)) for i, w in zip(ids, weights))
    return DiffusionMatrix(alpha=alpha, s=s, rows=rows)
