"""Graph substrate: representation, edge splitting, negative sampling,
adjacency normalization and node injection.

Graphs are undirected, unweighted, with node features in [0, 1]. The
adjacency is kept as a scipy CSR matrix so that Pubmed-sized graphs fit in
memory; every operation that needs dense blocks densifies locally. Edges
are canonical (u < v) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

Edge = tuple[int, int]


def canonical_edges(pairs) -> list[Edge]:
    """Normalize an iterable of node pairs to sorted (u < v) tuples."""
    out = []
    for u, v in pairs:
        u, v = int(u), int(v)
        if u == v:
            raise ValueError(f"self pair ({u},{v}) is not a valid edge")
        out.append((u, v) if u < v else (v, u))
    return out


class Graph:
    """Undirected attributed graph.

    adjacency is symmetric binary with zero diagonal; features is a dense
    n x d float64 matrix with entries in [0, 1]. Instances are treated as
    immutable after construction.
    """

    def __init__(self, adjacency, features, labels=None, validate: bool = True):
        if not sp.issparse(adjacency):
            adjacency = sp.csr_matrix(np.asarray(adjacency, dtype=np.float64))
        adjacency = adjacency.tocsr().astype(np.float64)
        adjacency.eliminate_zeros()
        features = np.ascontiguousarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != adjacency.shape[0]:
            raise ValueError(
                f"feature matrix shape {features.shape} does not match "
                f"{adjacency.shape[0]} nodes"
            )
        if validate:
            if adjacency.shape[0] != adjacency.shape[1]:
                raise ValueError("adjacency must be square")
            if adjacency.diagonal().any():
                raise ValueError("adjacency has nonzero diagonal")
            if (adjacency != adjacency.T).nnz != 0:
                raise ValueError("adjacency must be symmetric")
            data = adjacency.data
            if data.size and not np.isin(data, (0.0, 1.0)).all():
                raise ValueError("adjacency entries must be 0 or 1")
            if features.size and (features.min() < 0.0 or features.max() > 1.0):
                raise ValueError("feature entries must lie in [0, 1]")
        self.adjacency = adjacency
        self.features = features
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.nnz // 2)

    def edges(self) -> list[Edge]:
        """All edges once each, canonical (u < v), sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        pairs = sorted(zip(coo.row.tolist(), coo.col.tolist()))
        return [(int(u), int(v)) for u, v in pairs]

    def edge_set(self) -> set[Edge]:
        return set(self.edges())

    def has_edge(self, u: int, v: int) -> bool:
        return self.adjacency[u, v] != 0

    def adjacency_dense(self) -> np.ndarray:
        return np.asarray(self.adjacency.todense(), dtype=np.float64)


@dataclass(frozen=True)
class DataSplit:
    """85:5:10 positive-edge split plus per-split sampled negatives.

    Sizes follow the documented rounding rule: val and test take the floor
    of their share, the remainder goes to train. Negatives are non-edges of
    the *full* graph, fixed per (graph, seed).
    """

    train_pos: list[Edge]
    val_pos: list[Edge]
    val_neg: list[Edge]
    test_pos: list[Edge]
    test_neg: list[Edge]
    seed: int
    train_adjacency: sp.csr_matrix = field(repr=False, compare=False, default=None)


def adjacency_from_edges(n_nodes: int, edges) -> sp.csr_matrix:
    """Symmetric binary CSR from canonical edge list."""
    edges = canonical_edges(edges)
    if not edges:
        return sp.csr_matrix((n_nodes, n_nodes), dtype=np.float64)
    arr = np.asarray(edges, dtype=np.int64)
    rows = np.concatenate([arr[:, 0], arr[:, 1]])
    cols = np.concatenate([arr[:, 1], arr[:, 0]])
    a = sp.csr_matrix(
        (np.ones(rows.size, dtype=np.float64), (rows, cols)), shape=(n_nodes, n_nodes)
    )
    a.data[:] = 1.0  # collapse duplicates
    return a


def split_edges(g: Graph, seed: int) -> DataSplit:
    """Split edges 85:5:10 into train/val/test positives and sample negatives.

    Deterministic for a fixed (graph, seed). Negative pairs never collide
    with any edge of the full graph, and val/test negatives are disjoint.
    """
    edges = g.edges()
    n_edges = len(edges)
    if n_edges < 20:
        raise ValueError(f"graph has {n_edges} edges; need at least 20 to split")
    n_val = int(np.floor(0.05 * n_edges))
    n_test = int(np.floor(0.10 * n_edges))

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    order = rng.permutation(n_edges)
    val_pos = [edges[i] for i in order[:n_val]]
    test_pos = [edges[i] for i in order[n_val : n_val + n_test]]
    train_pos = [edges[i] for i in order[n_val + n_test :]]

    val_neg = sample_negatives(g, n_val, set(), seed=seed + 1)
    test_neg = sample_negatives(g, n_test, set(val_neg), seed=seed + 2)

    train_adj = adjacency_from_edges(g.n_nodes, train_pos)
    return DataSplit(
        train_pos=train_pos,
        val_pos=val_pos,
        val_neg=val_neg,
        test_pos=test_pos,
        test_neg=test_neg,
        seed=seed,
        train_adjacency=train_adj,
    )


def sample_negatives(g: Graph, k: int, exclude, seed: int) -> list[Edge]:
    """Sample k distinct non-edges of g, avoiding `exclude`, deterministically.

    Small graphs enumerate the admissible pool exactly; large graphs use
    rejection sampling (the pool is astronomically larger than k for every
    dataset this lab targets).
    """
    if k == 0:
        return []
    n = g.n_nodes
    edge_set = g.edge_set()
    excl = set(canonical_edges(exclude)) if exclude else set()
    total_pairs = n * (n - 1) // 2
    available = total_pairs - len(edge_set) - len(excl - edge_set)
    if k > available:
        raise ValueError(
            f"requested {k} negative pairs but only {available} non-edges available"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E6]))
    forbidden = edge_set | excl
    if total_pairs <= 200_000:
        pool = [
            (u, v)
            for u in range(n)
            for v in range(u + 1, n)
            if (u, v) not in forbidden
        ]
        idx = rng.choice(len(pool), size=k, replace=False)
        return [pool[i] for i in sorted(idx.tolist())]
    out: list[Edge] = []
    seen: set[Edge] = set()
    while len(out) < k:
        m = max(64, 2 * (k - len(out)))
        us = rng.integers(0, n, size=m)
        vs = rng.integers(0, n, size=m)
        for u, v in zip(us.tolist(), vs.tolist()):
            if u == v:
                continue
            e = (u, v) if u < v else (v, u)
            if e in forbidden or e in seen:
                continue
            seen.add(e)
            out.append(e)
            if len(out) == k:
                break
    return out


class NormalizedAdjacency:
    """Symmetrically normalized adjacency with self-loops.

    A~ = D^{-1/2} (A + I) D^{-1/2} where D is the degree matrix of A + I.
    Self-loops are added so isolated (freshly injected) nodes keep a
    nonzero row instead of dividing by zero degree.
    """

    def __init__(self, matrix: sp.csr_matrix):
        self.matrix = matrix

    @property
    def shape(self):
        return self.matrix.shape

    def dense(self) -> np.ndarray:
        return np.asarray(self.matrix.todense(), dtype=np.float64)


def normalize_adjacency(a) -> NormalizedAdjacency:
    """Return A~ = D^{-1/2}(A+I)D^{-1/2} for a symmetric zero-diagonal A."""
    if not sp.issparse(a):
        a = sp.csr_matrix(np.asarray(a, dtype=np.float64))
    a = a.tocsr().astype(np.float64)
    n = a.shape[0]
    a_loop = (a + sp.eye(n, format="csr", dtype=np.float64)).tocsr()
    deg = np.asarray(a_loop.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d_half = sp.diags(inv_sqrt)
    norm = (d_half @ a_loop @ d_half).tocsr()
    return NormalizedAdjacency(norm)


def inject_nodes(g: Graph, m: int, init_features: np.ndarray) -> Graph:
    """Append m isolated nodes with the given features; g is untouched."""
    init_features = np.asarray(init_features, dtype=np.float64)
    if m == 0:
        return Graph(g.adjacency.copy(), g.features.copy(), labels=g.labels,
                     validate=False)
    if init_features.shape != (m, g.n_features):
        raise ValueError(
            f"init_features shape {init_features.shape} != ({m}, {g.n_features})"
        )
    if init_features.size and (init_features.min() < 0 or init_features.max() > 1):
        raise ValueError("injected feature entries must lie in [0, 1]")
    n = g.n_nodes
    adj = sp.block_diag(
        [g.adjacency, sp.csr_matrix((m, m), dtype=np.float64)], format="csr"
    )
    feats = np.vstack([g.features, init_features])
    labels = None
    if g.labels is not None:
        labels = np.concatenate([g.labels, -np.ones(m, dtype=np.int64)])
    return Graph(adj, feats, labels=labels, validate=False)


def write_graph(g: Graph, node_path, edge_path) -> None:
    """Write the plain-text dataset format.

    Node file: one line per node, "id f1 ... fd [label]". Edge file: one
    line per undirected edge, "u v" with u < v.
    """
    with open(node_path, "w") as fh:
        for i in range(g.n_nodes):
            row = g.features[i]
            if float(row.round().astype(np.float64).sum()) == float(row.sum()) and np.isin(row, (0.0, 1.0)).all():
                vals = " ".join(str(int(x)) for x in row)
            else:
                vals = " ".join(format(x, ".6g") for x in row)
            if g.labels is not None:
                fh.write(f"{i} {vals} {int(g.labels[i])}\n")
            else:
                fh.write(f"{i} {vals}\n")
    with open(edge_path, "w") as fh:
        for u, v in g.edges():
            fh.write(f"{u} {v}\n")


def read_graph(node_path, edge_path, has_labels: bool | None = None) -> Graph:
    """Read the plain-text dataset format written by write_graph."""
    ids, rows, labels = [], [], []
    with open(node_path) as fh:
        first_width = None
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if first_width is None:
                first_width = len(parts)
            elif len(parts) != first_width:
                raise ValueError("inconsistent column count in node file")
            ids.append(int(parts[0]))
            rows.append(parts[1:])
    if not rows:
        raise ValueError(f"empty node file: {node_path}")
    width = len(rows[0])
    if has_labels is None:
        # heuristic: labels are small non-negative integers in the last column
        # and every dataset this lab writes has them; a pure feature file can
        # opt out explicitly.
        has_labels = width >= 2 and all(r[-1].lstrip("-").isdigit() for r in rows)
    d = width - 1 if has_labels else width
    feats = np.zeros((len(rows), d), dtype=np.float64)
    for i, row in enumerate(rows):
        feats[i] = [float(x) for x in row[:d]]
        if has_labels:
            labels.append(int(row[-1]))
    order = np.argsort(ids)
    feats = feats[order]
    lab = np.asarray(labels, dtype=np.int64)[order] if has_labels else None
    edges = []
    with open(edge_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            edges.append((int(parts[0]), int(parts[1])))
    adj = adjacency_from_edges(len(rows), edges)
    return Graph(adj, feats, labels=lab)
