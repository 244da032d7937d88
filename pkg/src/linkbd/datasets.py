"""Dataset handling: the plain-text graph format, a Planetoid-style
converter, and deterministic synthetic citation-graph generators.

The synthetic generators produce desk-scale stand-ins whose node/edge/
feature/class counts match the published statistics of the usual citation
benchmarks. They exist because raw benchmark distributions cannot be
redistributed with this package; the converter ingests the real thing
when a Planetoid-style directory is available.
"""

from __future__ import annotations

import json
import os
import pickle
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import Graph, adjacency_from_edges, write_graph


@dataclass(frozen=True)
class SyntheticSpec:
    n_nodes: int
    n_edges: int
    n_classes: int
    n_features: int
    homophily: float  # fraction of edges inside a class
    mean_active: float  # mean number of active feature dims per node
    topic_frac: float  # probability an active dim comes from the class topic
    binary: bool  # binary bag-of-words vs continuous tf-idf-like


SYNTHETIC_SPECS: dict[str, SyntheticSpec] = {
    "toy": SyntheticSpec(120, 360, 3, 24, 0.85, 6.0, 0.85, True),
    "cora": SyntheticSpec(2708, 5429, 7, 1433, 0.81, 18.0, 0.80, True),
    "cora_ml": SyntheticSpec(2810, 7981, 7, 2879, 0.78, 25.0, 0.80, True),
    "citeseer": SyntheticSpec(3327, 4732, 6, 3703, 0.74, 32.0, 0.80, True),
    "pubmed": SyntheticSpec(19717, 44338, 3, 500, 0.80, 50.0, 0.80, False),
    "cs": SyntheticSpec(18333, 327576, 15, 6805, 0.80, 40.0, 0.80, True),
}


def generate_synthetic(spec: SyntheticSpec | str, seed: int = 0) -> Graph:
    """Degree-corrected planted-partition graph with class-topical features.

    Exact edge count, deterministic per seed. Edges are drawn with node
    propensities (lognormal) inside a class/class block structure chosen to
    hit the requested homophily; features are sparse with most active
    dimensions drawn from a per-class topic pool.
    """
    if isinstance(spec, str):
        spec = SYNTHETIC_SPECS[spec]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    n, c = spec.n_nodes, spec.n_classes

    class_w = 1.0 / (1.0 + 0.35 * np.arange(c))
    class_w /= class_w.sum()
    labels = rng.choice(c, size=n, p=class_w)
    # keep every class populated even for tiny graphs
    for k in range(c):
        if not (labels == k).any():
            labels[rng.integers(0, n)] = k

    theta = rng.lognormal(mean=0.0, sigma=0.6, size=n)
    members = [np.flatnonzero(labels == k) for k in range(c)]
    mass = np.array([theta[m].sum() for m in members])

    n_within = int(round(spec.homophily * spec.n_edges))
    n_between = spec.n_edges - n_within
    edges: set[tuple[int, int]] = set()

    def draw_node(k):
        m = members[k]
        return int(rng.choice(m, p=theta[m] / mass[k]))

    within_p = mass**2 / (mass**2).sum()
    got = 0
    while got < n_within:
        k = int(rng.choice(c, p=within_p))
        if len(members[k]) < 2:
            continue
        u, v = draw_node(k), draw_node(k)
        if u == v:
            continue
        e = (u, v) if u < v else (v, u)
        if e in edges:
            continue
        edges.add(e)
        got += 1
    pair_w = np.outer(mass, mass)
    np.fill_diagonal(pair_w, 0.0)
    pair_w = pair_w.ravel() / pair_w.sum()
    got = 0
    while got < n_between:
        ab = int(rng.choice(c * c, p=pair_w))
        a, b = divmod(ab, c)
        u, v = draw_node(a), draw_node(b)
        if u == v:
            continue
        e = (u, v) if u < v else (v, u)
        if e in edges:
            continue
        edges.add(e)
        got += 1

    d = spec.n_features
    topic_size = max(4, int(round(1.3 * d / c)))
    topics = [rng.choice(d, size=topic_size, replace=False) for _ in range(c)]
    rows, cols, vals = [], [], []
    for i in range(n):
        n_active = 1 + rng.poisson(max(spec.mean_active - 1.0, 0.0))
        use_topic = rng.random(n_active) < spec.topic_frac
        dims = np.where(
            use_topic,
            rng.choice(topics[labels[i]], size=n_active),
            rng.integers(0, d, size=n_active),
        )
        dims = np.unique(dims)
        rows.extend([i] * len(dims))
        cols.extend(dims.tolist())
        if spec.binary:
            vals.extend([1.0] * len(dims))
        else:
            vals.extend(rng.uniform(0.05, 1.0, size=len(dims)).tolist())
    feats = np.zeros((n, d))
    feats[rows, cols] = vals

    adj = adjacency_from_edges(n, sorted(edges))
    return Graph(adj, feats, labels=labels)


def dataset_paths(directory: str, name: str) -> tuple[str, str, str]:
    base = os.path.join(directory, name)
    return base + ".nodes.txt", base + ".edges.txt", base + ".meta.json"


def save_dataset(g: Graph, directory: str, name: str) -> dict:
    """Write node/edge text files plus a small sidecar with the counts."""
    os.makedirs(directory, exist_ok=True)
    node_path, edge_path, meta_path = dataset_paths(directory, name)
    write_graph(g, node_path, edge_path)
    meta = {
        "name": name,
        "nodes": g.n_nodes,
        "edges": g.n_edges,
        "features": g.n_features,
        "classes": 0 if g.labels is None else int(g.labels.max() + 1),
        "has_labels": g.labels is not None,
        "binary_features": bool(np.isin(g.features, (0.0, 1.0)).all()),
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return meta


def load_dataset(directory: str, name: str) -> Graph:
    node_path, edge_path, meta_path = dataset_paths(directory, name)
    if not os.path.exists(node_path):
        raise FileNotFoundError(f"missing node file: {node_path}")
    has_labels = None
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            has_labels = bool(json.load(fh).get("has_labels", True))
    return _read_graph_fast(node_path, edge_path, has_labels)


def _read_graph_fast(node_path, edge_path, has_labels):
    table = np.loadtxt(node_path, dtype=np.float64, ndmin=2)
    if has_labels is None:
        has_labels = True
    ids = table[:, 0].astype(np.int64)
    if has_labels:
        feats = table[:, 1:-1]
        labels = table[:, -1].astype(np.int64)
    else:
        feats = table[:, 1:]
        labels = None
    order = np.argsort(ids)
    feats = np.ascontiguousarray(feats[order])
    if labels is not None:
        labels = labels[order]
    raw = np.loadtxt(edge_path, dtype=np.int64, ndmin=2)
    edges = [tuple(e) for e in raw.tolist()] if raw.size else []
    adj = adjacency_from_edges(table.shape[0], edges)
    return Graph(adj, feats, labels=labels)


# ---------------------------------------------------------------------------
# Planetoid-style raw distributions (ind.<name>.{x,tx,allx,y,ty,ally,graph,
# test.index}) -> plain-text format.

_PLANETOID_PARTS = ("x", "tx", "allx", "y", "ty", "ally", "graph")


def _load_pickle(path):
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def convert_planetoid(raw_dir: str, name: str, out_dir: str) -> dict:
    """Convert a Planetoid-style raw directory into node/edge text files."""
    objs = {}
    for part in _PLANETOID_PARTS:
        path = os.path.join(raw_dir, f"ind.{name}.{part}")
        if not os.path.exists(path):
            raise FileNotFoundError(f"unrecognized Planetoid layout: missing {path}")
    idx_path = os.path.join(raw_dir, f"ind.{name}.test.index")
    if not os.path.exists(idx_path):
        raise FileNotFoundError(f"unrecognized Planetoid layout: missing {idx_path}")
    for part in _PLANETOID_PARTS:
        objs[part] = _load_pickle(os.path.join(raw_dir, f"ind.{name}.{part}"))
    test_idx = np.array(
        [int(line) for line in open(idx_path) if line.strip()], dtype=np.int64
    )

    allx = sp.csr_matrix(objs["allx"])
    tx = sp.csr_matrix(objs["tx"])
    ally = np.asarray(objs["ally"])
    ty = np.asarray(objs["ty"])
    min_t = int(test_idx.min())
    if min_t != allx.shape[0]:
        raise ValueError("unexpected Planetoid layout: test ids do not follow allx")
    # place each test row at its node id; gaps (isolated citeseer test nodes)
    # stay all-zero, as in the canonical loaders
    span = int(test_idx.max()) - min_t + 1
    tx_full = sp.lil_matrix((span, allx.shape[1]))
    tx_full[test_idx - min_t] = tx
    ty_full = np.zeros((span, ally.shape[1]))
    ty_full[test_idx - min_t] = ty
    feats = sp.vstack([allx.tolil(), tx_full]).tocsr()
    labels = np.vstack([ally, ty_full]).argmax(axis=1).astype(np.int64)

    n = feats.shape[0]
    edges = set()
    for u, nbrs in objs["graph"].items():
        for v in nbrs:
            u, v = int(u), int(v)
            if u == v or u >= n or v >= n:
                continue
            edges.add((u, v) if u < v else (v, u))
    dense = np.asarray(feats.todense(), dtype=np.float64)
    if dense.max() > 1.0:  # some distributions carry raw counts
        dense = np.clip(dense, 0.0, 1.0)
    g = Graph(adjacency_from_edges(n, sorted(edges)), dense, labels=labels)
    return save_dataset(g, out_dir, name)


def prepare_dataset(
    out_dir: str,
    name: str,
    raw_dir: str | None = None,
    synthetic: bool = False,
    seed: int = 0,
) -> dict:
    """Materialize a dataset in the text format; the `prepare` verb backend."""
    if synthetic:
        if name not in SYNTHETIC_SPECS:
            raise ValueError(
                f"no synthetic spec for {name!r}; known: {sorted(SYNTHETIC_SPECS)}"
            )
        g = generate_synthetic(name, seed=seed)
        return save_dataset(g, out_dir, name)
    if raw_dir is None:
        raise ValueError("prepare needs either a raw dataset directory or synthetic=True")
    return convert_planetoid(raw_dir, name, out_dir)
