"""Graph storage, normalized operators, homophily and synthetic graphs.

Graphs are undirected, unweighted and stored in CSR form. Every loaded or
generated edge list is symmetrized, deduplicated and stripped of self-loops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


class IsolatedNodeError(GraphError):
    """Raised when an operator needs every node to have at least one neighbor."""

    def __init__(self, nodes):
        self.nodes = np.asarray(nodes)
        head = ", ".join(str(int(v)) for v in self.nodes[:10])
        more = "" if len(self.nodes) <= 10 else f" (+{len(self.nodes) - 10} more)"
        super().__init__(f"{len(self.nodes)} isolated node(s): {head}{more}")


class EigenError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        for arr in (self.row_offsets, self.col_indices, self.features, self.labels):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.col_indices) // 2

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]

    def edge_rows(self) -> np.ndarray:
        """Source index of every stored (ordered) edge, aligned with col_indices."""
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    def edges(self) -> np.ndarray:
        """Undirected edge list with src < dst, sorted."""
        rows = self.edge_rows()
        keep = rows < self.col_indices
        return np.stack([rows[keep], self.col_indices[keep]], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.col_indices))
        return sp.csr_matrix(
            (data, self.col_indices, self.row_offsets),
            shape=(self.num_nodes, self.num_nodes),
        )

    def to_dense(self) -> np.ndarray:
        return self.adjacency().toarray()

    def isolated_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.degrees == 0)


def build_graph(edges, num_nodes: int, features=None, labels=None) -> Graph:
    """Build a CSR graph from an arbitrary (possibly directed, duplicated) edge list."""
    if num_nodes <= 0:
        raise GraphError("num_nodes must be positive")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise GraphError(f"edge endpoint out of range [0, {num_nodes})")
    e = e[e[:, 0] != e[:, 1]]
    both = np.concatenate([e, e[:, ::-1]])
    # unique over linearized keys sorts by (src, dst), which is CSR order
    keys = np.unique(both[:, 0] * num_nodes + both[:, 1])
    src, dst = np.divmod(keys, num_nodes)
    row_offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=row_offsets[1:])

    if features is not None:
        features = np.array(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != num_nodes:
            raise GraphError(f"features must have shape ({num_nodes}, f)")
    if labels is not None:
        labels = np.array(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != num_nodes:
            raise GraphError(f"expected {num_nodes} labels, got {labels.shape[0]}")
        if labels.min() < 0:
            raise GraphError("labels must be non-negative class indices")
    return Graph(num_nodes, row_offsets, dst.astype(np.int64), features, labels)


def _require_no_isolated(g: Graph):
    iso = g.isolated_nodes()
    if len(iso):
        raise IsolatedNodeError(iso)


def normalized_adjacency(g: Graph) -> np.ndarray:
    """Dense D^{-1/2} A D^{-1/2}."""
    _require_no_isolated(g)
    s = 1.0 / np.sqrt(g.degrees.astype(np.float64))
    a = g.to_dense()
    return s[:, None] * a * s[None, :]


def normalized_laplacian(g: Graph) -> np.ndarray:
    return np.eye(g.num_nodes) - normalized_adjacency(g)


def homophily_ratio(g: Graph, labels=None) -> float:
    """Fraction of edge endpoints whose two nodes share a label."""
    labels = g.labels if labels is None else np.asarray(labels)
    if labels is None:
        raise GraphError("homophily needs node labels")
    if len(labels) != g.num_nodes:
        raise GraphError(f"expected {g.num_nodes} labels, got {len(labels)}")
    if len(g.col_indices) == 0:
        raise GraphError("homophily is undefined on a graph without edges")
    same = labels[g.edge_rows()] == labels[g.col_indices]
    return float(same.mean())


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


def eig_sym(m, symmetry_tol: float = 1e-10) -> SpectralDecomposition:
    """Full eigendecomposition of a dense symmetric matrix, eigenvalues ascending."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise EigenError(f"expected a square matrix, got shape {m.shape}")
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > symmetry_tol * max(1.0, np.max(np.abs(m))):
        raise EigenError(f"matrix is not symmetric (max |M - M^T| = {asym:.3e})")
    try:
        w, u = np.linalg.eigh(0.5 * (m + m.T))
    except np.linalg.LinAlgError as exc:
        raise EigenError(f"eigensolver did not converge: {exc}") from exc
    return SpectralDecomposition(w, u)


def sbm_generate(block_sizes: Sequence[int], p_in: float, p_out: float, seed: int = 0) -> Graph:
    """Stochastic block model; labels are block ids.

    Each unordered pair is sampled independently, row by row, so memory stays
    O(n) per row and the output depends only on ``seed``.
    """
    sizes = [int(b) for b in block_sizes]
    if not sizes or min(sizes) <= 0:
        raise GraphError("every block must contain at least one node")
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise GraphError("p_in and p_out must lie in [0, 1]")
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = len(labels)
    rng = np.random.default_rng(seed)
    src, dst = [], []
    for i in range(n - 1):
        rest = labels[i + 1:]
        prob = np.where(rest == labels[i], p_in, p_out)
        hit = np.flatnonzero(rng.random(n - i - 1) < prob) + i + 1
        src.append(np.full(len(hit), i))
        dst.append(hit)
    edges = np.stack([np.concatenate(src or [[]]), np.concatenate(dst or [[]])], axis=1)
    return build_graph(edges, n, labels=labels)


def sbm_features(g: Graph, kind: str = "identity", dim: int = 32, seed: int = 0) -> Optional[np.ndarray]:
    """Node features for synthetic graphs: one-hot ids or standard Gaussian noise."""
    if kind == "none":
        return None
    if kind == "identity":
        return np.eye(g.num_nodes)
    if kind == "gaussian":
        return np.random.default_rng(seed).standard_normal((g.num_nodes, dim))
    raise GraphError(f"unknown feature kind {kind!r}")


def with_features(g: Graph, features) -> Graph:
    return Graph(g.num_nodes, g.row_offsets, g.col_indices,
                 None if features is None else np.array(features, dtype=np.float64),
                 g.labels)


def rayleigh_quotient(l, u) -> float:
    u = np.asarray(u, dtype=np.float64)
    uu = float(u @ u)
    if uu == 0.0:
        raise ValueError("Rayleigh quotient of the zero vector is undefined")
    return float(u @ (np.asarray(l) @ u)) / uu


def indicator_rayleigh_oracle(g: Graph, labels, cls: int) -> dict:
    """Edge-counting view of R(u) for the degree-scaled class indicator u = D^{1/2} 1_c.

    With this u, u^T L u equals the number of edges that cross the class
    boundary and u^T u equals the class volume, so R(u) is the fraction of the
    class's edge endpoints that leave the class, i.e. 1 - (class homophily).
    Also reports R for the plain indicator 1_c for comparison.
    """
    labels = np.asarray(labels)
    rows, cols = g.edge_rows(), g.col_indices
    in_c = labels == cls
    endpoints = in_c[rows]
    vol = int(endpoints.sum())
    leaving = int((endpoints & ~in_c[cols]).sum())
    class_phi = 1.0 - leaving / vol if vol else float("nan")
    lap = normalized_laplacian(g)
    deg = g.degrees.astype(np.float64)
    return {
        "class": int(cls),
        "class_homophily": class_phi,
        "rq_degree_scaled": rayleigh_quotient(lap, np.sqrt(deg) * in_c),
        "rq_plain": rayleigh_quotient(lap, in_c.astype(np.float64)),
        "edge_count_prediction": 1.0 - class_phi,
    }


# --- dataset directory format -------------------------------------------------

@dataclass
class Dataset:
    graph: Graph
    split: Optional[dict] = None
    meta: dict = field(default_factory=dict)


def save_dataset(out_dir, g: Graph, split: Optional[dict] = None, extra_meta: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feature_dim = 0 if g.features is None else int(g.features.shape[1])
    meta = {
        "num_nodes": int(g.num_nodes),
        "feature_dim": feature_dim,
        "num_classes": g.num_classes,
        "num_edges": g.num_edges,
    }
    meta.update(extra_meta or {})
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    lines = ["src,dst"] + [f"{a},{b}" for a, b in g.edges()]
    (out / "edges.csv").write_text("\n".join(lines) + "\n")
    if g.features is not None:
        g.features.astype("<f4").tofile(out / "features.bin")
    if g.labels is not None:
        (out / "labels.csv").write_text("".join(f"{int(v)}\n" for v in g.labels))
    if split is not None:
        payload = {k: [int(i) for i in v] for k, v in split.items()}
        (out / "split.json").write_text(json.dumps(payload) + "\n")
    return out


def load_dataset(path, drop_isolated: bool = False) -> Dataset:
    """Read the dataset directory format.

    Isolated nodes are kept by default (and rejected later by the normalized
    operators); ``drop_isolated`` removes them and remaps features, labels and
    split indices.
    """
    root = Path(path)
    if not (root / "meta.json").is_file():
        raise GraphError(f"{root} has no meta.json")
    meta = json.loads((root / "meta.json").read_text())
    n = int(meta["num_nodes"])
    raw = np.loadtxt(root / "edges.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    edges = raw.reshape(-1, 2)

    features = None
    fpath = root / "features.bin"
    if fpath.is_file() and int(meta.get("feature_dim", 0)) > 0:
        f = int(meta["feature_dim"])
        flat = np.fromfile(fpath, dtype="<f4")
        if flat.size != n * f:
            raise GraphError(f"features.bin holds {flat.size} values, expected {n}x{f}")
        features = flat.reshape(n, f).astype(np.float64)
    labels = None
    lpath = root / "labels.csv"
    if lpath.is_file():
        labels = np.loadtxt(lpath, dtype=np.int64, ndmin=1)
    split = None
    spath = root / "split.json"
    if spath.is_file():
        split = {k: np.asarray(v, dtype=np.int64) for k, v in json.loads(spath.read_text()).items()}

    g = build_graph(edges, n, features, labels)
    if drop_isolated and len(g.isolated_nodes()):
        g, split = _drop_isolated(g, split)
        meta = dict(meta, num_nodes=g.num_nodes, dropped_isolated=True)
    return Dataset(g, split, meta)


def _drop_isolated(g: Graph, split):
    keep = g.degrees > 0
    new_id = np.full(g.num_nodes, -1, dtype=np.int64)
    new_id[keep] = np.arange(int(keep.sum()))
    e = g.edges()
    g2 = build_graph(
        new_id[e], int(keep.sum()),
        None if g.features is None else g.features[keep],
        None if g.labels is None else g.labels[keep],
    )
    if split is not None:
        split = {k: new_id[v][new_id[v] >= 0] for k, v in split.items()}
    return g2, split


def random_split(num_nodes: int, train: float = 0.1, val: float = 0.1, seed: int = 0) -> dict:
    perm = np.random.default_rng(seed).permutation(num_nodes)
    n_tr = int(round(train * num_nodes))
    n_va = int(round(val * num_nodes))
    return {
        "train": np.sort(perm[:n_tr]),
        "val": np.sort(perm[n_tr:n_tr + n_va]),
        "test": np.sort(perm[n_tr + n_va:]),
    }
