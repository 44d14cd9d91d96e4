"""Neighbor-positive contrastive loss with exact or kernel-approximated negatives.

All component functions take row-normalized embeddings Z and return a
``LossValue`` whose ``total`` is the node average. When ``grad=True`` the
gradient is with respect to Z treated as a free matrix; ``loss_gradient``
chains it through the row normalization to the encoder output.

Per node i, with s_ij = z_i . z_j:

    positive  (mean)   -log( mean_{j in N(i)} exp(s_ij / tau) )
    positive  (max)    -s_ik / tau,  k = most similar neighbor
    positive  (weight) -log( mean_{j in N(i)} w_ij exp(s_ij / tau) ),  w_i = softmax_j(s_ij)
    negative  (exact)  log sum_{k in V} exp(s_ik / tau)
    negative  (exclude_neighbors)  same sum without the neighbors of i
    negative  (approx) log psi(z_i)^T sum_k psi(z_k)  [+ 1/tau]
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .graph import Graph, IsolatedNodeError

VARIANTS = ("mean", "max", "weight")
NEGATIVES = ("exact", "approx", "exclude_neighbors")

_BLOCK_ELEMS = 1 << 18  # logits per row block (2 MB), so the working set stays cache-sized at any n
_NORM_TOL = 1e-6


class NotNormalizedError(ValueError):
    pass


class LossWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    variant: str = "mean"
    negatives: str = "approx"
    clamp_floor: float = 1e-9
    include_constant: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.negatives not in NEGATIVES:
            raise ValueError(f"negatives must be one of {NEGATIVES}")
        if not 0.0 < self.clamp_floor <= 1e-3:
            raise ValueError("clamp_floor must lie in (0, 1e-3]")


@dataclass
class LossValue:
    total: float
    per_node: np.ndarray
    gradient: Optional[np.ndarray] = None
    clamped: int = 0

    def __add__(self, other: "LossValue") -> "LossValue":
        grad = None
        if self.gradient is not None and other.gradient is not None:
            grad = self.gradient + other.gradient
        per_node = self.per_node + other.per_node
        return LossValue(float(per_node.mean()), per_node, grad, self.clamped + other.clamped)


def normalize_rows(h):
    """Row l2 normalization; returns (Z, row norms)."""
    h = np.asarray(h, dtype=np.float64)
    norms = np.linalg.norm(h, axis=1)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero row")
    return h / norms[:, None], norms


def normalize_backward(z, norms, grad_z):
    """Gradient through h -> h / ||h|| given the normalized rows and norms."""
    radial = np.sum(z * grad_z, axis=1, keepdims=True)
    return (grad_z - z * radial) / norms[:, None]


def _check_normalized(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("embeddings must be a 2-d array")
    dev = np.max(np.abs(np.linalg.norm(z, axis=1) - 1.0)) if len(z) else 0.0
    if dev > _NORM_TOL:
        raise NotNormalizedError(f"embedding rows are not unit norm (max deviation {dev:.2e})")
    return z


def _check_graph(z, g: Graph):
    if g.num_nodes != z.shape[0]:
        raise ValueError(f"graph has {g.num_nodes} nodes but Z has {z.shape[0]} rows")
    iso = g.isolated_nodes()
    if len(iso):
        raise IsolatedNodeError(iso)


def _segment_lse(values, offsets):
    """log-sum-exp of each CSR segment, plus the within-segment softmax."""
    starts = offsets[:-1]
    seg_max = np.maximum.reduceat(values, starts)
    counts = np.diff(offsets)
    shifted = np.exp(values - np.repeat(seg_max, counts))
    sums = np.add.reduceat(shifted, starts)
    soft = shifted / np.repeat(sums, counts)
    return seg_max + np.log(sums), soft


def _edge_grad(z, g: Graph, coef):
    """Gradient of sum_edges coef_e * s_{src(e), dst(e)} w.r.t. Z (free rows)."""
    n = g.num_nodes
    c = sp.csr_matrix((coef, g.col_indices, g.row_offsets), shape=(n, n))
    return c @ z + c.T @ z


def _edge_sims(z, g: Graph):
    return np.einsum("ij,ij->i", z[g.edge_rows()], z[g.col_indices])


def positive_loss(z, g: Graph, cfg: LossConfig, grad: bool = False) -> LossValue:
    z = _check_normalized(z)
    _check_graph(z, g)
    tau = cfg.tau
    lse, soft = _segment_lse(_edge_sims(z, g) / tau, g.row_offsets)
    per_node = np.log(g.degrees) - lse
    out = LossValue(float(per_node.mean()), per_node)
    if grad:
        out.gradient = _edge_grad(z, g, -soft / tau) / g.num_nodes
    return out


def select_max_neighbors(z, g: Graph) -> np.ndarray:
    """Index of the most similar neighbor of every node (first one on ties)."""
    sims = _edge_sims(z, g)
    out = np.empty(g.num_nodes, dtype=np.int64)
    for i in range(g.num_nodes):
        lo, hi = g.row_offsets[i], g.row_offsets[i + 1]
        out[i] = g.col_indices[lo + int(np.argmax(sims[lo:hi]))]
    return out


def positive_loss_max(z, g: Graph, cfg: LossConfig, grad: bool = False) -> LossValue:
    z = _check_normalized(z)
    _check_graph(z, g)
    n = g.num_nodes
    best = select_max_neighbors(z, g)
    s = np.einsum("ij,ij->i", z, z[best])
    per_node = -s / cfg.tau
    out = LossValue(float(per_node.mean()), per_node)
    if grad:
        c = sp.csr_matrix((np.full(n, -1.0 / cfg.tau), best, np.arange(n + 1)), shape=(n, n))
        out.gradient = (c @ z + c.T @ z) / n
    return out


def positive_loss_weight(z, g: Graph, cfg: LossConfig, grad: bool = False) -> LossValue:
    # sum_j softmax(s)_j exp(s_j / tau) = exp(LSE(s (1 + 1/tau)) - LSE(s))
    z = _check_normalized(z)
    _check_graph(z, g)
    s = _edge_sims(z, g)
    sharp = 1.0 + 1.0 / cfg.tau
    lse_sharp, q = _segment_lse(s * sharp, g.row_offsets)
    lse_plain, p = _segment_lse(s, g.row_offsets)
    per_node = np.log(g.degrees) - lse_sharp + lse_plain
    out = LossValue(float(per_node.mean()), per_node)
    if grad:
        out.gradient = _edge_grad(z, g, p - sharp * q) / g.num_nodes
    return out


def neighbor_weights(z, g: Graph) -> list[np.ndarray]:
    """Softmax weights over each node's neighbors (reference for tests and reports)."""
    s = _edge_sims(_check_normalized(z), g)
    _, p = _segment_lse(s, g.row_offsets)
    return [p[g.row_offsets[i]:g.row_offsets[i + 1]] for i in range(g.num_nodes)]


def _row_blocks(n):
    step = max(1, _BLOCK_ELEMS // max(n, 1))
    for lo in range(0, n, step):
        yield lo, min(n, lo + step)


def exact_negative_weights(z, tau: float) -> np.ndarray:
    """Dense softmax matrix R_ik = exp(s_ik/tau) / sum_k exp(s_ik/tau)."""
    z = _check_normalized(z)
    logits = (z @ z.T) / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def negative_loss_exact(z, cfg: LossConfig, grad: bool = False) -> LossValue:
    """Full-denominator term in row blocks of a fixed element budget; time O(n^2 d)."""
    z = _check_normalized(z)
    n = z.shape[0]
    per_node = np.empty(n)
    g_out = np.zeros_like(z) if grad else None
    for lo, hi in _row_blocks(n):
        logits = (z[lo:hi] @ z.T) / cfg.tau
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        sums = e.sum(axis=1, keepdims=True)
        per_node[lo:hi] = (m + np.log(sums))[:, 0]
        if grad:
            r = e / sums
            g_out[lo:hi] += r @ z
            g_out += r.T @ z[lo:hi]
    out = LossValue(float(per_node.mean()), per_node)
    if grad:
        out.gradient = g_out / (cfg.tau * n)
    return out


def _neighbor_mask(g: Graph, lo: int, hi: int) -> np.ndarray:
    mask = np.zeros((hi - lo, g.num_nodes), dtype=bool)
    a, b = g.row_offsets[lo], g.row_offsets[hi]
    rows = np.repeat(np.arange(hi - lo), g.degrees[lo:hi])
    mask[rows, g.col_indices[a:b]] = True
    return mask


def negative_loss_exclude_neighbors(z, g: Graph, cfg: LossConfig, grad: bool = False) -> LossValue:
    """Denominator over non-neighbors (self included), as full sum minus neighbor sum.

    Falls back to direct summation over the complement for rows where the
    neighbor share exceeds 99.99% of the full sum.
    """
    z = _check_normalized(z)
    if g.num_nodes != z.shape[0]:
        raise ValueError(f"graph has {g.num_nodes} nodes but Z has {z.shape[0]} rows")
    # isolated nodes are fine here: their negative set is every node
    n = z.shape[0]
    full_nbrs = np.flatnonzero(g.degrees == n - 1)
    if len(full_nbrs):
        warnings.warn(
            f"{len(full_nbrs)} node(s) are adjacent to every other node; their negative set is only themselves",
            LossWarning, stacklevel=2,
        )
    per_node = np.empty(n)
    g_out = np.zeros_like(z) if grad else None
    for lo, hi in _row_blocks(n):
        logits = (z[lo:hi] @ z.T) / cfg.tau
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        mask = _neighbor_mask(g, lo, hi)
        full = e.sum(axis=1)
        nbr = np.where(mask, e, 0.0).sum(axis=1)
        rest = full - nbr
        unsafe = nbr > 0.9999 * full
        if np.any(unsafe):
            rest[unsafe] = np.where(mask[unsafe], 0.0, e[unsafe]).sum(axis=1)
        per_node[lo:hi] = m[:, 0] + np.log(rest)
        if grad:
            r = np.where(mask, 0.0, e) / rest[:, None]
            g_out[lo:hi] += r @ z
            g_out += r.T @ z[lo:hi]
    out = LossValue(float(per_node.mean()), per_node)
    if grad:
        out.gradient = g_out / (cfg.tau * n)
    return out


def negative_loss_approx(z, feature_map, cfg: LossConfig, grad: bool = False) -> LossValue:
    """Linear-time surrogate: one pass to sum psi(z_k), one pass of dot products."""
    z = _check_normalized(z)
    if not np.isclose(feature_map.tau, cfg.tau, rtol=1e-12, atol=0.0):
        raise ValueError(f"feature map tau={feature_map.tau} does not match loss tau={cfg.tau}")
    n = z.shape[0]
    psi = feature_map.project(z)
    total = psi.sum(axis=0)
    t = psi @ total
    clamped = t < cfg.clamp_floor
    per_node = np.log(np.maximum(t, cfg.clamp_floor))
    if cfg.include_constant:
        per_node = per_node + 1.0 / cfg.tau
    out = LossValue(float(per_node.mean()), per_node, clamped=int(clamped.sum()))
    if grad:
        a = np.where(clamped, 0.0, 1.0 / np.where(clamped, 1.0, t))
        g_psi = (a[:, None] * total[None, :] + (a @ psi)[None, :]) / n
        out.gradient = feature_map.project_backward(z, g_psi, psi)
    return out


def local_gcl_loss(z, g: Graph, cfg: LossConfig, feature_map=None, grad: bool = False) -> LossValue:
    """Positive term (per ``cfg.variant``) plus negative term (per ``cfg.negatives``)."""
    if cfg.variant == "mean":
        pos = positive_loss(z, g, cfg, grad)
    elif cfg.variant == "max":
        pos = positive_loss_max(z, g, cfg, grad)
    else:
        pos = positive_loss_weight(z, g, cfg, grad)

    if cfg.negatives == "exact":
        neg = negative_loss_exact(z, cfg, grad)
    elif cfg.negatives == "exclude_neighbors":
        neg = negative_loss_exclude_neighbors(z, g, cfg, grad)
    else:
        if feature_map is None:
            raise ValueError("approximate negatives need a feature map")
        neg = negative_loss_approx(z, feature_map, cfg, grad)
    return pos + neg


def loss_gradient(h, g: Graph, cfg: LossConfig, feature_map=None) -> np.ndarray:
    """Gradient of the total loss w.r.t. the un-normalized embeddings ``h``."""
    z, norms = normalize_rows(h)
    val = local_gcl_loss(z, g, cfg, feature_map, grad=True)
    return normalize_backward(z, norms, val.gradient)
