"""Linear-probe evaluation and spectral checks of the neighbor-contrastive optimum.

The spectral side works with the normalized adjacency A~ = U Lambda U^T. Its
top-d scaled eigenvectors Z* = (U Lambda^{1/2})_{:, 1:d} are the best rank-d
factor of A~ in Frobenius norm, and a least-squares linear readout from Z*
has mean squared error at most (1 - phi) / lambda_{d+1}(L).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .graph import Graph, eig_sym, homophily_ratio, normalized_adjacency
from .nn import AdamState, adam_step

BOUND_SLACK = 1e-9


class SpectralError(ValueError):
    pass


def _fix_signs(u: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip columns so the first entry with |x| > tol is positive."""
    u = u.copy()
    for j in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, j]) > tol)
        if len(nz) and u[nz[0], j] < 0:
            u[:, j] = -u[:, j]
    return u


def top_eigenpairs(a_tilde, d: int):
    """Largest d eigenvalues of A~ (descending) and matching sign-fixed eigenvectors."""
    dec = eig_sym(a_tilde)
    order = np.argsort(-dec.eigenvalues, kind="stable")[:d]
    return dec.eigenvalues[order], _fix_signs(dec.eigenvectors[:, order]), dec


def spectral_embeddings(g: Graph, d: int) -> np.ndarray:
    """Z* = top-d eigenvectors of A~ scaled by sqrt(eigenvalue); rows not normalized."""
    if not 1 <= d <= g.num_nodes:
        raise ValueError(f"d must lie in [1, {g.num_nodes}]")
    vals, vecs, _ = top_eigenpairs(normalized_adjacency(g), d)
    bad = np.flatnonzero(vals < -1e-9)
    if len(bad):
        k = int(bad[0])
        raise SpectralError(f"eigenvalue #{k + 1} of the top {d} is negative ({vals[k]:.3e}); "
                            "its square root is undefined")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def mf_loss(a_tilde, f) -> float:
    """||A~ - F F^T||_F^2"""
    f = np.asarray(f, dtype=np.float64)
    r = np.asarray(a_tilde, dtype=np.float64) - f @ f.T
    return float(np.sum(r * r))


def one_hot(labels, num_classes: Optional[int] = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    out = np.zeros((len(labels), c))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class BoundReport:
    phi: float
    lambda_d_plus_1: float
    mse_lhs: float
    bound_rhs: float
    holds: bool
    d: int

    def to_dict(self) -> dict:
        out = asdict(self)
        if math.isinf(self.bound_rhs):
            out["bound_rhs"] = None
        return out


def theorem1_check(g: Graph, labels, d: int, ridge: float = 1e-10) -> BoundReport:
    """Least-squares readout error from Z* against (1 - phi) / lambda_{d+1}."""
    labels = np.asarray(g.labels if labels is None else labels)
    if not 1 <= d < g.num_nodes:
        raise ValueError(f"d must lie in [1, {g.num_nodes - 1}] so that lambda_(d+1) exists")
    phi = homophily_ratio(g, labels)
    a = normalized_adjacency(g)
    vals, vecs, dec = top_eigenpairs(a, d)
    bad = np.flatnonzero(vals < -1e-9)
    if len(bad):
        k = int(bad[0])
        raise SpectralError(f"eigenvalue #{k + 1} of the top {d} is negative ({vals[k]:.3e})")
    z = vecs * np.sqrt(np.clip(vals, 0.0, None))
    # Laplacian spectrum ascending is 1 - adjacency spectrum descending
    lap_eigs = np.sort(1.0 - dec.eigenvalues)
    lam = float(lap_eigs[d])
    y = one_hot(labels)
    b = np.linalg.solve(z.T @ z + ridge * np.eye(d), z.T @ y)
    resid = y - z @ b
    mse = float(np.mean(np.sum(resid * resid, axis=1)))
    rhs = (1.0 - phi) / lam if lam > 0 else math.inf
    return BoundReport(phi, lam, mse, rhs, bool(mse <= rhs + BOUND_SLACK), d)


# --- linear probe --------------------------------------------------------------------

@dataclass
class ProbeConfig:
    lr: float = 1e-2
    wd: float = 1e-4
    epochs: int = 300


@dataclass
class ProbeResult:
    weights: np.ndarray
    bias: np.ndarray
    train_acc: float
    val_acc: float
    test_acc: float
    epochs: int

    def to_dict(self) -> dict:
        return {"train_acc": self.train_acc, "val_acc": self.val_acc,
                "test_acc": self.test_acc, "epochs": self.epochs}


def _softmax(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_split(split, n):
    idx = {k: np.asarray(split.get(k, []), dtype=np.int64) for k in ("train", "val", "test")}
    for k, v in idx.items():
        if len(v) and (v.min() < 0 or v.max() >= n):
            raise ValueError(f"{k} split has indices outside [0, {n})")
    seen = np.concatenate(list(idx.values()))
    if len(np.unique(seen)) != len(seen):
        raise ValueError("train/val/test splits overlap or contain duplicates")
    return idx


def fit_logistic(x, y, num_classes: int, cfg: ProbeConfig):
    """Full-batch multinomial logistic regression trained with Adam."""
    w = np.zeros((x.shape[1], num_classes))
    b = np.zeros(num_classes)
    target = one_hot(y, num_classes)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.wd)
    for _ in range(cfg.epochs):
        p = _softmax(x @ w + b)
        g = (p - target) / len(y)
        adam_step(opt, [w, b], [x.T @ g, g.sum(axis=0)])
    return w, b


def _accuracy(x, y, w, b) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(x @ w + b, axis=1) == y))


def linear_probe(z, labels, split: dict, cfg: Optional[ProbeConfig] = None) -> ProbeResult:
    """Fit on the train indices only, report accuracy on every split."""
    cfg = cfg or ProbeConfig()
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(z):
        raise ValueError(f"{len(labels)} labels for {len(z)} embeddings")
    idx = _check_split(split, len(z))
    tr = idx["train"]
    if len(tr) == 0:
        raise ValueError("empty train split")
    if len(np.unique(labels[tr])) < 2:
        raise ValueError("train split contains a single class")
    c = int(labels.max()) + 1
    w, b = fit_logistic(z[tr], labels[tr], c, cfg)
    acc = {k: _accuracy(z[v], labels[v], w, b) for k, v in idx.items()}
    return ProbeResult(w, b, acc["train"], acc["val"], acc["test"], cfg.epochs)
