"""Self-check suites: random-feature statistics, spectral guarantees, gradients.

Each check returns a dict with ``name``, ``anchor`` (the guarantee it
exercises), ``measured``, ``expected`` and ``pass``.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.linalg import hadamard

from . import kernel as K
from .evaluate import mf_loss, spectral_embeddings, theorem1_check
from .graph import build_graph, indicator_rayleigh_oracle, normalized_adjacency, sbm_generate
from .loss import VARIANTS, LossConfig, local_gcl_loss, loss_gradient, normalize_rows
from .nn import encoder_backward, encoder_forward, gcn_propagation_matrix, init_encoder


def _check(name, anchor, measured, expected, ok, **extra):
    out = {"name": name, "anchor": anchor, "measured": measured, "expected": expected, "pass": bool(ok)}
    out.update(extra)
    return out


# --- kernel -------------------------------------------------------------------------

def fwht_matches_dense(max_size: int = 256, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    n = 2
    while n <= max_size:
        v = rng.standard_normal(n)
        h = hadamard(n) / math.sqrt(n)
        worst = max(worst, float(np.max(np.abs(K.fwht(v) - h @ v))))
        n *= 2
    return _check("fwht_vs_dense", "normalized Walsh-Hadamard transform", worst, "<= 1e-12", worst <= 1e-12)


def sorf_orthogonality(tau: float = 0.5, seed: int = 0) -> dict:
    worst = 0.0
    d = 4
    while d <= 256:
        m = K.sorf_build(d, d, tau, seed)
        w = m.block_matrix(0)
        worst = max(worst, float(np.max(np.abs(w @ w.T - (d / tau) * np.eye(d)))))
        d *= 2
    return _check("sorf_scaled_orthogonality", "structured orthogonal projection W W^T = (d/tau) I",
                  worst, "<= 1e-9", worst <= 1e-9)


def sorf_dense_oracle(input_dim: int = 16, num_features: int = 40, tau: float = 0.5, seed: int = 0) -> dict:
    """Fast projection vs explicit sqrt(d/tau) H D1 H D2 H D3 blocks."""
    m = K.sorf_build(input_dim, num_features, tau, seed)
    d = m.d_pad
    h = hadamard(d) / math.sqrt(d)
    blocks = [math.sqrt(d / tau) * h @ np.diag(s[0]) @ h @ np.diag(s[1]) @ h @ np.diag(s[2]) for s in m.signs]
    w = np.concatenate(blocks, axis=0)[:num_features]
    x = np.random.default_rng(seed + 1).standard_normal((5, input_dim))
    xp = np.pad(x, ((0, 0), (0, d - input_dim)))
    u = w @ xp.T
    dense = np.concatenate([np.cos(u), np.sin(u)], axis=0).T / math.sqrt(num_features)
    err = float(np.max(np.abs(m.project(x) - dense)))
    return _check("sorf_vs_dense", "structured projection via fast Hadamard transforms", err, "<= 1e-10",
                  err <= 1e-10)


def kernel_suite(quick: bool = False, seed: int = 0) -> list:
    out = [fwht_matches_dense(seed=seed), sorf_orthogonality(seed=seed), sorf_dense_oracle(seed=seed)]
    maps = 50 if quick else 200
    for tau in (0.5, 1.0):
        r = K.unbiasedness_check(pairs=20, maps=maps, num_features=1024, tau=tau, seed=seed)
        out.append(_check(f"rff_unbiased_tau{tau}", "unbiased RFF estimator of the Gaussian kernel",
                          r["max_abs_z"], "|z-score| <= 3", r["pass"]))
    trials = 4000 if quick else 20000
    for z, D in itertools.product((0.5, 1.0, 1.5), (256, 1024)):
        r = K.variance_check(z, D, trials=trials, seed=seed)
        out.append(_check(f"rff_variance_z{z}_D{D}", "RFF variance (1 - e^{-z^2})^2 / (2D)",
                          r["measured"], r["predicted"], r["pass"], relative_error=r["relative_error"]))
    t2 = 1000 if quick else 10000
    for tau, D, eps in itertools.product((0.5, 1.0), (256, 1024, 4096), (0.05, 0.1)):
        r = K.theorem2_check(tau, D, eps, trials=t2, seed=seed)
        out.append(_check(f"chebyshev_tau{tau}_D{D}_eps{eps}", "Chebyshev bound on RFF deviation",
                          r["violation_rate"], f"<= {eps}", r["pass"], bound=r["bound"],
                          mean_abs_error=r["mean_abs_error"]))
    return out


# --- spectral -----------------------------------------------------------------------

def clique_graph(sizes) -> "Graph":
    edges, labels, base = [], [], 0
    for c, s in enumerate(sizes):
        edges += [(base + i, base + j) for i in range(s) for j in range(i + 1, s)]
        labels += [c] * s
        base += s
    return build_graph(edges, base, labels=labels)


def eckart_young_trial(g, d: int, rivals: int, rng) -> tuple[float, float]:
    """Loss at Z* and the best loss over random factors and small perturbations of Z*."""
    a = normalized_adjacency(g)
    z = spectral_embeddings(g, d)
    best = mf_loss(a, z)
    cands = [rng.standard_normal(z.shape) * rng.uniform(0.05, 1.0) for _ in range(rivals // 2)]
    cands += [z + 1e-2 * rng.standard_normal(z.shape) for _ in range(rivals - rivals // 2)]
    return best, min(mf_loss(a, f) for f in cands)


def spectral_suite(quick: bool = False, seed: int = 0) -> list:
    out = []
    g = clique_graph([4, 5, 6])
    r = theorem1_check(g, g.labels, d=3)
    out.append(_check("readout_bound_cliques", "readout error <= (1 - phi) / lambda_{d+1}, phi = 1",
                      r.mse_lhs, r.bound_rhs, r.holds and r.mse_lhs <= 1e-12, report=r.to_dict()))
    seeds = range(3 if quick else 10)
    worst = -math.inf
    for s in seeds:
        gs = _connected_sbm([50, 50], 0.2, 0.02, seed + s)
        r = theorem1_check(gs, gs.labels, d=8)
        worst = max(worst, r.mse_lhs - r.bound_rhs)
    out.append(_check("readout_bound_sbm", "readout error <= (1 - phi) / lambda_{d+1}",
                      worst, "mse - bound <= 1e-9", worst <= 1e-9, seeds=len(seeds)))
    rng = np.random.default_rng(seed)
    fails = 0
    graphs = 5 if quick else 20
    for k in range(graphs):
        gk = _connected_sbm([10, 10], 0.6, 0.1, seed + 100 + k)
        best, rival = eckart_young_trial(gk, 4, 100, rng)
        fails += best > rival
    out.append(_check("eckart_young", "scaled top eigenvectors minimize ||A~ - F F^T||_F^2",
                      fails, 0, fails == 0, graphs=graphs))
    gr = _connected_sbm([30, 30], 0.3, 0.05, seed)
    rq = indicator_rayleigh_oracle(gr, gr.labels, 0)
    err = abs(rq["rq_degree_scaled"] - rq["edge_count_prediction"])
    out.append(_check("rayleigh_vs_homophily", "R(D^{1/2} 1_c) = 1 - class homophily",
                      rq["rq_degree_scaled"], rq["edge_count_prediction"], err <= 1e-12, detail=rq))
    return out


def _connected_sbm(sizes, p_in, p_out, seed):
    """SBM draw with no isolated nodes (re-drawn with the next seed if needed)."""
    s = seed
    while True:
        g = sbm_generate(sizes, p_in, p_out, s)
        if not len(g.isolated_nodes()):
            return g
        s += 10_000


# --- gradients ----------------------------------------------------------------------

def gradient_graph(seed: int = 0):
    return _connected_sbm([5, 5], 0.8, 0.2, seed)


def fd_relative_error(f, x, analytic, h: float = 1e-5) -> float:
    """max |analytic - central difference| / max |central difference|"""
    num = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        num[idx] = (fp - fm) / (2 * h)
    return float(np.max(np.abs(analytic - num)) / max(np.max(np.abs(num)), 1e-12))


def embedding_gradient_error(variant: str, negatives: str, approx: str = "sorf", seed: int = 0,
                             dim: int = 4, tau: float = 0.5) -> float:
    g = gradient_graph(seed)
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((g.num_nodes, dim))
    cfg = LossConfig(tau=tau, variant=variant, negatives=negatives)
    fmap = K.make_feature_map(approx, dim, 256, tau, seed) if negatives == "approx" else None
    analytic = loss_gradient(h, g, cfg, fmap)
    return fd_relative_error(lambda: local_gcl_loss(normalize_rows(h)[0], g, cfg, fmap).total, h, analytic)


def encoder_gradient_error(kind: str, layers: int, variant: str, negatives: str, seed: int = 0,
                           dim: int = 4, tau: float = 0.5) -> float:
    """Parameter gradients of the whole encoder + loss vs finite differences."""
    g = gradient_graph(seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((g.num_nodes, 6))
    params = init_encoder(6, dim, layers, kind, seed)
    for b in params.biases:
        b[:] = rng.normal(0.0, 0.1, size=b.shape)
    prop = gcn_propagation_matrix(g) if kind == "gcn" else None
    cfg = LossConfig(tau=tau, variant=variant, negatives=negatives)
    fmap = K.make_feature_map("sorf", dim, 256, tau, seed) if negatives == "approx" else None

    def total():
        _, z, _ = encoder_forward(params, x, prop)
        return local_gcl_loss(z, g, cfg, fmap).total

    h, z, cache = encoder_forward(params, x, prop)
    grads = encoder_backward(params, cache, loss_gradient(h, g, cfg, fmap))
    return max(fd_relative_error(total, p, gp) for p, gp in zip(params.arrays(), grads.arrays()))


def gradient_suite(quick: bool = False, seed: int = 0, tol: float = 1e-4) -> list:
    out = []
    negs = ("exact", "approx", "exclude_neighbors")
    for variant, neg in itertools.product(VARIANTS, negs):
        err = embedding_gradient_error(variant, neg, seed=seed)
        out.append(_check(f"grad_embeddings_{variant}_{neg}", "analytic loss gradient", err, f"< {tol}", err < tol))
    layer_set = (2,) if quick else (1, 2, 3)
    for kind, layers, variant, neg in itertools.product(("gcn", "mlp"), layer_set, VARIANTS, negs):
        err = encoder_gradient_error(kind, layers, variant, neg, seed=seed)
        out.append(_check(f"grad_{kind}{layers}_{variant}_{neg}", "encoder backward pass",
                          err, f"< {tol}", err < tol))
    return out


SUITES = {"kernel": kernel_suite, "spectral": spectral_suite, "gradient": gradient_suite}


def run_suites(names, quick: bool = False, seed: int = 0) -> list:
    if "all" in names:
        names = list(SUITES)
    out = []
    for name in names:
        for c in SUITES[name](quick=quick, seed=seed):
            out.append(dict(c, suite=name))
    return out
