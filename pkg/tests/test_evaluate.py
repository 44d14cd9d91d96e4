import math

import numpy as np
import pytest

import oracles
from localgcl.evaluate import (BOUND_SLACK, ProbeConfig, SpectralError, linear_probe, mf_loss, one_hot,
                               spectral_embeddings, theorem1_check)
from localgcl.graph import build_graph, normalized_adjacency, normalized_laplacian, random_split, sbm_generate
from localgcl.loss import LossConfig, local_gcl_loss, normalize_rows
from localgcl.verify import _connected_sbm, clique_graph, eckart_young_trial


def _two_triangles():
    return build_graph([(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)], 6, labels=[0, 0, 0, 1, 1, 1])


# --- spectral embeddings ----------------------------------------------------------

def test_two_cliques_span_component_indicators():
    g = _two_triangles()
    z = spectral_embeddings(g, 2)
    ind = np.stack([np.r_[np.ones(3), np.zeros(3)], np.r_[np.zeros(3), np.ones(3)]], axis=1)
    proj = z @ np.linalg.pinv(z) @ ind
    np.testing.assert_allclose(proj, ind, atol=1e-10)


def test_cycle_top_eigenvector():
    g = build_graph([(0, 1), (1, 2), (2, 3), (3, 0)], 4)
    z = spectral_embeddings(g, 1)
    # top eigenvalue 1, eigenvector D^{1/2} 1 / ||.|| = 1/2 per entry, sign fixed positive
    np.testing.assert_allclose(z[:, 0], 0.5, atol=1e-12)


def test_sign_convention_first_nonzero_positive():
    g = sbm_generate([8, 8], 0.6, 0.2, 3)
    z = spectral_embeddings(g, 4)
    for j in range(4):
        col = z[:, j]
        first = col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
        assert first > 0


def test_negative_eigenvalue_error():
    # star K_{1,3}: spectrum of A~ is {1, 0, 0, -1}; d = 4 reaches the negative one
    g = build_graph([(0, 1), (0, 2), (0, 3)], 4)
    with pytest.raises(SpectralError, match="#4"):
        spectral_embeddings(g, 4)
    spectral_embeddings(g, 3)


def test_spectral_d_range():
    g = _two_triangles()
    with pytest.raises(ValueError):
        spectral_embeddings(g, 0)
    with pytest.raises(ValueError):
        spectral_embeddings(g, 7)


# --- mf_loss ----------------------------------------------------------------------

def test_mf_loss_trivial(rng):
    a = rng.standard_normal((5, 5))
    assert mf_loss(a, np.zeros((5, 2))) == pytest.approx(np.sum(a * a))
    assert mf_loss(np.eye(4), np.eye(4)) == 0.0


def test_mf_loss_matches_loops(rng):
    a = rng.standard_normal((7, 7))
    f = rng.standard_normal((7, 3))
    assert mf_loss(a, f) == pytest.approx(oracles.mf_loss(a, f), abs=1e-10)


def test_eckart_young_on_sbm():
    rng = np.random.default_rng(0)
    for s in range(3):
        g = _connected_sbm([10, 10], 0.6, 0.1, s)
        for d in (1, 3, 6):
            best, rival = eckart_young_trial(g, d, 100, rng)
            assert best <= rival


def test_eckart_young_value_matches_tail_spectrum():
    # ||A~ - Z* Z*^T||^2 = sum of squared discarded eigenvalues (kept ones are nonnegative here)
    g = _connected_sbm([10, 10], 0.6, 0.1, 1)
    a = normalized_adjacency(g)
    vals = np.sort(np.linalg.eigvalsh(a))[::-1]
    d = 3
    assert mf_loss(a, spectral_embeddings(g, d)) == pytest.approx(np.sum(vals[d:] ** 2), abs=1e-10)


def _nonnegative_count(g):
    return int(np.sum(np.linalg.eigvalsh(normalized_adjacency(g)) >= -1e-9))


# --- readout bound ----------------------------------------------------------------

def test_bound_cliques_exact():
    g = clique_graph([4, 5, 6])
    r = theorem1_check(g, g.labels, 3)
    assert r.phi == 1.0 and r.bound_rhs == 0.0
    assert r.mse_lhs <= 1e-12 and r.holds


def test_bound_sbm_seeds():
    for s in range(10):
        g = _connected_sbm([50, 50], 0.2, 0.02, s)
        r = theorem1_check(g, g.labels, 8)
        assert r.holds, r
        assert r.bound_rhs == pytest.approx((1 - r.phi) / r.lambda_d_plus_1)


def test_bound_lambda_is_laplacian_eigenvalue():
    g = _connected_sbm([10, 10], 0.5, 0.1, 2)
    lap = np.sort(np.linalg.eigvalsh(normalized_laplacian(g)))
    for d in (1, 4, _nonnegative_count(g)):
        assert theorem1_check(g, g.labels, d).lambda_d_plus_1 == pytest.approx(lap[d], abs=1e-10)


def test_bound_d_equals_n_minus_one():
    # K_{3,4}: A~ spectrum {1, 0 x5, -1}; d = |V| - 1 = 6 keeps only nonnegative eigenvalues
    g = build_graph([(i, j) for i in range(3) for j in range(3, 7)], 7, labels=[0, 0, 0, 1, 1, 1, 1])
    r = theorem1_check(g, g.labels, 6)
    assert r.lambda_d_plus_1 == pytest.approx(2.0, abs=1e-10)
    assert r.phi == 0.0 and r.bound_rhs == pytest.approx(0.5)
    assert r.holds
    with pytest.raises(ValueError):
        theorem1_check(g, g.labels, 7)


def test_bound_infinite_when_lambda_zero():
    g = clique_graph([3, 3, 3])
    labels = np.array([0, 1, 0, 1, 0, 1, 0, 1, 0])
    r = theorem1_check(g, labels, 2)  # lambda_3 of three components is 0
    assert math.isinf(r.bound_rhs) and r.holds
    assert r.to_dict()["bound_rhs"] is None


def test_bound_monotone_in_d():
    g = _connected_sbm([12, 12], 0.5, 0.1, 4)
    rhs = [theorem1_check(g, g.labels, d).bound_rhs for d in range(1, _nonnegative_count(g) + 1)]
    assert len(rhs) >= 5
    assert all(a >= b - 1e-12 for a, b in zip(rhs, rhs[1:]))


def test_bound_holds_flag_uses_slack():
    g = _connected_sbm([10, 10], 0.5, 0.1, 5)
    r = theorem1_check(g, g.labels, 3)
    assert r.holds == (r.mse_lhs <= r.bound_rhs + BOUND_SLACK)


def test_weak_optimum_of_loss():
    # loss at row-normalized Z* is no worse than at 50 random unit matrices
    rng = np.random.default_rng(0)
    cfg = LossConfig(tau=0.5, negatives="exact")
    for s in range(3):
        g = _connected_sbm([10, 10], 0.6, 0.1, s)
        for d in (2, 4, 8):
            at_opt = local_gcl_loss(normalize_rows(spectral_embeddings(g, d))[0], g, cfg).total
            rivals = [local_gcl_loss(oracles.unit_rows(rng, 20, d), g, cfg).total for _ in range(50)]
            assert at_opt <= min(rivals)


# --- linear probe -----------------------------------------------------------------

def test_probe_separable_toy():
    rng = np.random.default_rng(0)
    z = np.r_[rng.normal([3, 0], 0.3, (50, 2)), rng.normal([-3, 0], 0.3, (50, 2))]
    y = np.r_[np.zeros(50, int), np.ones(50, int)]
    r = linear_probe(z, y, random_split(100, 0.2, 0.2, 1))
    assert r.test_acc == 1.0 and r.train_acc == 1.0


def test_probe_chance_level():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((500, 16))
    accs = [linear_probe(z, rng.integers(0, 5, 500), random_split(500, 0.1, 0.1, k)).test_acc for k in range(20)]
    assert abs(np.mean(accs) - 0.2) <= 0.05


def test_probe_ignores_heldout_labels():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((60, 4))
    y = rng.integers(0, 3, 60)
    split = random_split(60, 0.5, 0.2, 0)
    a = linear_probe(z, y, split)
    y2 = y.copy()
    y2[split["test"]] = (y2[split["test"]] + 1) % 3
    y2[split["val"]] = 0
    b = linear_probe(z, y2, split)
    np.testing.assert_array_equal(a.weights, b.weights)


def test_probe_deterministic():
    rng = np.random.default_rng(3)
    z, y = rng.standard_normal((40, 3)), rng.integers(0, 2, 40)
    s = random_split(40, 0.5, 0.2, 0)
    assert linear_probe(z, y, s).to_dict() == linear_probe(z, y, s).to_dict()


def test_probe_errors():
    z = np.zeros((10, 2))
    y = np.array([0, 1] * 5)
    with pytest.raises(ValueError, match="empty"):
        linear_probe(z, y, {"train": [], "val": [], "test": list(range(10))})
    with pytest.raises(ValueError, match="single class"):
        linear_probe(z, y, {"train": [0, 2, 4], "val": [], "test": [1]})
    with pytest.raises(ValueError, match="overlap"):
        linear_probe(z, y, {"train": [0, 1], "val": [1], "test": []})
    with pytest.raises(ValueError, match="outside"):
        linear_probe(z, y, {"train": [0, 1, 10]})
    with pytest.raises(ValueError):
        linear_probe(z, y[:5], {"train": [0, 1]})


def test_probe_accuracies_in_range():
    rng = np.random.default_rng(4)
    r = linear_probe(rng.standard_normal((30, 3)), rng.integers(0, 3, 30), random_split(30, 0.4, 0.3, 0),
                     ProbeConfig(epochs=20))
    assert all(0.0 <= v <= 1.0 for v in (r.train_acc, r.val_acc, r.test_acc)) and r.epochs == 20


def test_one_hot():
    np.testing.assert_array_equal(one_hot([1, 0, 2]), [[0, 1, 0], [1, 0, 0], [0, 0, 1]])
