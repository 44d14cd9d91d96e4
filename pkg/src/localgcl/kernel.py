"""Gaussian kernel and its random-feature approximations.

Both maps realize psi(x) = [cos(u), sin(u)] / sqrt(D) with u a linear
projection of x, so that psi(x)^T psi(y) = mean_i cos(u_i(x) - u_i(y)) is an
unbiased estimate of exp(-||x - y||^2 / (2 tau)) when the projection rows are
N(0, I / tau).

* ``RffMap``  -- dense Gaussian projection, O(d D) per vector.
* ``SorfMap`` -- blocks of sqrt(d_pad / tau) H D1 H D2 H D3, applied with
  three fast Walsh-Hadamard transforms, O(D log d) per vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def trial_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for work item ``index`` under a master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws from PCG64 uniforms via the Box-Muller transform."""
    size = int(np.prod(shape))
    half = (size + 1) // 2
    u1 = rng.random(half)
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 lies in (0, 1]
    theta = 2.0 * math.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:size]
    return z.reshape(shape)


def gaussian_kernel(x, y, tau: float) -> float:
    """exp(-||x - y||^2 / (2 tau))"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    diff = x - y
    return float(np.exp(-(diff @ diff) / (2.0 * tau)))


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


def fwht(v, normalized: bool = True) -> np.ndarray:
    """Walsh-Hadamard transform along the last axis (Sylvester ordering).

    The input is not modified. Leading axes are treated as a batch.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"length {n} is not a power of two")
    batch = v.shape[:-1]
    # transform axis first so every butterfly touches contiguous slabs
    x = np.moveaxis(v, -1, 0).reshape(n, -1).copy()
    x = _fwht_axis0(x)
    if normalized:
        x *= 1.0 / math.sqrt(n)
    return np.moveaxis(x.reshape(n, *batch), 0, -1)


def _fwht_axis0(x: np.ndarray) -> np.ndarray:
    """Unnormalized transform along axis 0 of a C-contiguous 2-d array.

    Overwrites ``x``; the result is returned and may live in a second buffer.
    """
    n = x.shape[0]
    buf = np.empty_like(x)
    h = 1
    while h < n:
        src = x.reshape(n // (2 * h), 2, h, -1)
        dst = buf.reshape(src.shape)
        np.add(src[:, 0], src[:, 1], out=dst[:, 0])
        np.subtract(src[:, 0], src[:, 1], out=dst[:, 1])
        x, buf = buf, x
        h *= 2
    return x


def hadamard_matrix(n: int, normalized: bool = True) -> np.ndarray:
    """Explicit Sylvester Hadamard matrix."""
    if not is_power_of_two(n):
        raise ValueError(f"order {n} is not a power of two")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / math.sqrt(n) if normalized else h


_CHUNK_ROWS = 256


class _FourierMap:
    """cos/sin feature lift shared by the dense and structured maps.

    Subclasses provide ``linear`` (rows of X -> projections U, shape n x D)
    and its transpose ``linear_t``.
    """

    input_dim: int
    num_features: int
    tau: float

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dimension {self.input_dim}, got {x.shape[-1]}")
        return x

    def lift(self, x):
        """(psi(X), U) where U are the linear projections."""
        u = self.linear(self._check(x))
        psi = np.concatenate([np.cos(u), np.sin(u)], axis=-1) / math.sqrt(self.num_features)
        return psi, u

    def project(self, x) -> np.ndarray:
        """psi of one vector (shape 2D) or of every row of a matrix (n x 2D)."""
        x = self._check(x)
        if x.ndim != 2 or len(x) <= _CHUNK_ROWS:
            return self.lift(x)[0]
        # row chunks keep the projection temporaries cache-sized
        psi = np.empty((len(x), 2 * self.num_features))
        for lo in range(0, len(x), _CHUNK_ROWS):
            psi[lo:lo + _CHUNK_ROWS] = self.lift(x[lo:lo + _CHUNK_ROWS])[0]
        return psi

    def project_backward(self, x, grad_psi, psi=None) -> np.ndarray:
        """Pull a gradient w.r.t. psi(X) back to a gradient w.r.t. X.

        Passing the forward ``psi`` skips recomputing the projection.
        """
        if psi is None:
            psi = self.project(x)
        grad_psi = np.asarray(grad_psi, dtype=np.float64)
        if psi.ndim != 2 or len(psi) <= _CHUNK_ROWS:
            return self._backward_rows(psi, grad_psi)
        out = np.empty((len(psi), self.input_dim))
        for lo in range(0, len(psi), _CHUNK_ROWS):
            sl = slice(lo, lo + _CHUNK_ROWS)
            out[sl] = self._backward_rows(psi[sl], grad_psi[sl])
        return out

    def _backward_rows(self, psi, grad_psi):
        D = self.num_features
        # d cos(u)/du = -sin(u), d sin(u)/du = cos(u); psi already carries 1/sqrt(D)
        grad_u = psi[..., :D] * grad_psi[..., D:] - psi[..., D:] * grad_psi[..., :D]
        return self.linear_t(grad_u)

    def kernel(self, x, y) -> float:
        return float(self.project(x) @ self.project(y))


@dataclass(frozen=True, eq=False)
class RffMap(_FourierMap):
    weights: np.ndarray  # input_dim x num_features, columns are frequencies
    input_dim: int
    num_features: int
    tau: float
    seed: int

    def linear(self, x):
        return x @ self.weights

    def linear_t(self, grad_u):
        return grad_u @ self.weights.T


def rff_sample(input_dim: int, num_features: int, tau: float, seed: int = 0) -> RffMap:
    """Dense random Fourier features with frequencies ~ N(0, I / tau)."""
    if num_features < 1 or input_dim < 1:
        raise ValueError("input_dim and num_features must be >= 1")
    if tau <= 0:
        raise ValueError("tau must be positive")
    rng = np.random.default_rng(seed)
    w = box_muller(rng, (input_dim, num_features)) / math.sqrt(tau)
    w.flags.writeable = False
    return RffMap(w, int(input_dim), int(num_features), float(tau), seed)


@dataclass(frozen=True, eq=False)
class SorfMap(_FourierMap):
    signs: np.ndarray  # block_count x 3 x d_pad, entries +-1; [:,0]=D1, [:,1]=D2, [:,2]=D3
    d_pad: int
    input_dim: int
    num_features: int
    tau: float
    seed: int

    @property
    def block_count(self) -> int:
        return self.signs.shape[0]

    @property
    def scale(self) -> float:
        return math.sqrt(self.d_pad / self.tau)

    @property
    def _raw_scale(self) -> float:
        return self.scale / self.d_pad ** 1.5

    def _pad(self, x):
        extra = self.d_pad - self.input_dim
        if extra == 0:
            return x
        pad = [(0, 0)] * (x.ndim - 1) + [(0, extra)]
        return np.pad(x, pad)

    def linear(self, x):
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        rows = x.reshape(-1, self.input_dim)
        m = rows.shape[0]
        B, d = self.block_count, self.d_pad
        # layout (d_pad, B, m): D3, H, D2, H, D1, H applied down axis 0
        y = np.zeros((d, B, m))
        y[:self.input_dim] = rows.T[:, None, :]
        y *= self.signs[:, 2, :].T[:, :, None]
        y = _fwht_axis0(y.reshape(d, -1)).reshape(d, B, m)
        y *= self.signs[:, 1, :].T[:, :, None]
        y = _fwht_axis0(y.reshape(d, -1)).reshape(d, B, m)
        y *= self.signs[:, 0, :].T[:, :, None]
        y = _fwht_axis0(y.reshape(d, -1)).reshape(d, B, m)
        y *= self._raw_scale  # normalization of the three transforms folded in
        u = y.transpose(2, 1, 0).reshape(m, B * d)[:, :self.num_features]
        return u.reshape(*lead, self.num_features)

    def linear_t(self, grad_u):
        grad_u = np.asarray(grad_u, dtype=np.float64)
        lead = grad_u.shape[:-1]
        rows = grad_u.reshape(-1, self.num_features)
        m = rows.shape[0]
        B, d = self.block_count, self.d_pad
        full = np.zeros((m, B * d))
        full[:, :self.num_features] = rows
        y = np.ascontiguousarray(full.reshape(m, B, d).transpose(2, 1, 0))
        # H is symmetric: transpose is D3 H D2 H D1 H
        y = _fwht_axis0(y.reshape(d, -1)).reshape(d, B, m)
        y *= self.signs[:, 0, :].T[:, :, None]
        y = _fwht_axis0(y.reshape(d, -1)).reshape(d, B, m)
        y *= self.signs[:, 1, :].T[:, :, None]
        y = _fwht_axis0(y.reshape(d, -1)).reshape(d, B, m)
        y *= self.signs[:, 2, :].T[:, :, None]
        out = y.sum(axis=1)[:self.input_dim].T * self._raw_scale
        return out.reshape(*lead, self.input_dim)

    def block_matrix(self, b: int) -> np.ndarray:
        """Implied d_pad x d_pad matrix of block ``b``, recovered from the fast path."""
        xs = np.eye(self.d_pad)
        sub = SorfMap(self.signs[b:b + 1], self.d_pad, self.d_pad, self.d_pad, self.tau, self.seed)
        return sub.linear(xs).T


def sorf_build(input_dim: int, num_features: int, tau: float, seed: int = 0) -> SorfMap:
    """Structured orthogonal features; inputs are zero padded to a power of two."""
    if num_features < 1 or input_dim < 1:
        raise ValueError("input_dim and num_features must be >= 1")
    if tau <= 0:
        raise ValueError("tau must be positive")
    d_pad = next_power_of_two(input_dim)
    blocks = -(-num_features // d_pad)
    rng = np.random.default_rng(seed)
    signs = np.where(rng.random((blocks, 3, d_pad)) < 0.5, -1.0, 1.0)
    signs.flags.writeable = False
    return SorfMap(signs, d_pad, int(input_dim), int(num_features), float(tau), seed)


def make_feature_map(kind: str, input_dim: int, num_features: int, tau: float, seed: int = 0):
    if kind == "sorf":
        return sorf_build(input_dim, num_features, tau, seed)
    if kind == "rff":
        return rff_sample(input_dim, num_features, tau, seed)
    raise ValueError(f"unknown feature map {kind!r} (expected 'rff' or 'sorf')")


# --- statistical checkers -------------------------------------------------------

def rff_variance(z: float, num_features: int) -> float:
    """Variance of the RFF kernel estimate at scaled distance z = ||x - y|| / sqrt(tau)."""
    if num_features < 1:
        raise ValueError("num_features must be >= 1")
    return (1.0 - math.exp(-z * z)) ** 2 / (2.0 * num_features)


def theorem2_bound(tau: float, num_features: int, epsilon: float) -> float:
    """Chebyshev deviation radius (1 - exp(-4/tau)) / sqrt(2 D eps)."""
    return (1.0 - math.exp(-4.0 / tau)) / math.sqrt(2.0 * num_features * epsilon)


def random_unit(rng, dim: int, count: int = 1) -> np.ndarray:
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def unit_pair_at_distance(dist: float, dim: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors with ||x - y|| = dist (requires 0 <= dist <= 2)."""
    if not 0.0 <= dist <= 2.0:
        raise ValueError("unit vectors are at most distance 2 apart")
    q, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    e1, e2 = q[:, 0], q[:, 1]
    cos_t = 1.0 - dist * dist / 2.0
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    return e1, cos_t * e1 + sin_t * e2


def rff_estimates(x, y, tau: float, num_features: int, trials: int, seed: int = 0) -> np.ndarray:
    """psi(x)^T psi(y) under ``trials`` independently seeded RFF maps."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xy = np.stack([x, y])
    out = np.empty(trials)
    for t in range(trials):
        m = rff_sample(len(x), num_features, tau, seed=np.random.SeedSequence(entropy=seed, spawn_key=(t,)))
        p = m.project(xy)
        out[t] = p[0] @ p[1]
    return out


def unbiasedness_check(pairs: int = 20, maps: int = 200, num_features: int = 1024,
                       tau: float = 1.0, dim: int = 8, seed: int = 0, n_se: float = 3.0) -> dict:
    """Mean estimate over fresh maps sits within ``n_se`` standard errors of the kernel."""
    rng = np.random.default_rng(seed)
    rows = []
    for p in range(pairs):
        x, y = random_unit(rng, dim, 2)
        est = rff_estimates(x, y, tau, num_features, maps, seed=seed * 100003 + p)
        exact = gaussian_kernel(x, y, tau)
        se = est.std(ddof=1) / math.sqrt(maps)
        rows.append({"exact": exact, "mean": float(est.mean()), "se": float(se),
                     "z_score": float((est.mean() - exact) / se)})
    worst = max(abs(r["z_score"]) for r in rows)
    return {"tau": tau, "num_features": num_features, "maps": maps, "pairs": rows,
            "max_abs_z": worst, "pass": bool(worst <= n_se)}


def variance_check(z: float, num_features: int, trials: int = 20000, dim: int = 8,
                   seed: int = 0, rel_tol: float = 0.15) -> dict:
    """Empirical variance of the RFF estimate vs. (1 - e^{-z^2})^2 / (2D), tau = 1."""
    rng = np.random.default_rng(seed)
    x, y = unit_pair_at_distance(z, dim, rng)
    est = rff_estimates(x, y, 1.0, num_features, trials, seed=seed)
    predicted = rff_variance(z, num_features)
    measured = float(est.var(ddof=1))
    rel = abs(measured - predicted) / predicted
    return {"z": z, "num_features": num_features, "trials": trials, "predicted": predicted,
            "measured": measured, "relative_error": rel, "pass": bool(rel <= rel_tol)}


def theorem2_check(tau: float, num_features: int, epsilon: float, trials: int = 10000,
                   dim: int = 4, seed: int = 0) -> dict:
    """Fraction of (pair, map) draws whose deviation exceeds the Chebyshev radius.

    Every trial draws its own unit pair and its own RFF map from a sub-seed of
    (seed, trial), so results do not depend on evaluation order.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if trials < 1000:
        raise ValueError("trials must be >= 1000")
    bound = theorem2_bound(tau, num_features, epsilon)
    dev = np.empty(trials)
    for t in range(trials):
        rng = trial_rng(seed, t)
        xy = random_unit(rng, dim, 2)
        m = rff_sample(dim, num_features, tau, seed=np.random.SeedSequence(entropy=seed, spawn_key=(t, 1)))
        p = m.project(xy)
        dev[t] = abs(p[0] @ p[1] - gaussian_kernel(xy[0], xy[1], tau))
    rate = float(np.mean(dev >= bound))
    return {"tau": tau, "num_features": num_features, "epsilon": epsilon, "trials": trials,
            "bound": bound, "violation_rate": rate, "mean_abs_error": float(dev.mean()),
            "pass": bool(rate <= epsilon)}
