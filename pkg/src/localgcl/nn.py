"""Dense GCN/MLP encoder with hand-written backward pass, Adam, and the training loop."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .graph import Graph, IsolatedNodeError
from .kernel import make_feature_map
from .loss import LossConfig, local_gcl_loss, normalize_backward, normalize_rows


class NonFiniteError(FloatingPointError):
    pass


def gcn_propagation_matrix(g: Graph) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2} with degrees counted after adding self-loops."""
    return gcn_propagation_sparse(g).toarray()


def gcn_propagation_sparse(g: Graph) -> sp.csr_matrix:
    a = g.adjacency() + sp.identity(g.num_nodes, format="csr")
    s = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
    return sp.csr_matrix(sp.diags(s) @ a @ sp.diags(s))


def glorot_init(shape, seed) -> np.ndarray:
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return np.random.default_rng(seed).uniform(-bound, bound, size=shape)


@dataclass
class EncoderParams:
    kind: str
    weights: list
    biases: list

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list:
        return [*self.weights, *self.biases]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.kind, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def shapes(self) -> list:
        return [list(a.shape) for a in self.arrays()]


def init_encoder(in_dim: int, dim: int, layers: int = 2, kind: str = "gcn", seed: int = 0,
                 hidden_dim: Optional[int] = None) -> EncoderParams:
    if kind not in ("gcn", "mlp"):
        raise ValueError(f"encoder kind must be 'gcn' or 'mlp', got {kind!r}")
    if layers not in (1, 2, 3):
        raise ValueError("layers must be 1, 2 or 3")
    hidden = dim if hidden_dim is None else hidden_dim
    dims = [in_dim] + [hidden] * (layers - 1) + [dim]
    seeds = np.random.SeedSequence(seed).spawn(layers)
    weights = [glorot_init((dims[k], dims[k + 1]), seeds[k]) for k in range(layers)]
    biases = [np.zeros(dims[k + 1]) for k in range(layers)]
    return EncoderParams(kind, weights, biases)


@dataclass
class ForwardCache:
    inputs: list  # layer inputs H_k
    pre: list  # pre-activation outputs of every layer
    norms: np.ndarray
    prop: object = None


def encoder_forward(params: EncoderParams, x, prop=None):
    """Returns (pre-normalization output, unit-row embeddings, cache).

    ``prop`` is the GCN propagation matrix (dense or sparse); ignored for MLPs.
    ReLU between layers, none after the last one.
    """
    h = np.asarray(x)
    if params.kind == "gcn" and prop is None:
        raise ValueError("GCN forward needs a propagation matrix")
    if params.kind == "gcn" and prop.shape[0] != h.shape[0]:
        raise ValueError(f"propagation matrix is {prop.shape} but X has {h.shape[0]} rows")
    inputs, pre = [], []
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        if h.shape[1] != w.shape[0]:
            raise ValueError(f"layer {k}: input width {h.shape[1]} != weight rows {w.shape[0]}")
        inputs.append(h)
        out = h @ w
        if params.kind == "gcn":
            out = prop @ out
        out = out + b
        pre.append(out)
        h = np.maximum(out, 0.0) if k < params.num_layers - 1 else out
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("encoder produced non-finite activations")
    z, norms = normalize_rows(h)
    return h, z, ForwardCache(inputs, pre, norms, prop)


def encoder_backward(params: EncoderParams, cache: ForwardCache, grad_out):
    """Parameter gradients given dL/d(pre-normalization output)."""
    if len(cache.pre) != params.num_layers:
        raise ValueError("cache does not match these parameters")
    g = np.asarray(grad_out)
    gw = [None] * params.num_layers
    gb = [None] * params.num_layers
    for k in reversed(range(params.num_layers)):
        if k < params.num_layers - 1:
            g = g * (cache.pre[k] > 0)
        gb[k] = g.sum(axis=0)
        # symmetric propagation: P^T = P
        gp = cache.prop @ g if params.kind == "gcn" else g
        gw[k] = cache.inputs[k].T @ gp
        if k > 0:
            g = gp @ params.weights[k].T
    return EncoderParams(params.kind, gw, gb)


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list, grads: list) -> AdamState:
    """In-place Adam update with bias correction and decoupled weight decay.

    Non-finite gradients abort the step before anything is modified.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


@dataclass
class TrainConfig:
    steps: int = 50
    lr: float = 5e-4
    wd: float = 0.0
    dim: int = 64
    proj_dim: int = 2048
    tau: float = 0.5
    layers: int = 2
    encoder: str = "gcn"
    negatives: str = "approx"
    approx: str = "sorf"
    variant: str = "mean"
    seed: int = 0
    resample_features: bool = False
    dtype: str = "float64"

    def validate(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0 or self.wd < 0:
            raise ValueError("need lr > 0 and wd >= 0")
        if self.dim < 1 or self.proj_dim < 1:
            raise ValueError("dim and proj_dim must be >= 1")
        if self.approx not in ("sorf", "rff"):
            raise ValueError("approx must be 'sorf' or 'rff'")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        if self.encoder not in ("gcn", "mlp"):
            raise ValueError("encoder must be 'gcn' or 'mlp'")
        if self.layers not in (1, 2, 3):
            raise ValueError("layers must be 1, 2 or 3")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, variant=self.variant, negatives=self.negatives)


@dataclass
class TrainResult:
    params: EncoderParams
    embeddings: np.ndarray
    loss_trace: list
    clamped: list
    seconds: float


def _features(g: Graph, x):
    if x is not None:
        return np.asarray(x, dtype=np.float64)
    if g.features is not None:
        return g.features
    return np.eye(g.num_nodes)


def train(g: Graph, x=None, cfg: Optional[TrainConfig] = None) -> TrainResult:
    """Full-graph self-supervised training.

    ``loss_trace[k]`` is the loss after k optimizer steps, so the trace has
    ``steps + 1`` entries. Features default to ``g.features`` and then to
    one-hot node ids.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    iso = g.isolated_nodes()
    if len(iso):
        raise IsolatedNodeError(iso)
    dtype = np.dtype(cfg.dtype)
    x = _features(g, x).astype(dtype)
    prop = None
    if cfg.encoder == "gcn":
        prop = gcn_propagation_sparse(g).astype(dtype) if g.num_nodes > 5000 else gcn_propagation_matrix(g).astype(dtype)
    params = init_encoder(x.shape[1], cfg.dim, cfg.layers, cfg.encoder, cfg.seed)
    params = EncoderParams(params.kind, [w.astype(dtype) for w in params.weights],
                           [b.astype(dtype) for b in params.biases])
    loss_cfg = cfg.loss_config()

    def feature_map(step):
        if cfg.negatives != "approx":
            return None
        key = [cfg.seed, 1, step] if cfg.resample_features else [cfg.seed, 1]
        return make_feature_map(cfg.approx, cfg.dim, cfg.proj_dim, cfg.tau,
                                seed=np.random.SeedSequence(key))

    fmap = feature_map(0)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.wd)
    trace, clamped = [], []
    t0 = time.perf_counter()
    for step in range(cfg.steps + 1):
        h, z, cache = encoder_forward(params, x, prop)
        last = step == cfg.steps
        val = local_gcl_loss(z, g, loss_cfg, fmap, grad=not last)
        if not math.isfinite(val.total):
            raise NonFiniteError(f"loss diverged at step {step}; trace so far: {trace}")
        trace.append(val.total)
        clamped.append(val.clamped)
        if last:
            break
        grad_h = normalize_backward(z, cache.norms, val.gradient).astype(dtype)
        grads = encoder_backward(params, cache, grad_h)
        adam_step(opt, params.arrays(), grads.arrays())
        if cfg.resample_features:
            fmap = feature_map(step + 1)
    return TrainResult(params.copy(), z.copy(), trace, clamped, time.perf_counter() - t0)


# --- checkpoints: <u64 header length><JSON header><little-endian f64 blob> ----------

def save_checkpoint(path, params: EncoderParams, config: Optional[dict] = None, seed: Optional[int] = None):
    header = {
        "format": "localgcl-checkpoint",
        "version": 1,
        "kind": params.kind,
        "num_layers": params.num_layers,
        "shapes": params.shapes(),
        "config": config or {},
        "seed": seed,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    Path(path).write_bytes(struct.pack("<Q", len(head)) + head + blob)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    flat = np.frombuffer(raw[8 + n:], dtype="<f8")
    arrays, pos = [], 0
    for shape in header["shapes"]:
        size = int(np.prod(shape))
        arrays.append(flat[pos:pos + size].reshape(shape).astype(np.float64))
        pos += size
    if pos != flat.size:
        raise ValueError("checkpoint blob size does not match header shapes")
    k = header["num_layers"]
    return EncoderParams(header["kind"], arrays[:k], arrays[k:]), header


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
