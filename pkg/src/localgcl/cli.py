"""Command-line entry point: ``localgcl <command> [options]``.

Commands print one JSON metrics record to stdout (and to ``--out`` when
given). Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import resource
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .evaluate import ProbeConfig, linear_probe
from .graph import (GraphError, homophily_ratio, load_dataset, random_split, save_dataset, sbm_features,
                    sbm_generate, with_features)
from .kernel import make_feature_map
from .loss import LossConfig, negative_loss_exact, negative_loss_approx, normalize_rows
from .nn import NonFiniteError, TrainConfig, save_checkpoint, train
from .verify import SUITES, run_suites

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


def _record(command: str, config: dict, **fields) -> dict:
    rec = {"schema_version": SCHEMA_VERSION, "tool_version": __version__, "command": command,
           "config": config}
    rec.update(fields)
    rec["peak_memory_mb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    return rec


def _emit(rec: dict, out) -> None:
    text = json.dumps(rec, indent=2, sort_keys=True, default=_json_default)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


@contextlib.contextmanager
def _compute_context(strict: bool):
    """Cap BLAS threads: LOCALGCL_THREADS if set, one thread in strict mode."""
    env = os.environ.get("LOCALGCL_THREADS")
    limit = 1 if strict else (int(env) if env else None)
    if env and strict:
        limit = 1
    if limit is None:
        yield
    else:
        with threadpool_limits(limits=limit):
            yield


def _parse_sbm(spec: str):
    """'100,100:0.1:0.01' -> ([100, 100], 0.1, 0.01)"""
    try:
        blocks, p_in, p_out = spec.split(":")
        return [int(b) for b in blocks.split(",")], float(p_in), float(p_out)
    except ValueError as exc:
        raise UsageError(f"bad --sbm spec {spec!r}; expected SIZES:P_IN:P_OUT like 100,100:0.1:0.01") from exc


def _load_graph(args):
    if args.dataset:
        ds = load_dataset(args.dataset, drop_isolated=getattr(args, "drop_isolated", False))
        return ds.graph, ds.split
    blocks, p_in, p_out = _parse_sbm(args.sbm)
    g = sbm_generate(blocks, p_in, p_out, args.seed)
    return with_features(g, sbm_features(g, "identity")), None


# --- commands -----------------------------------------------------------------------

def cmd_gen_sbm(args) -> int:
    g = sbm_generate(args.blocks, args.p_in, args.p_out, args.seed)
    g = with_features(g, sbm_features(g, args.features, args.feature_dim, args.seed))
    split = random_split(g.num_nodes, args.train_frac, args.val_frac, args.seed)
    meta = {"generator": {"kind": "sbm", "blocks": args.blocks, "p_in": args.p_in, "p_out": args.p_out,
                          "seed": args.seed, "features": args.features}}
    if g.num_edges:
        meta["homophily"] = homophily_ratio(g)
    save_dataset(args.out, g, split, meta)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out", "command")}
    _emit(_record("gen-sbm", config, num_nodes=g.num_nodes, num_edges=g.num_edges,
                  homophily=meta.get("homophily"), isolated_nodes=int(len(g.isolated_nodes()))), None)
    return 0


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(steps=args.steps, lr=args.lr, wd=args.wd, dim=args.dim, proj_dim=args.proj_dim,
                      tau=args.tau, layers=args.layers, encoder=args.encoder, negatives=args.negatives,
                      approx=args.approx, variant=args.positive, seed=args.seed,
                      resample_features=args.resample_features)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if bool(args.dataset) == bool(args.sbm):
        raise UsageError("give exactly one of --dataset or --sbm")
    t0 = time.perf_counter()
    g, split = _load_graph(args)
    t_load = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(g, None, cfg)
    config = dict(asdict(cfg), dataset=args.dataset, sbm=args.sbm, strict=args.strict)
    save_checkpoint(out / "checkpoint.bin", res.params, config, cfg.seed)
    res.embeddings.astype("<f4").tofile(out / "embeddings.bin")
    probe = None
    if args.probe:
        if g.labels is None:
            raise UsageError("--probe needs node labels")
        split = split or random_split(g.num_nodes, 0.1, 0.1, cfg.seed)
        probe = linear_probe(res.embeddings, g.labels, split).to_dict()
    rec = _record("train", config, loss_trace=res.loss_trace, clamped=res.clamped,
                  embeddings_shape=list(res.embeddings.shape), probe=probe,
                  timings={"load_s": t_load, "train_s": res.seconds})
    _emit(rec, out / "metrics.json")
    return 0


def cmd_probe(args) -> int:
    ds = load_dataset(args.dataset)
    g = ds.graph
    if g.labels is None:
        raise UsageError("dataset has no labels.csv")
    flat = np.fromfile(args.embeddings, dtype="<f4").astype(np.float64)
    if flat.size % g.num_nodes:
        raise UsageError(f"embeddings hold {flat.size} values, not a multiple of {g.num_nodes} nodes")
    z = flat.reshape(g.num_nodes, -1)
    split = ds.split if (ds.split is not None and not args.random_split) else \
        random_split(g.num_nodes, args.train_frac, args.val_frac, args.split_seed)
    t0 = time.perf_counter()
    try:
        res = linear_probe(z, g.labels, split, ProbeConfig(args.lr, args.wd, args.epochs))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out", "command")}
    _emit(_record("probe", config, probe=res.to_dict(), timings={"probe_s": time.perf_counter() - t0}),
          args.out)
    return 0


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    checks = run_suites(args.suite, quick=args.quick, seed=args.seed)
    failed = [c["name"] for c in checks if not c["pass"]]
    for c in checks:
        status = "PASS" if c["pass"] else "FAIL"
        print(f"[{status}] {c['suite']}/{c['name']} ({c['anchor']}): measured={c['measured']} "
              f"expected={c['expected']}", file=sys.stderr)
    config = {"suite": args.suite, "quick": args.quick, "seed": args.seed}
    rec = _record("verify", config, checks=checks, passed={c["name"]: c["pass"] for c in checks},
                  failed=failed, timings={"verify_s": time.perf_counter() - t0})
    _emit(rec, args.out)
    return 1 if failed else 0


def loglog_slope(sizes, seconds):
    if len(sizes) < 2:
        return None
    return float(np.polyfit(np.log(sizes), np.log(seconds), 1)[0])


def _time(fn, repeats: int) -> float:
    fn()  # warm-up
    ts = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return float(np.median(ts))


def run_bench(sizes, dim: int, proj_dim: int, tau: float, seed: int = 0, repeats: int = 5,
              approx: str = "sorf", paths=("exact", "approx")) -> dict:
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes):
        raise UsageError("--sizes must be ascending")
    cfg = LossConfig(tau=tau, negatives="approx")
    fmap = make_feature_map(approx, dim, proj_dim, tau, seed)
    rows = []
    for n in sizes:
        z, _ = normalize_rows(np.random.default_rng([seed, n]).standard_normal((n, dim)))
        row = {"num_nodes": n}
        if "exact" in paths:
            row["exact_s"] = _time(lambda: negative_loss_exact(z, cfg), repeats)
        if "approx" in paths:
            row["approx_s"] = _time(lambda: negative_loss_approx(z, fmap, cfg), repeats)
        rows.append(row)
    slopes = {p: loglog_slope(sizes, [r[f"{p}_s"] for r in rows]) if rows and f"{p}_s" in rows[0] else None
              for p in ("exact", "approx")}
    return {"rows": rows, "slopes": slopes}


def cmd_bench(args) -> int:
    res = run_bench(args.sizes, args.dim, args.proj_dim, args.tau, args.seed, args.repeats, args.approx)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out", "command")}
    _emit(_record("bench", config, timings=res["rows"], slopes=res["slopes"]), args.out)
    return 0


def cmd_homophily(args) -> int:
    g = load_dataset(args.dataset).graph
    if g.labels is None:
        raise UsageError("dataset has no labels.csv")
    _emit(_record("homophily", {"dataset": args.dataset}, homophily=homophily_ratio(g),
                  num_nodes=g.num_nodes, num_edges=g.num_edges), args.out)
    return 0


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="localgcl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-sbm", help="write a stochastic block model dataset")
    s.add_argument("--blocks", type=int, nargs="+", required=True)
    s.add_argument("--p-in", type=float, required=True)
    s.add_argument("--p-out", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--features", choices=("identity", "gaussian", "none"), default="identity")
    s.add_argument("--feature-dim", type=int, default=32)
    s.add_argument("--train-frac", type=float, default=0.1)
    s.add_argument("--val-frac", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_sbm)

    s = sub.add_parser("train", help="train an encoder without labels")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--sbm", help="SIZES:P_IN:P_OUT, e.g. 200,200:0.1:0.01")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--lr", type=float, default=5e-4)
    s.add_argument("--wd", type=float, default=0.0)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--proj-dim", type=int, default=2048)
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--encoder", choices=("gcn", "mlp"), default="gcn")
    s.add_argument("--negatives", choices=("exact", "approx", "exclude_neighbors"), default="approx")
    s.add_argument("--approx", choices=("sorf", "rff"), default="sorf")
    s.add_argument("--positive", choices=("mean", "max", "weight"), default="mean")
    s.add_argument("--resample-features", action="store_true")
    s.add_argument("--drop-isolated", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--strict", action="store_true")
    s.add_argument("--probe", action="store_true", help="run a linear probe after training")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("probe", help="linear probe on frozen embeddings")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--random-split", action="store_true", help="ignore split.json")
    s.add_argument("--train-frac", type=float, default=0.1)
    s.add_argument("--val-frac", type=float, default=0.1)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--wd", type=float, default=1e-4)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--out")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("verify", help="run self-check suites")
    s.add_argument("--suite", nargs="+", choices=(*SUITES, "all"), default=["all"])
    s.add_argument("--quick", action="store_true", help="fewer Monte Carlo trials")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", help="time exact vs approximate negative loss")
    s.add_argument("--sizes", type=int, nargs="+", default=[1000, 2000, 4000, 8000])
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--proj-dim", type=int, default=2048)
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--approx", choices=("sorf", "rff"), default="sorf")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("homophily", help="edge homophily of a labeled dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_homophily)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _compute_context(getattr(args, "strict", False)):
            return args.func(args)
    except UsageError as exc:
        print(f"localgcl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (GraphError, NonFiniteError, ValueError, OSError) as exc:
        print(f"localgcl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
