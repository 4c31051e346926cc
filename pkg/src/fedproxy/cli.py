"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .compression import MaskError
from .config import ConfigError, load_config
from .fedopt import (
    AggConfig,
    MetricRow,
    RoundFailed,
    analyze_round,
    fedavg_merge,
    hties_merge,
    hties_sparsify,
    retention_rates,
    ties_merge_baseline,
)
from .fusion import FusionError, bound_sweep, plug_in_fuse, sweep_csv
from .harness import (
    EMBED_SEGMENT,
    ComparisonRow,
    compare_methods,
    compress,
    emit_report,
    load_correspondence,
    load_model,
    make_clients,
    federate,
    model_from_params,
    model_to_params,
    rows_to_csv,
    run_pipeline,
    save_correspondence,
    save_model,
    save_run_artifacts,
)
from .model import TrainingDiverged
from .params import FlatParams, TaskVector

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_compress(args) -> int:
    cfg = load_config(args.config)
    backbone = load_model(args.backbone) if args.backbone else None
    comp = compress(cfg, backbone)
    out = _out_dir(args, cfg)
    save_model(comp.backbone, out / "backbone.fpxy")
    save_model(comp.proxy, out / "proxy.fpxy")
    save_correspondence(comp.corr, out / "correspondence.fpxy")
    (out / "bi.csv").write_text(comp.report.to_csv())
    print(f"retained blocks {comp.mask.retained}; alpha={comp.corr.alpha:.4f}; wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.method:
        cfg = cfg.with_method(args.method)
    proxy = load_model(args.proxy) if args.proxy else compress(cfg).proxy
    fed = federate(cfg, proxy, make_clients(cfg))
    out = _out_dir(args, cfg)
    (out / "metrics.csv").write_text(rows_to_csv(MetricRow.FIELDS, fed.rows))
    save_model(fed.state.model, out / "proxy_final.fpxy")
    g = fed.rows[-1]
    print(f"{cfg.agg.method}: {cfg.rounds} rounds, final global eval loss {g.eval_loss:.6f}; wrote {out}")
    return EXIT_OK


def _trainable(p: FlatParams) -> FlatParams:
    if EMBED_SEGMENT not in p.layout:
        return p
    return model_from_params(p).params


def cmd_merge(args) -> int:
    start_ckpt = load_checkpoint(args.global_ckpt)
    start = _trainable(start_ckpt)
    clients = [_trainable(load_checkpoint(c)) for c in args.clients]
    K = len(clients)
    task_vectors = [TaskVector(c - start, k, 0) for k, c in enumerate(clients)]
    agg = AggConfig(rho=args.rho, delta_adapt=args.delta_adapt, r0=args.r0, ties_density=args.density)
    if args.method == "fedavg":
        new = fedavg_merge(clients, np.full(K, 1.0 / K))
    elif args.method == "ties":
        new = start + ties_merge_baseline(task_vectors, agg.ties_density, agg.ties_lam)
    else:
        analysis = analyze_round(task_vectors, start)
        r = retention_rates(analysis.h_norm, agg.r0, agg.delta_adapt)
        sparse = [hties_sparsify(tv, rk) for tv, rk in zip(task_vectors, r)]
        new = start + hties_merge(sparse, analysis.w, agg.rho, agg.eps)
        if args.analysis:
            lines = ["client_id,h_k,h_norm,w_k,retention"]
            lines += [
                f"{k},{analysis.h[k]!r},{analysis.h_norm[k]!r},{analysis.w[k]!r},{r[k]!r}" for k in range(K)
            ]
            Path(args.analysis).write_text("\n".join(lines) + "\n")
    if EMBED_SEGMENT in start_ckpt.layout:
        out_params = model_to_params(model_from_params(start_ckpt).with_params(new))
    else:
        out_params = new
    save_checkpoint(out_params, args.out)
    print(f"merged {K} clients with {args.method}; wrote {args.out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    backbone = load_model(args.backbone)
    proxy = load_model(args.proxy)
    corr = load_correspondence(args.corr)
    fused = backbone.with_params(plug_in_fuse(backbone.params, proxy.params, corr))
    save_model(fused, args.out)
    changed = int(np.count_nonzero(fused.params.values != backbone.params.values))
    print(f"fused {corr.proxy_layout.total_dim} proxy dims ({changed} changed); wrote {args.out}")
    return EXIT_OK


def cmd_verify_bound(args) -> int:
    rows = bound_sweep(args.dim, args.rows, args.mask_fraction, args.count, args.seed, args.train_steps)
    text = sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    failed = sum(not r.holds for r in rows)
    print(f"bound holds on {len(rows) - failed}/{len(rows)} instances", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    rows = compare_methods(cfg, args.methods)
    text = rows_to_csv(ComparisonRow.FIELDS, rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = load_config(args.config)
    report = run_pipeline(cfg)
    if args.compare:
        report.comparison = compare_methods(cfg, args.compare)
    out = _out_dir(args, cfg)
    emit_report(report, out)
    save_run_artifacts(report, out)
    print(f"mean fused eval loss {report.mean_fused_loss:.6f}; wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedproxy", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="score blocks, prune, and write proxy + correspondence")
    p.add_argument("--config")
    p.add_argument("--backbone", help="backbone checkpoint (default: build and pretrain from config)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("train", help="run federated rounds on the proxy")
    p.add_argument("--config")
    p.add_argument("--proxy", help="proxy checkpoint (default: compress from config)")
    p.add_argument("--method")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="merge client checkpoints into a new global")
    p.add_argument("--global", dest="global_ckpt", required=True)
    p.add_argument("--clients", nargs="+", required=True)
    p.add_argument("--method", choices=("hties", "fedavg", "ties"), default="hties")
    p.add_argument("--rho", type=float, default=1.1)
    p.add_argument("--r0", type=float, default=1.0)
    p.add_argument("--delta-adapt", type=float, default=0.2)
    p.add_argument("--density", type=float, default=0.2)
    p.add_argument("--analysis", help="write per-client h/w/retention CSV here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("fuse", help="plug trained proxy weights into the backbone")
    p.add_argument("--backbone", required=True)
    p.add_argument("--proxy", required=True)
    p.add_argument("--corr", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("verify-bound", help="check the fusion-error bound on random quadratics")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--rows", type=int, default=16)
    p.add_argument("--mask-fraction", type=float, default=0.5)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-steps", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_bound)

    p = sub.add_parser("compare", help="compare aggregation methods from one compressed start")
    p.add_argument("--config")
    p.add_argument("--methods", nargs="+", default=["fedproxy", "fedavg", "fedproxy_no_pcr", "fedproxy_no_hties"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="full pipeline with CSV + markdown report and checkpoints")
    p.add_argument("--config")
    p.add_argument("--compare", nargs="*", help="also compare these methods")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, RoundFailed) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointFormatError, OSError, FusionError, MaskError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
