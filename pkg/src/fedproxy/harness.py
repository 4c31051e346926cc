"""End-to-end runs: compress, federate, fuse, evaluate, report."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, seeding
from .checkpoint import load_checkpoint, save_checkpoint
from .compression import (
    BlockInfluenceReport,
    Correspondence,
    PruneMask,
    block_influence,
    correspondence_from_params,
    correspondence_to_params,
    estimate_distortion,
    extract_proxy,
    select_mask,
)
from .config import RunConfig
from .fedopt import Client, FedState, MetricRow, client_accuracy, eval_loss, mean_eval_loss, run_round
from .fusion import plug_in_fuse
from .model import REGRESSION, ResidualStack, TaskSpec, init_model, local_sgd, make_scenario
from .params import FlatParams, ParamLayout

log = logging.getLogger(__name__)

EMBED_SEGMENT = "embed"


# ---------------------------------------------------------------------------
# model checkpoints: trainable vector followed by the frozen embedding


def model_to_params(model: ResidualStack) -> FlatParams:
    items = [(s.name, s.length) for s in model.layout.segments] + [(EMBED_SEGMENT, model.embed.size)]
    return FlatParams(np.concatenate([model.params.values, model.embed.reshape(-1)]), ParamLayout.from_lengths(items))


def model_from_params(p: FlatParams) -> ResidualStack:
    if EMBED_SEGMENT not in p.layout:
        raise ValueError("checkpoint has no embedding segment; not a model checkpoint")
    emb = p.layout[EMBED_SEGMENT]
    trainable = ParamLayout(tuple(s for s in p.layout.segments if s.name != EMBED_SEGMENT))
    if emb.offset != trainable.total_dim:
        raise ValueError("embedding segment must come last")
    out_dim = p.layout["head.b"].length
    width = p.layout["head.W"].length // out_dim
    embed = p.values[emb.slice].reshape(-1, width)
    return ResidualStack(embed, FlatParams(p.values[: trainable.total_dim], trainable))


def save_model(model: ResidualStack, path) -> Path:
    return save_checkpoint(model_to_params(model), path)


def load_model(path) -> ResidualStack:
    return model_from_params(load_checkpoint(path))


def save_correspondence(corr: Correspondence, path) -> Path:
    return save_checkpoint(correspondence_to_params(corr), path)


def load_correspondence(path) -> Correspondence:
    return correspondence_from_params(load_checkpoint(path))


# ---------------------------------------------------------------------------
# pipeline stages


def public_task(cfg: RunConfig) -> TaskSpec:
    b = cfg.backbone
    return TaskSpec(
        REGRESSION,
        teacher_seed=seeding.derive_seed(cfg.master_seed, seeding.PUBLIC, seeding.TEACHER),
        noise_sd=0.05,
        seed=seeding.derive_seed(cfg.master_seed, seeding.PUBLIC),
        input_dim=b.input_dim,
        out_dim=b.out_dim,
    )


def build_backbone(cfg: RunConfig) -> ResidualStack:
    """Random backbone pretrained on the public task (the stand-in for a pretrained LLM)."""
    b = cfg.backbone
    model = init_model(
        b.n_blocks, b.width, b.input_dim, b.out_dim,
        seed=seeding.derive_seed(cfg.master_seed, seeding.BACKBONE), block_scale=b.block_scale,
    )
    p = cfg.pretrain
    if p.steps == 0:
        return model
    res = local_sgd(
        model, public_task(cfg), p.steps, p.lr,
        n_train=p.n_samples, batch_size=p.batch_size,
        seed=seeding.derive_seed(cfg.master_seed, seeding.PRETRAIN),
    )
    return model.with_params(res.params)


def make_clients(cfg: RunConfig) -> list[Client]:
    s = cfg.scenario
    b = cfg.backbone
    tasks = make_scenario(
        s.kind, max(2, s.K), seeding.derive_seed(cfg.master_seed, seeding.CLIENT),
        b.input_dim, b.out_dim, s.noise_sd,
    )[: s.K]
    return [Client.from_task(k, t, cfg.client.n_train, cfg.client.n_eval) for k, t in enumerate(tasks)]


@dataclass(frozen=True, eq=False)
class Compressed:
    backbone: ResidualStack
    report: BlockInfluenceReport
    mask: PruneMask
    proxy: ResidualStack
    corr: Correspondence


def compress(cfg: RunConfig, backbone: Optional[ResidualStack] = None) -> Compressed:
    backbone = build_backbone(cfg) if backbone is None else backbone
    report = block_influence(backbone, public_task(cfg), cfg.bi_samples)
    mask = select_mask(report, cfg.kappa)
    proxy, corr = extract_proxy(backbone, mask)
    return Compressed(backbone, report, mask, proxy, corr)


@dataclass(frozen=True, eq=False)
class Federated:
    method: str
    state: FedState
    rows: list[MetricRow]


def federate(cfg: RunConfig, proxy: ResidualStack, clients: Sequence[Client]) -> Federated:
    state = FedState.initial(proxy)
    rows: list[MetricRow] = []
    for _ in range(cfg.rounds):
        state, metrics = run_round(state, clients, cfg.agg, cfg.client, cfg.master_seed)
        rows.extend(metrics.rows)
    return Federated(cfg.agg.method, state, rows)


@dataclass(frozen=True)
class EvalRow:
    client_id: int
    kind: str
    backbone_loss: float
    fused_loss: float
    proxy_loss: float
    fused_accuracy: Optional[float]

    FIELDS = ("client_id", "kind", "backbone_loss", "fused_loss", "proxy_loss", "fused_accuracy")


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    proxy_eval_loss: float
    fused_eval_loss: float
    delta_vs_fedproxy: float

    FIELDS = ("method", "proxy_eval_loss", "fused_eval_loss", "delta_vs_fedproxy")


@dataclass(eq=False)
class RunReport:
    config: RunConfig
    bi_scores: tuple[float, ...]
    retained_blocks: list[int]
    alpha: float
    distortion: float
    rounds: list[MetricRow]
    evals: list[EvalRow]
    comparison: list[ComparisonRow] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    # in-memory artifacts, not part of the emitted report
    backbone: Optional[ResidualStack] = field(default=None, repr=False)
    fused: Optional[ResidualStack] = field(default=None, repr=False)
    proxy: Optional[ResidualStack] = field(default=None, repr=False)
    corr: Optional[Correspondence] = field(default=None, repr=False)

    @property
    def mean_fused_loss(self) -> float:
        return math.fsum(e.fused_loss for e in self.evals) / len(self.evals)

    @property
    def mean_proxy_loss(self) -> float:
        return math.fsum(e.proxy_loss for e in self.evals) / len(self.evals)


def provenance(cfg: RunConfig) -> dict:
    return {"config_sha256": cfg.digest(), "fedproxy": __version__, "numpy": np.__version__}


def evaluate(backbone: ResidualStack, fused: ResidualStack, proxy: ResidualStack, clients) -> list[EvalRow]:
    return [
        EvalRow(
            c.client_id,
            c.task.kind,
            eval_loss(backbone, c),
            eval_loss(fused, c),
            eval_loss(proxy, c),
            client_accuracy(fused, c),
        )
        for c in clients
    ]


def run_pipeline(cfg: RunConfig) -> RunReport:
    comp = compress(cfg)
    clients = make_clients(cfg)
    fed = federate(cfg, comp.proxy, clients)
    fused = comp.backbone.with_params(plug_in_fuse(comp.backbone.params, fed.state.params, comp.corr))
    distortion = estimate_distortion(comp.backbone, fed.state.model, comp.corr, public_task(cfg), cfg.bi_samples)
    return RunReport(
        cfg,
        comp.report.scores,
        comp.mask.retained,
        comp.corr.alpha,
        distortion,
        fed.rows,
        evaluate(comp.backbone, fused, fed.state.model, clients),
        provenance=provenance(cfg),
        backbone=comp.backbone,
        fused=fused,
        proxy=fed.state.model,
        corr=comp.corr,
    )


def compare_methods(
    cfg: RunConfig, methods: Sequence[str], clients: Optional[Sequence[Client]] = None
) -> list[ComparisonRow]:
    """Run each method from one shared compressed proxy and client set."""
    if len(methods) < 2:
        raise ValueError("compare needs at least two methods")
    comp = compress(cfg)
    clients = make_clients(cfg) if clients is None else clients
    results = {}
    for m in methods:
        if m in results:
            continue
        fed = federate(cfg.with_method(m), comp.proxy, clients)
        fused = comp.backbone.with_params(plug_in_fuse(comp.backbone.params, fed.state.params, comp.corr))
        results[m] = (mean_eval_loss(fed.state.model, clients), mean_eval_loss(fused, clients))
    ref = results.get("fedproxy", results[methods[0]])[0]
    return [ComparisonRow(m, results[m][0], results[m][1], results[m][0] - ref) for m in methods]


# ---------------------------------------------------------------------------
# reporting


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv(fields: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(getattr(r, f)) for f in fields])
    return buf.getvalue()


def _md_table(fields: Sequence[str], rows) -> str:
    lines = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(getattr(r, f)) for f in fields) + " |")
    return "\n".join(lines)


def report_markdown(report: RunReport) -> str:
    cfg = report.config
    parts = [
        "# FedProxy run report",
        "",
        f"- method: `{cfg.agg.method}`",
        f"- scenario: {cfg.scenario.kind}, K={cfg.scenario.K}, rounds={cfg.rounds}",
        f"- kappa: {cfg.kappa!r}; retained blocks: {report.retained_blocks}; alpha: {report.alpha!r}",
        f"- distortion (eta_hat): {report.distortion!r}",
        f"- config sha256: `{report.provenance.get('config_sha256', '')}`",
        "",
        "## Block influence",
        "",
        "| block_index | bi_score |",
        "|---|---|",
        *[f"| {i} | {s!r} |" for i, s in enumerate(report.bi_scores)],
        "",
        "## Round metrics",
        "",
        _md_table(MetricRow.FIELDS, report.rounds),
        "",
        "## Final evaluation",
        "",
        _md_table(EvalRow.FIELDS, report.evals),
    ]
    if report.comparison:
        parts += ["", "## Method comparison", "", _md_table(ComparisonRow.FIELDS, report.comparison)]
    return "\n".join(parts) + "\n"


def emit_report(report: RunReport, out_dir, formats: Sequence[str] = ("csv", "markdown")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    written = []

    def put(name: str, text: str):
        path = out / name
        path.write_text(text)
        written.append(path)

    if "csv" in formats:
        put("metrics.csv", rows_to_csv(MetricRow.FIELDS, report.rounds))
        put("eval.csv", rows_to_csv(EvalRow.FIELDS, report.evals))
        put("bi.csv", "block_index,bi_score\n" + "".join(f"{i},{s!r}\n" for i, s in enumerate(report.bi_scores)))
        if report.comparison:
            put("comparison.csv", rows_to_csv(ComparisonRow.FIELDS, report.comparison))
    if "markdown" in formats:
        put("report.md", report_markdown(report))
    return written


def save_run_artifacts(report: RunReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if report.backbone is not None:
        paths.append(save_model(report.backbone, out / "backbone.fpxy"))
    if report.proxy is not None:
        paths.append(save_model(report.proxy, out / "proxy_final.fpxy"))
    if report.fused is not None:
        paths.append(save_model(report.fused, out / "fused.fpxy"))
    if report.corr is not None:
        paths.append(save_correspondence(report.corr, out / "correspondence.fpxy"))
    return paths
