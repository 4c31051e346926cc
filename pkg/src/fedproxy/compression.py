"""Block-influence scoring, depth pruning, and proxy extraction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import seeding
from .model import BLOCK_KEYS, ResidualStack, TaskSpec, block_prefix, forward_with_trace, model_layout
from .params import FlatParams, ParamLayout, SubspaceMask

log = logging.getLogger(__name__)


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class BlockInfluenceReport:
    scores: tuple[float, ...]
    samples_used: int
    dataset_id: str

    def to_csv(self) -> str:
        lines = ["block_index,bi_score"]
        lines += [f"{i},{s!r}" for i, s in enumerate(self.scores)]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PruneMask:
    keep_block: tuple[bool, ...]
    kappa: float

    @property
    def retained(self) -> list[int]:
        return [i for i, k in enumerate(self.keep_block) if k]


def _row_cosines(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    denom = na * nb
    zero = denom == 0.0
    cos = np.ones(a.shape[0])
    cos[~zero] = np.einsum("ij,ij->i", a[~zero], b[~zero]) / denom[~zero]
    return np.clip(cos, -1.0, 1.0), int(zero.sum())


def block_influence_from_trace(trace: Sequence[np.ndarray]) -> list[float]:
    """Score each block as 1 minus the mean cosine between its input and output rows."""
    scores = []
    for i in range(len(trace) - 1):
        cos, n_zero = _row_cosines(trace[i], trace[i + 1])
        if n_zero:
            log.info("block %d: %d zero hidden-state rows counted as cosine 1", i, n_zero)
        # left-to-right accumulation over samples
        mean = math.fsum(cos.tolist()) / cos.shape[0]
        scores.append(min(2.0, max(0.0, 1.0 - mean)))
    return scores


def block_influence(
    model: ResidualStack, public_task: TaskSpec, n_samples: int, seed: int = 0
) -> BlockInfluenceReport:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    data = public_task.sample(n_samples, seeding.PUBLIC)
    _, trace = forward_with_trace(model, data)
    dataset_id = f"{public_task.kind}:teacher={public_task.teacher_seed}:seed={public_task.seed}"
    return BlockInfluenceReport(tuple(block_influence_from_trace(trace)), n_samples, dataset_id)


def retained_count(n_blocks: int, kappa: float) -> int:
    # tolerance absorbs products like (1 - 0.7) * 10 = 3.0000000000000004
    return math.ceil((1.0 - kappa) * n_blocks - 1e-9)


def select_mask(report: BlockInfluenceReport | Sequence[float], kappa: float) -> PruneMask:
    """Keep the ceil((1-kappa)*B) highest-influence blocks; ties favour lower indices."""
    scores = list(report.scores if isinstance(report, BlockInfluenceReport) else report)
    if not 0.0 <= kappa < 1.0:
        raise MaskError(f"kappa must lie in [0, 1), got {kappa}")
    n_keep = retained_count(len(scores), kappa)
    if n_keep < 1:
        raise MaskError(f"kappa={kappa} retains no blocks out of {len(scores)}")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = set(order[:n_keep])
    return PruneMask(tuple(i in keep for i in range(len(scores))), kappa)


@dataclass(frozen=True, eq=False)
class Correspondence:
    """Where every proxy parameter lives inside the backbone vector.

    ``pairs`` lists (proxy_segment, backbone_segment); ``index[j]`` is the
    backbone dimension holding proxy dimension ``j``.
    """

    pairs: tuple[tuple[str, str], ...]
    proxy_layout: ParamLayout
    backbone_layout: ParamLayout

    @property
    def index(self) -> np.ndarray:
        parts = []
        for p_name, b_name in self.pairs:
            p_seg = self.proxy_layout[p_name]
            b_seg = self.backbone_layout[b_name]
            if p_seg.length != b_seg.length:
                raise MaskError(f"segment length mismatch {p_name} -> {b_name}")
            parts.append(np.arange(b_seg.offset, b_seg.stop, dtype=np.int64))
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    @property
    def mask(self) -> SubspaceMask:
        return SubspaceMask.from_indices(self.backbone_layout, self.index)

    @property
    def alpha(self) -> float:
        return 1.0 - self.proxy_layout.total_dim / self.backbone_layout.total_dim

    def validate(self) -> None:
        idx = self.index
        if [p for p, _ in self.pairs] != self.proxy_layout.names:
            raise MaskError("correspondence must cover every proxy segment in order")
        if idx.shape[0] != self.proxy_layout.total_dim or len(np.unique(idx)) != idx.shape[0]:
            raise MaskError("correspondence is not an injective map of proxy dimensions")


def extract_proxy(model: ResidualStack, mask: PruneMask) -> tuple[ResidualStack, Correspondence]:
    if len(mask.keep_block) != model.n_blocks:
        raise MaskError(f"mask covers {len(mask.keep_block)} blocks, model has {model.n_blocks}")
    kept = mask.retained
    if not kept:
        raise MaskError("mask retains no blocks")
    layout = model_layout(len(kept), model.width, model.out_dim)
    pairs = []
    for j, i in enumerate(kept):
        pairs += [(block_prefix(j) + k, block_prefix(i) + k) for k in BLOCK_KEYS]
    pairs += [("head.W", "head.W"), ("head.b", "head.b")]
    corr = Correspondence(tuple(pairs), layout, model.layout)
    values = model.params.values[corr.index]
    return ResidualStack(model.embed, FlatParams(values, layout)), corr


def retained_subnetwork(backbone: ResidualStack, corr: Correspondence) -> ResidualStack:
    """The backbone's retained blocks and head with the backbone's own weights."""
    return ResidualStack(backbone.embed, FlatParams(backbone.params.values[corr.index], corr.proxy_layout))


def estimate_distortion(
    backbone: ResidualStack,
    proxy: ResidualStack,
    corr: Correspondence,
    task: TaskSpec,
    n_samples: int,
) -> float:
    """Worst-case relative output gap between the proxy and the backbone sub-network."""
    data = task.sample(n_samples, seeding.EVAL)
    full = backbone(data.inputs)
    sub = retained_subnetwork(backbone, corr)(data.inputs)
    mine = proxy(data.inputs)
    num = np.linalg.norm(mine - sub, axis=1)
    den = np.maximum(np.linalg.norm(full, axis=1), 1e-12)
    return float(np.max(num / den))


# ---------------------------------------------------------------------------
# correspondence file: same envelope as checkpoints. Each proxy segment is
# stored under the name "<proxy>=<backbone>" with the backbone index of every
# proxy dim as its values; a trailing one-value segment records the backbone
# layout size so the mask can be rebuilt.

_BACKBONE_TAG = "#backbone"


def correspondence_to_params(corr: Correspondence) -> FlatParams:
    items = [(f"{p}={b}", corr.proxy_layout[p].length) for p, b in corr.pairs]
    items += [(f"{_BACKBONE_TAG}.{s.name}", 1) for s in corr.backbone_layout.segments]
    layout = ParamLayout.from_lengths(items)
    lengths = np.array([s.length for s in corr.backbone_layout.segments], dtype=np.float64)
    return FlatParams(np.concatenate([corr.index.astype(np.float64), lengths]), layout)


def correspondence_from_params(p: FlatParams) -> Correspondence:
    pairs, proxy_items, backbone_items = [], [], []
    for seg in p.layout.segments:
        if seg.name.startswith(_BACKBONE_TAG + "."):
            backbone_items.append((seg.name[len(_BACKBONE_TAG) + 1 :], int(p.values[seg.offset])))
        else:
            proxy_name, _, backbone_name = seg.name.partition("=")
            if not backbone_name:
                raise MaskError(f"malformed correspondence segment {seg.name!r}")
            pairs.append((proxy_name, backbone_name))
            proxy_items.append((proxy_name, seg.length))
    corr = Correspondence(
        tuple(pairs), ParamLayout.from_lengths(proxy_items), ParamLayout.from_lengths(backbone_items)
    )
    n = corr.proxy_layout.total_dim
    if not np.array_equal(corr.index.astype(np.float64), p.values[:n]):
        raise MaskError("correspondence index table disagrees with segment pairs")
    corr.validate()
    return corr
