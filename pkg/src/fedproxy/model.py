"""Toy residual block network, synthetic tasks, and local SGD.

The network maps inputs through a frozen embedding into a residual stream,
applies ``B`` blocks ``x <- x + W2 tanh(W1 x + b1) + b2`` and finishes with a
linear head. Only block and head weights live in the trainable flat vector;
the embedding is fixed at construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import seeding
from .params import DimensionError, FlatParams, ParamLayout

log = logging.getLogger(__name__)

REGRESSION = "regression"
CLASSIFICATION = "binary-classification"
TASK_KINDS = (REGRESSION, CLASSIFICATION)

BLOCK_KEYS = ("W1", "b1", "W2", "b2")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, detail: str = ""):
        self.step = step
        self.loss = loss
        msg = f"training diverged at step {step} (loss={loss})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def block_prefix(i: int) -> str:
    return f"blocks.{i}."


def model_layout(n_blocks: int, width: int, out_dim: int) -> ParamLayout:
    items = []
    for i in range(n_blocks):
        p = block_prefix(i)
        items += [(p + "W1", width * width), (p + "b1", width), (p + "W2", width * width), (p + "b2", width)]
    items += [("head.W", width * out_dim), ("head.b", out_dim)]
    return ParamLayout.from_lengths(items)


@dataclass(frozen=True, eq=False)
class BlockParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.W1.T + self.b1) @ self.W2.T + self.b2


@dataclass(frozen=True, eq=False)
class ResidualStack:
    """Residual network whose trainable weights are a single FlatParams.

    ``embed`` has shape (input_dim, width). Block ``W1``/``W2`` are
    (width, width) acting on row vectors as ``x @ W.T``; the head is
    (width, out_dim) acting as ``x @ W``.
    """

    embed: np.ndarray
    params: FlatParams
    n_blocks: int = field(init=False)
    width: int = field(init=False)
    out_dim: int = field(init=False)

    def __post_init__(self):
        embed = np.array(self.embed, dtype=np.float64, copy=True)
        embed.flags.writeable = False
        object.__setattr__(self, "embed", embed)
        layout = self.params.layout
        out_dim = layout["head.b"].length
        width = embed.shape[1]
        n_blocks = sum(1 for name in layout.names if name.endswith(".W1"))
        if layout != model_layout(n_blocks, width, out_dim):
            raise DimensionError("parameter layout does not match a residual stack of this width")
        object.__setattr__(self, "n_blocks", n_blocks)
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "out_dim", out_dim)

    @property
    def input_dim(self) -> int:
        return self.embed.shape[0]

    @property
    def layout(self) -> ParamLayout:
        return self.params.layout

    def block(self, i: int) -> BlockParams:
        p = block_prefix(i)
        w = self.width
        seg = self.params.segment
        return BlockParams(
            seg(p + "W1").reshape(w, w), seg(p + "b1"), seg(p + "W2").reshape(w, w), seg(p + "b2")
        )

    @property
    def head_W(self) -> np.ndarray:
        return self.params.segment("head.W").reshape(self.width, self.out_dim)

    @property
    def head_b(self) -> np.ndarray:
        return self.params.segment("head.b")

    def with_params(self, params: FlatParams) -> "ResidualStack":
        return ResidualStack(self.embed, params)

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return forward_with_trace(self, inputs)[0]


def make_embedding(input_dim: int, width: int, seed: int) -> np.ndarray:
    rng = seeding.rng(seed, seeding.EMBED)
    g = rng.standard_normal((max(input_dim, width), min(input_dim, width)))
    q, _ = np.linalg.qr(g)
    # orthonormal rows when input_dim <= width, orthonormal columns otherwise
    return q.T if input_dim <= width else q


def init_model(
    n_blocks: int,
    width: int,
    input_dim: int,
    out_dim: int = 1,
    seed: int = 0,
    block_scale: float = 0.5,
) -> ResidualStack:
    if n_blocks < 0 or width < 1 or input_dim < 1 or out_dim < 1:
        raise ValueError("model dimensions must be positive (n_blocks may be 0)")
    rng = seeding.rng(seed, seeding.BACKBONE)
    layout = model_layout(n_blocks, width, out_dim)
    values = np.empty(layout.total_dim)
    for seg in layout.segments:
        if seg.name.endswith(("W1", "W2")):
            values[seg.slice] = rng.standard_normal(seg.length) * (block_scale / math.sqrt(width))
        elif seg.name == "head.W":
            values[seg.slice] = rng.standard_normal(seg.length) / math.sqrt(width)
        else:
            values[seg.slice] = 0.1 * rng.standard_normal(seg.length)
    return ResidualStack(make_embedding(input_dim, width, seed), FlatParams(values, layout))


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.asarray(self.targets, dtype=np.float64)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
            raise DimensionError(f"batch has {x.shape[0]} inputs but {y.shape[0]} targets")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("batch contains non-finite values")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(self.inputs[idx], self.targets[idx])


@dataclass(frozen=True)
class TaskSpec:
    """A synthetic data source: a random teacher network plus a sampling rule.

    ``teacher_sign`` flips the teacher's output, ``shift`` offsets the input
    mean, and ``active_inputs`` (when set) zeroes every other input feature.
    ``shard`` selects an independent sample stream for the same teacher.
    """

    kind: str = REGRESSION
    teacher_seed: int = 0
    noise_sd: float = 0.0
    shift: float = 0.0
    seed: int = 0
    shard: int = 0
    input_dim: int = 4
    out_dim: int = 1
    teacher_hidden: int = 8
    teacher_sign: float = 1.0
    active_inputs: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.active_inputs is not None:
            object.__setattr__(self, "active_inputs", tuple(int(i) for i in self.active_inputs))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["active_inputs"] is not None:
            d["active_inputs"] = list(d["active_inputs"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)

    def teacher(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = seeding.rng(self.teacher_seed, seeding.TEACHER)
        u = rng.standard_normal((self.teacher_hidden, self.input_dim)) / math.sqrt(self.input_dim)
        v = rng.standard_normal((self.out_dim, self.teacher_hidden)) / math.sqrt(self.teacher_hidden)
        lin = rng.standard_normal((self.out_dim, self.input_dim)) / math.sqrt(self.input_dim)
        return u, v, lin

    def teacher_output(self, x: np.ndarray) -> np.ndarray:
        u, v, lin = self.teacher()
        return self.teacher_sign * (np.tanh(x @ u.T) @ v.T + x @ lin.T)

    def sample(self, n: int, stream: int = seeding.TRAIN_DATA) -> Batch:
        rng = seeding.rng(self.seed, stream, self.shard)
        x = rng.standard_normal((n, self.input_dim)) + self.shift
        if self.active_inputs is not None:
            keep = np.zeros(self.input_dim, dtype=bool)
            keep[list(self.active_inputs)] = True
            x[:, ~keep] = 0.0
        y = self.teacher_output(x)
        noise = self.noise_sd * rng.standard_normal(y.shape)
        if self.kind == REGRESSION:
            return Batch(x, y + noise)
        return Batch(x, (y + noise > 0).astype(np.float64))

    def train_data(self, n: int) -> Batch:
        return self.sample(n, seeding.TRAIN_DATA)

    def eval_data(self, n: int) -> Batch:
        return self.sample(n, seeding.EVAL)


def make_scenario(
    kind: str,
    K: int,
    seed: int,
    input_dim: int = 4,
    out_dim: int = 1,
    noise_sd: float = 0.05,
) -> list[TaskSpec]:
    """Client task specs for a federated scenario.

    ``homogeneous``: one regression teacher, K disjoint sample shards.
    ``heterogeneous``: K distinct teachers, alternating regression and
    classification, each with its own input shift.
    ``conflicting``: K regression clients; each works on its own slice of the
    input features and half of them see the shared teacher with flipped sign.
    """
    if K < 2:
        raise ValueError("a scenario needs at least K=2 clients")
    if kind == "homogeneous":
        teacher = seeding.derive_seed(seed, seeding.TEACHER)
        return [
            TaskSpec(REGRESSION, teacher, noise_sd, 0.0, seed, k, input_dim, out_dim)
            for k in range(K)
        ]
    if kind == "heterogeneous":
        specs = []
        for k in range(K):
            task_kind = REGRESSION if k % 2 == 0 else CLASSIFICATION
            teacher = seeding.derive_seed(seed, seeding.TEACHER, k)
            shift = float(seeding.rng(seed, seeding.CLIENT, k).uniform(-1.0, 1.0))
            specs.append(TaskSpec(task_kind, teacher, noise_sd, shift, seed, k, input_dim, out_dim))
        return specs
    if kind == "conflicting":
        teacher = seeding.derive_seed(seed, seeding.TEACHER)
        groups = np.array_split(np.arange(input_dim), min(K, input_dim))
        specs = []
        for k in range(K):
            active = tuple(int(i) for i in groups[k % len(groups)])
            sign = 1.0 if k % 2 == 0 else -1.0
            specs.append(
                TaskSpec(
                    REGRESSION, teacher, noise_sd, 0.0, seed, k, input_dim, out_dim,
                    teacher_sign=sign, active_inputs=active,
                )
            )
        return specs
    raise ValueError(f"unknown scenario kind {kind!r}")


# ---------------------------------------------------------------------------
# forward / loss / gradient


def _inputs(batch) -> np.ndarray:
    return batch.inputs if isinstance(batch, Batch) else np.atleast_2d(np.asarray(batch, dtype=np.float64))


def forward_with_trace(model: ResidualStack, batch) -> tuple[np.ndarray, list[np.ndarray]]:
    x = _inputs(batch)
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"inputs have {x.shape[1]} features, model expects {model.input_dim}")
    h = x @ model.embed
    trace = [h]
    for i in range(model.n_blocks):
        h = h + model.block(i)(h)
        trace.append(h)
    return h @ model.head_W + model.head_b, trace


def _check_targets(model: ResidualStack, batch: Batch, kind: str) -> None:
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    if batch.targets.shape[1] != model.out_dim:
        raise DimensionError(f"targets have {batch.targets.shape[1]} columns, model emits {model.out_dim}")


def loss_from_outputs(outputs: np.ndarray, targets: np.ndarray, kind: str) -> float:
    n = outputs.shape[0]
    if kind == REGRESSION:
        r = outputs - targets
        return float(np.add.reduce((r * r).reshape(-1)) / n)
    # mean over samples of summed per-output logistic loss
    per = np.logaddexp(0.0, outputs) - targets * outputs
    return float(np.add.reduce(per.reshape(-1)) / n)


def task_loss(model: ResidualStack, batch: Batch, kind: str) -> float:
    _check_targets(model, batch, kind)
    out, _ = forward_with_trace(model, batch)
    return loss_from_outputs(out, batch.targets, kind)


def accuracy(model: ResidualStack, batch: Batch) -> float:
    out, _ = forward_with_trace(model, batch)
    return float(np.mean((out > 0) == (batch.targets > 0.5)))


def loss_and_grad(model: ResidualStack, batch: Batch, kind: str) -> tuple[float, FlatParams]:
    """Task loss and its exact gradient with respect to the trainable vector."""
    loss, g = _loss_and_grad(model, batch, kind)
    return loss, FlatParams(g, model.layout)


def _loss_and_grad(model: ResidualStack, batch: Batch, kind: str) -> tuple[float, np.ndarray]:
    _check_targets(model, batch, kind)
    out, trace = forward_with_trace(model, batch)
    n = out.shape[0]
    y = batch.targets
    if kind == REGRESSION:
        d_out = (2.0 / n) * (out - y)
    else:
        d_out = (1.0 / n) * (0.5 * (1.0 + np.tanh(0.5 * out)) - y)
    loss = loss_from_outputs(out, y, kind)

    g = np.zeros(model.layout.total_dim)
    lay = model.layout
    g[lay["head.W"].slice] = (trace[-1].T @ d_out).reshape(-1)
    g[lay["head.b"].slice] = d_out.sum(axis=0)
    dh = d_out @ model.head_W.T
    for i in reversed(range(model.n_blocks)):
        blk = model.block(i)
        x = trace[i]
        act = np.tanh(x @ blk.W1.T + blk.b1)
        p = block_prefix(i)
        g[lay[p + "W2"].slice] = (dh.T @ act).reshape(-1)
        g[lay[p + "b2"].slice] = dh.sum(axis=0)
        d_pre = (dh @ blk.W2) * (1.0 - act * act)
        g[lay[p + "W1"].slice] = (d_pre.T @ x).reshape(-1)
        g[lay[p + "b1"].slice] = d_pre.sum(axis=0)
        dh = dh + d_pre @ blk.W1
    return loss, g


def grad(model: ResidualStack, batch: Batch, kind: str) -> FlatParams:
    return loss_and_grad(model, batch, kind)[1]


# ---------------------------------------------------------------------------
# training

ExtraGrad = Callable[[FlatParams], FlatParams]


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: FlatParams
    losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def local_sgd(
    model: ResidualStack,
    task: TaskSpec,
    steps: int,
    lr: float,
    extra_grad: Optional[ExtraGrad] = None,
    *,
    data: Optional[Batch] = None,
    n_train: int = 64,
    batch_size: Optional[int] = None,
    seed: int = 0,
) -> TrainResult:
    """Plain SGD on the task loss (plus an optional regularizer gradient).

    ``losses[s]`` is the minibatch task loss evaluated before step ``s``.
    Minibatches are drawn without replacement per step from ``data`` (or
    ``task.train_data(n_train)``) using a generator keyed by ``seed``.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if data is None:
        data = task.train_data(n_train)
    rng = seeding.rng(seed, seeding.BATCH)
    full = batch_size is None or batch_size >= data.n
    values = model.params.values.copy()
    layout = model.layout
    losses: list[float] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            current = model.with_params(FlatParams(values, layout))
            batch = data if full else data.take(rng.choice(data.n, size=batch_size, replace=False))
            loss, update = _loss_and_grad(current, batch, task.kind)
            if not math.isfinite(loss) or not np.all(np.isfinite(update)):
                raise TrainingDiverged(step, loss)
            losses.append(loss)
            if extra_grad is not None:
                update = update + extra_grad(current.params).values
            values = values - lr * update
            if not np.all(np.isfinite(values)):
                raise TrainingDiverged(step, loss, "parameters became non-finite")
    return TrainResult(FlatParams(values, layout), losses)
