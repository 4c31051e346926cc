"""Plug-in fusion and a numerical check of the fusion-error bound.

The bound machinery works on quadratic losses ``L(theta) = 0.5 * ||A theta - b||^2``
where every optimum is available in closed form. Proxy-side vectors are held
in the full parameter space, agreeing with ``theta0`` outside the proxy mask.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import seeding
from .compression import Correspondence
from .params import FlatParams, SubspaceMask

log = logging.getLogger(__name__)


class FusionError(ValueError):
    pass


class OracleInconsistency(ArithmeticError):
    pass


def plug_in_fuse(backbone: FlatParams, proxy: FlatParams, corr: Correspondence) -> FlatParams:
    """Overwrite the backbone dims the proxy maps onto; leave every other dim untouched."""
    if backbone.layout != corr.backbone_layout:
        raise FusionError("backbone layout does not match the correspondence")
    if proxy.layout != corr.proxy_layout:
        raise FusionError("proxy layout does not match the correspondence")
    out = backbone.values.copy()
    out[corr.index] = proxy.values
    return FlatParams(out, backbone.layout)


def fuse_masked(theta0: np.ndarray, phi_full: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, phi_full, theta0)


# ---------------------------------------------------------------------------
# quadratic oracle


@dataclass(frozen=True, eq=False)
class QuadraticLoss:
    A: np.ndarray
    b: np.ndarray

    def __call__(self, theta) -> float:
        r = self.A @ _vec(theta) - self.b
        return 0.5 * float(np.add.reduce(r * r))

    def grad(self, theta) -> np.ndarray:
        return self.A.T @ (self.A @ _vec(theta) - self.b)


def _vec(x) -> np.ndarray:
    return x.values if isinstance(x, FlatParams) else np.asarray(x, dtype=np.float64)


def _mask_array(mask) -> np.ndarray:
    return mask.keep if isinstance(mask, SubspaceMask) else np.asarray(mask, dtype=bool)


def _solve_normal(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    gram = A.T @ A
    atb = A.T @ rhs
    if gram.shape[0] == 0:
        return np.zeros(0)
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        log.warning("normal equations are singular; adding 1e-10 * I")
        gram = gram + 1e-10 * np.eye(gram.shape[0])
        if np.linalg.matrix_rank(gram) < gram.shape[0]:
            raise np.linalg.LinAlgError("normal equations rank deficient after regularization")
    return np.linalg.solve(gram, atb)


@dataclass(frozen=True)
class OracleResult:
    theta_opt: np.ndarray
    phi_opt_full: np.ndarray
    min_loss: float
    subspace_min_loss: float


def quadratic_oracle(A, b, mask, theta0) -> OracleResult:
    """Global and subspace-constrained minimizers of 0.5 * ||A theta - b||^2.

    The subspace problem frees only the masked dims; the rest stay at theta0.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    theta0 = _vec(theta0)
    keep = _mask_array(mask)
    loss = QuadraticLoss(A, b)
    theta_opt = _solve_normal(A, b)
    phi = theta0.copy()
    residual = b - A[:, ~keep] @ theta0[~keep]
    phi[keep] = _solve_normal(A[:, keep], residual)
    return OracleResult(theta_opt, phi, loss(theta_opt), loss(phi))


def fusion_error(loss_fn: Callable, theta_new, min_loss: float, tol: float = 1e-9) -> float:
    eps = loss_fn(theta_new) - min_loss
    if eps < -tol:
        raise OracleInconsistency(f"fused loss is below the claimed optimum by {-eps}")
    return eps


@dataclass(frozen=True)
class BoundInstance:
    A: np.ndarray
    b: np.ndarray
    mask: np.ndarray
    theta0: np.ndarray
    trained_phi: np.ndarray
    L_hat: float
    delta_sub: float
    eta_hat: float
    alpha: float
    theta_opt: np.ndarray
    phi_opt: np.ndarray
    region: tuple[np.ndarray, np.ndarray] = field(default=None)

    def __post_init__(self):
        off = ~self.mask
        if not np.array_equal(self.trained_phi[off], self.theta0[off]):
            raise FusionError("trained_phi must agree with theta0 outside the proxy mask")

    @property
    def loss(self) -> QuadraticLoss:
        return QuadraticLoss(self.A, self.b)


@dataclass(frozen=True)
class GapTerms:
    proxy_suboptimality: float
    compression_distortion: float
    subspace_approximation: float

    def __iter__(self):
        return iter((self.proxy_suboptimality, self.compression_distortion, self.subspace_approximation))

    @property
    def total(self) -> float:
        return self.proxy_suboptimality + self.compression_distortion + self.subspace_approximation


def gap_decomposition(instance: BoundInstance, theta_new) -> GapTerms:
    loss = instance.loss
    l_new = loss(theta_new)
    l_star = loss(instance.trained_phi)
    l_phi_opt = loss(instance.phi_opt)
    l_opt = loss(instance.theta_opt)
    return GapTerms(l_star - l_phi_opt, l_new - l_star, l_phi_opt - l_opt)


@dataclass(frozen=True)
class ComplementDistance:
    residual: float
    distance_sq: float
    complement_sq: float
    bound_side: float

    @property
    def bound_holds(self) -> bool:
        return self.distance_sq <= self.bound_side * (1 + 1e-12) + 1e-300


def complement_distance_check(theta_new, phi_star_full, mask, theta0) -> ComplementDistance:
    """Distance between fused and proxy vectors versus its complement-only form."""
    theta_new, phi, theta0 = _vec(theta_new), _vec(phi_star_full), _vec(theta0)
    off = ~_mask_array(mask)
    diff = theta_new - phi
    dist_sq = float(np.add.reduce(diff * diff))
    comp = theta0[off] - phi[off]
    comp_sq = float(np.add.reduce(comp * comp))
    bound = float(np.add.reduce(theta0[off] ** 2) + np.add.reduce(phi[off] ** 2))
    result = ComplementDistance(abs(dist_sq - comp_sq), dist_sq, comp_sq, 2.0 * bound)
    if not result.bound_holds:
        raise OracleInconsistency("parameter distance exceeds its complement bound")
    return result


def bounding_box(points: Sequence, inflate: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    pts = np.stack([_vec(p) for p in points])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = inflate * (hi - lo)
    return lo - pad, hi + pad


def lipschitz_estimate(
    grad_fn: Callable,
    region: tuple[np.ndarray, np.ndarray],
    n_probes: int,
    seed: int = 0,
) -> float:
    """Largest gradient norm seen at uniform probes inside an axis-aligned box."""
    if n_probes < 2:
        raise ValueError("n_probes must be >= 2")
    lo, hi = (np.asarray(r, dtype=np.float64) for r in region)
    rng = seeding.rng(seed, seeding.PROBE)
    probes = lo + (hi - lo) * rng.random((n_probes, lo.shape[0]))
    best = 0.0
    for p in probes:
        best = max(best, float(np.linalg.norm(grad_fn(p))))
    return best


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool
    slack: float
    terms: GapTerms
    rhs_terms: tuple[float, float, float]


def check_bound(instance: BoundInstance) -> BoundCheck:
    """Compare the measured fusion error with delta + L*eta*|theta0| + L*|theta0 - theta_opt|*alpha."""
    loss = instance.loss
    theta_new = fuse_masked(instance.theta0, instance.trained_phi, instance.mask)
    lhs = fusion_error(loss, theta_new, loss(instance.theta_opt))
    L = instance.L_hat
    rhs_terms = (
        instance.delta_sub,
        L * instance.eta_hat * float(np.linalg.norm(instance.theta0)),
        L * float(np.linalg.norm(instance.theta0 - instance.theta_opt)) * instance.alpha,
    )
    rhs = rhs_terms[0] + rhs_terms[1] + rhs_terms[2]
    return BoundCheck(lhs, rhs, lhs <= rhs + 1e-9, rhs - lhs, gap_decomposition(instance, theta_new), rhs_terms)


def build_instance(
    A,
    b,
    mask,
    theta0,
    trained_phi,
    *,
    eta_hat: float = 0.0,
    L_hat: Optional[float] = None,
    n_probes: int = 256,
    seed: int = 0,
) -> BoundInstance:
    """Measure every constant the bound needs and bundle them."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    keep = _mask_array(mask)
    theta0 = _vec(theta0).copy()
    trained_phi = _vec(trained_phi).copy()
    oracle = quadratic_oracle(A, b, keep, theta0)
    loss = QuadraticLoss(A, b)
    theta_new = fuse_masked(theta0, trained_phi, keep)
    region = bounding_box([theta0, oracle.theta_opt, theta_new])
    if L_hat is None:
        L_hat = lipschitz_estimate(loss.grad, region, n_probes, seed)
    delta = max(0.0, loss(trained_phi) - oracle.subspace_min_loss)
    alpha = float((~keep).sum()) / keep.shape[0]
    return BoundInstance(
        A, b, keep, theta0, trained_phi, L_hat, delta, eta_hat, alpha,
        oracle.theta_opt, oracle.phi_opt_full, region,
    )


def random_instance(
    dim: int,
    rows: int,
    mask_fraction: float,
    seed: int,
    index: int = 0,
    train_steps: int = 20,
    n_probes: int = 256,
) -> BoundInstance:
    """Random well-posed quadratic with a proxy trained by a few gradient steps on its subspace."""
    rng = seeding.rng(seed, seeding.INSTANCE, index)
    if rows < dim:
        raise ValueError("need rows >= dim for a positive-definite instance")
    A = rng.standard_normal((rows, dim)) / math.sqrt(rows)
    b = rng.standard_normal(rows)
    n_keep = min(dim, max(1, round(mask_fraction * dim)))
    keep = np.zeros(dim, dtype=bool)
    keep[rng.permutation(dim)[:n_keep]] = True
    theta0 = rng.standard_normal(dim)
    loss = QuadraticLoss(A, b)
    lr = 1.0 / np.linalg.eigvalsh(A.T @ A).max()
    phi = theta0.copy()
    for _ in range(train_steps):
        g = loss.grad(phi)
        phi[keep] -= lr * g[keep]
    return build_instance(A, b, keep, theta0, phi, n_probes=n_probes, seed=derive_probe_seed(seed, index))


def derive_probe_seed(seed: int, index: int) -> int:
    return seeding.derive_seed(seed, seeding.PROBE, index)


@dataclass(frozen=True)
class SweepRow:
    index: int
    lhs: float
    rhs: float
    T1: float
    T2: float
    T3: float
    L_hat: float
    alpha: float
    holds: bool

    FIELDS = ("index", "lhs", "rhs", "T1", "T2", "T3", "L_hat", "alpha", "holds")


def bound_sweep(
    dim: int = 8,
    rows: int = 16,
    mask_fraction: float = 0.5,
    count: int = 100,
    seed: int = 0,
    train_steps: int = 20,
) -> list[SweepRow]:
    rows_out = []
    for i in range(count):
        inst = random_instance(dim, rows, mask_fraction, seed, i, train_steps)
        res = check_bound(inst)
        t1, t2, t3 = res.terms
        rows_out.append(SweepRow(i, res.lhs, res.rhs, t1, t2, t3, inst.L_hat, inst.alpha, res.holds))
    return rows_out


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    lines = [",".join(SweepRow.FIELDS)]
    for r in rows:
        lines.append(
            f"{r.index},{r.lhs!r},{r.rhs!r},{r.T1!r},{r.T2!r},{r.T3!r},{r.L_hat!r},{r.alpha!r},{str(r.holds).lower()}"
        )
    return "\n".join(lines) + "\n"
