import numpy as np
import pytest

from conftest import central_diff, max_rel_err
from fedproxy.model import (
    CLASSIFICATION,
    REGRESSION,
    Batch,
    TaskSpec,
    TrainingDiverged,
    forward_with_trace,
    grad,
    init_model,
    local_sgd,
    make_scenario,
    model_layout,
    task_loss,
)
from fedproxy.params import DimensionError, FlatParams


def loss_at(model, batch, kind):
    return lambda v: task_loss(model.with_params(FlatParams(v, model.layout)), batch, kind)


class TestLayout:
    def test_block_then_head_order(self):
        lay = model_layout(2, 3, 1)
        assert lay.names == [
            "blocks.0.W1", "blocks.0.b1", "blocks.0.W2", "blocks.0.b2",
            "blocks.1.W1", "blocks.1.b1", "blocks.1.W2", "blocks.1.b2",
            "head.W", "head.b",
        ]
        assert lay.total_dim == 2 * (9 + 3 + 9 + 3) + 3 + 1

    def test_init_is_seeded(self):
        a = init_model(2, 4, 3, seed=5)
        b = init_model(2, 4, 3, seed=5)
        c = init_model(2, 4, 3, seed=6)
        assert a.params.equals(b.params)
        assert np.array_equal(a.embed, b.embed)
        assert not a.params.equals(c.params)

    @pytest.mark.parametrize("input_dim,width", [(3, 5), (5, 3), (4, 4)])
    def test_embedding_is_orthonormal(self, input_dim, width):
        E = init_model(1, width, input_dim).embed
        assert E.shape == (input_dim, width)
        small = min(input_dim, width)
        gram = E @ E.T if input_dim <= width else E.T @ E
        assert np.allclose(gram, np.eye(small), atol=1e-12)


class TestForward:
    def test_trace_length_and_residual(self, small_model, small_batch):
        out, trace = forward_with_trace(small_model, small_batch)
        assert len(trace) == small_model.n_blocks + 1
        for i in range(small_model.n_blocks):
            expect = trace[i] + small_model.block(i)(trace[i])
            assert np.allclose(trace[i + 1], expect, atol=0, rtol=0)
        assert out.shape == (6, 2)

    def test_wrong_input_width(self, small_model):
        with pytest.raises(DimensionError):
            forward_with_trace(small_model, np.zeros((2, 4)))

    def test_wrong_target_width(self, small_model, rng):
        with pytest.raises(DimensionError):
            task_loss(small_model, Batch(rng.standard_normal((3, 3)), np.zeros((3, 1))), REGRESSION)


class TestGradient:
    @pytest.mark.parametrize("kind", [REGRESSION, CLASSIFICATION])
    def test_matches_finite_differences(self, small_model, small_batch, kind):
        batch = small_batch
        if kind == CLASSIFICATION:
            batch = Batch(small_batch.inputs, (small_batch.targets > 0).astype(float))
        analytic = grad(small_model, batch, kind).values
        numeric = central_diff(loss_at(small_model, batch, kind), small_model.params.values)
        assert max_rel_err(analytic, numeric) < 1e-5

    def test_zero_block_linear_oracle(self, rng):
        model = init_model(0, 4, 4, seed=3)
        x = rng.standard_normal((10, 4))
        y = rng.standard_normal((10, 1))
        Z = x @ model.embed
        w, b = model.head_W, model.head_b
        d = (2.0 / 10) * (Z @ w + b - y)
        g = grad(model, Batch(x, y), REGRESSION)
        assert np.allclose(g.segment("head.W"), (Z.T @ d).reshape(-1), rtol=1e-13, atol=1e-15)
        assert np.allclose(g.segment("head.b"), d.sum(axis=0), rtol=1e-13, atol=1e-15)

    def test_exact_fit_has_zero_gradient(self, small_model, small_batch):
        out, _ = forward_with_trace(small_model, small_batch)
        g = grad(small_model, Batch(small_batch.inputs, out), REGRESSION)
        assert g.norm() < 1e-8


class TestLocalSGD:
    def test_convex_case_reaches_least_squares(self, rng):
        model = init_model(0, 3, 3, seed=1)
        x = rng.standard_normal((40, 3))
        y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3 + 0.1 * rng.standard_normal((40, 1))
        Z = np.hstack([x @ model.embed, np.ones((40, 1))])
        target = np.linalg.lstsq(Z, y, rcond=None)[0].reshape(-1)
        lr = 1.0 / np.linalg.eigvalsh((2.0 / 40) * Z.T @ Z).max()
        res = local_sgd(model, TaskSpec(), 3000, lr, data=Batch(x, y))
        assert np.max(np.abs(res.params.values - target)) < 1e-6

    def test_losses_recorded_before_each_step(self, small_model):
        task = TaskSpec(input_dim=3, out_dim=2, noise_sd=0.1)
        res = local_sgd(small_model, task, 5, 0.05, n_train=20)
        assert len(res.losses) == 5
        assert res.losses[0] == task_loss(small_model, task.train_data(20), REGRESSION)

    def test_extra_grad_is_added(self, small_model):
        task = TaskSpec(input_dim=3, out_dim=2)
        data = task.train_data(8)
        base = local_sgd(small_model, task, 1, 0.1, data=data)
        shifted = local_sgd(small_model, task, 1, 0.1, lambda p: p.replace(np.ones_like(p.values)), data=data)
        assert np.allclose(base.params.values - shifted.params.values, 0.1, atol=1e-15)

    def test_divergence_raises(self, small_model):
        task = TaskSpec(input_dim=3, out_dim=2)
        with pytest.raises(TrainingDiverged):
            local_sgd(small_model, task, 200, 1e6, n_train=16)

    def test_minibatches_deterministic(self, small_model):
        task = TaskSpec(input_dim=3, out_dim=2)
        a = local_sgd(small_model, task, 4, 0.05, batch_size=4, n_train=16, seed=9)
        b = local_sgd(small_model, task, 4, 0.05, batch_size=4, n_train=16, seed=9)
        assert a.params.equals(b.params)


class TestScenarios:
    def test_needs_two_clients(self):
        with pytest.raises(ValueError):
            make_scenario("heterogeneous", 1, 0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_scenario("chaotic", 3, 0)

    def test_homogeneous_shares_teacher(self):
        specs = make_scenario("homogeneous", 3, 0)
        assert len({s.teacher_seed for s in specs}) == 1
        assert [s.shard for s in specs] == [0, 1, 2]

    def test_heterogeneous_alternates_kind(self):
        specs = make_scenario("heterogeneous", 4, 0)
        assert [s.kind for s in specs] == [REGRESSION, CLASSIFICATION] * 2
        assert len({s.teacher_seed for s in specs}) == 4

    def test_conflicting_signs_and_groups(self):
        specs = make_scenario("conflicting", 8, 0)
        assert [s.teacher_sign for s in specs] == [1.0, -1.0] * 4
        batch = specs[1].train_data(5)
        inactive = [i for i in range(4) if i not in specs[1].active_inputs]
        assert np.all(batch.inputs[:, inactive] == 0)

    def test_classification_targets_binary(self):
        b = TaskSpec(kind=CLASSIFICATION, noise_sd=0.2).train_data(30)
        assert set(np.unique(b.targets)) <= {0.0, 1.0}

    def test_round_trip_dict(self):
        s = make_scenario("conflicting", 2, 4)[1]
        assert TaskSpec.from_dict(s.to_dict()) == s
