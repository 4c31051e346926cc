import numpy as np
import pytest

from fedproxy.compression import (
    BlockInfluenceReport,
    MaskError,
    block_influence,
    block_influence_from_trace,
    correspondence_from_params,
    correspondence_to_params,
    estimate_distortion,
    extract_proxy,
    retained_count,
    retained_subnetwork,
    select_mask,
)
from fedproxy.fusion import FusionError, plug_in_fuse
from fedproxy import seeding
from fedproxy.model import TaskSpec, forward_with_trace
from fedproxy.params import FlatParams


def zero_block(model, i):
    v = model.params.values.copy()
    for key in ("W2", "b2"):
        v[model.layout[f"blocks.{i}.{key}"].slice] = 0.0
    return model.with_params(FlatParams(v, model.layout))


@pytest.fixture
def task():
    return TaskSpec(input_dim=3, out_dim=2, noise_sd=0.1)


class TestBlockInfluence:
    def test_matches_brute_force(self, small_model, task):
        rep = block_influence(small_model, task, 20)
        _, trace = forward_with_trace(small_model, task.sample(20, seeding.PUBLIC))
        for i, score in enumerate(rep.scores):
            total = 0.0
            for a, b in zip(trace[i], trace[i + 1]):
                total += float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
            assert abs(score - (1.0 - total / 20)) < 1e-12

    def test_scores_in_range(self, small_model, task):
        assert all(0.0 <= s <= 2.0 for s in block_influence(small_model, task, 50).scores)

    def test_reversal_scores_two(self, rng):
        x = rng.standard_normal((7, 4))
        assert block_influence_from_trace([x, -x]) == [2.0]

    def test_zero_rows_count_as_identity(self):
        assert block_influence_from_trace([np.zeros((3, 2)), np.zeros((3, 2))]) == [0.0]

    def test_zero_residual_block_scores_zero_and_is_pruned_first(self, small_model, task):
        model = zero_block(small_model, 1)
        rep = block_influence(model, task, 30)
        assert rep.scores[1] == 0.0
        assert select_mask(rep, 0.34).retained == [0, 2]

    def test_csv(self):
        text = BlockInfluenceReport((0.5, 0.25), 10, "x").to_csv()
        assert text == "block_index,bi_score\n0,0.5\n1,0.25\n"


class TestMask:
    @pytest.mark.parametrize("B,kappa,n", [(10, 0.7, 3), (6, 0.5, 3), (5, 0.5, 3), (4, 0.0, 4), (3, 0.9, 1)])
    def test_retained_count(self, B, kappa, n):
        assert retained_count(B, kappa) == n

    def test_ties_favour_lower_index(self):
        assert select_mask([0.3, 0.3, 0.3, 0.3], 0.5).retained == [0, 1]

    def test_keeps_highest(self):
        assert select_mask([0.1, 0.9, 0.5, 0.2], 0.5).retained == [1, 2]

    @pytest.mark.parametrize("kappa", [-0.1, 1.0])
    def test_kappa_range(self, kappa):
        with pytest.raises(MaskError):
            select_mask([0.1, 0.2], kappa)


class TestExtractFuse:
    @pytest.fixture
    def pair(self, small_model):
        mask = select_mask([0.5, 0.1, 0.9], 0.34)
        return (small_model, *extract_proxy(small_model, mask))

    def test_proxy_shape(self, pair):
        _, proxy, corr = pair
        assert proxy.n_blocks == 2
        corr.validate()
        assert 0.0 < corr.alpha < 1.0

    def test_round_trip_is_bitwise_identity(self, pair):
        model, proxy, corr = pair
        assert plug_in_fuse(model.params, proxy.params, corr).equals(model.params)

    def test_only_correspondence_dims_change(self, pair, rng):
        model, proxy, corr = pair
        trained = proxy.params + FlatParams(rng.standard_normal(proxy.layout.total_dim), proxy.layout)
        fused = plug_in_fuse(model.params, trained, corr)
        changed = fused.values != model.params.values
        assert np.all(changed <= corr.mask.keep)
        assert np.array_equal(fused.values[corr.index], trained.values)

    def test_idempotent(self, pair, rng):
        model, proxy, corr = pair
        trained = proxy.params.scale(1.5)
        once = plug_in_fuse(model.params, trained, corr)
        assert plug_in_fuse(once, trained, corr).equals(once)

    def test_layout_mismatch(self, pair):
        model, _, corr = pair
        with pytest.raises(FusionError):
            plug_in_fuse(model.params, model.params, corr)

    def test_mask_length_checked(self, small_model):
        with pytest.raises(MaskError):
            extract_proxy(small_model, select_mask([0.1, 0.2], 0.0))

    def test_correspondence_serialization(self, pair):
        _, _, corr = pair
        back = correspondence_from_params(correspondence_to_params(corr))
        assert back.pairs == corr.pairs
        assert back.proxy_layout == corr.proxy_layout
        assert back.backbone_layout == corr.backbone_layout


class TestDistortion:
    def test_zero_at_extraction(self, small_model, task):
        proxy, corr = extract_proxy(small_model, select_mask([0.5, 0.1, 0.9], 0.34))
        assert estimate_distortion(small_model, proxy, corr, task, 40) == 0.0

    def test_shrinks_with_perturbation(self, small_model, task, rng):
        proxy, corr = extract_proxy(small_model, select_mask([0.5, 0.1, 0.9], 0.34))
        noise = rng.standard_normal(proxy.layout.total_dim)
        etas = [
            estimate_distortion(small_model, proxy.with_params(proxy.params.replace(proxy.params.values + e * noise)), corr, task, 40)
            for e in (1e-1, 1e-3, 1e-5)
        ]
        assert etas[0] > etas[1] > etas[2] > 0.0

    def test_zeroed_head_gives_one(self, small_model, task):
        proxy, corr = extract_proxy(small_model, select_mask([0.5, 0.1, 0.9], 0.0))
        v = proxy.params.values.copy()
        v[proxy.layout["head.W"].slice] = 0.0
        v[proxy.layout["head.b"].slice] = 0.0
        assert estimate_distortion(small_model, proxy.with_params(proxy.params.replace(v)), corr, task, 40) == 1.0

    def test_zeroed_head_gives_subnetwork_ratio(self, small_model, task):
        proxy, corr = extract_proxy(small_model, select_mask([0.5, 0.1, 0.9], 0.34))
        v = proxy.params.values.copy()
        v[proxy.layout["head.W"].slice] = 0.0
        v[proxy.layout["head.b"].slice] = 0.0
        eta = estimate_distortion(small_model, proxy.with_params(proxy.params.replace(v)), corr, task, 40)
        x = task.sample(40, seeding.EVAL).inputs
        ratio = np.linalg.norm(retained_subnetwork(small_model, corr)(x), axis=1) / np.linalg.norm(small_model(x), axis=1)
        assert abs(eta - ratio.max()) < 1e-12
