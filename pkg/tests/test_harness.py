import json

import numpy as np
import pytest

from fedproxy.config import SEED_ENV, ConfigError, RunConfig, config_from_dict, load_config
from fedproxy.harness import (
    compare_methods,
    emit_report,
    load_correspondence,
    load_model,
    run_pipeline,
    save_correspondence,
    save_model,
)

SMALL = {
    "backbone": {"n_blocks": 4, "width": 6},
    "pretrain": {"steps": 30, "n_samples": 64},
    "scenario": {"kind": "heterogeneous", "K": 3},
    "rounds": 2,
    "bi_samples": 32,
    "client": {"epochs": 1, "n_train": 16, "n_eval": 32},
}


@pytest.fixture(scope="module")
def small_cfg():
    return config_from_dict(json.loads(json.dumps(SMALL)))


@pytest.fixture(scope="module")
def report(small_cfg):
    return run_pipeline(small_cfg)


class TestConfig:
    def test_defaults(self):
        cfg = load_config(env={})
        assert (cfg.agg.r0, cfg.agg.delta_adapt, cfg.agg.rho) == (1.0, 0.2, 1.1)
        assert cfg.client.lambda_reg == 1e-5
        assert cfg.master_seed == 0

    def test_seed_from_env(self):
        assert load_config(env={SEED_ENV: "17"}).master_seed == 17

    def test_bad_seed_env(self):
        with pytest.raises(ConfigError):
            load_config(env={SEED_ENV: "abc"})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            config_from_dict({"agg": {"rhoo": 1.2}})

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            config_from_dict({"agg": {"rho": 0.5}})

    def test_toml(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('rounds = 3\n[scenario]\nkind = "conflicting"\nK = 8\n')
        cfg = load_config(path, env={})
        assert cfg.rounds == 3 and cfg.scenario.K == 8

    def test_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"kappa": 0.25}))
        assert load_config(path, env={}).kappa == 0.25

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path, env={})

    def test_digest_tracks_content(self):
        assert RunConfig().digest() == RunConfig().digest()
        assert RunConfig().digest() != RunConfig().with_method("fedavg").digest()


class TestPipeline:
    def test_shapes(self, report, small_cfg):
        assert len(report.bi_scores) == 4
        assert len(report.retained_blocks) == 2
        assert len(report.rounds) == small_cfg.rounds * (small_cfg.scenario.K + 1)
        assert len(report.evals) == 3

    def test_fused_matches_backbone_off_correspondence(self, report):
        off = ~report.corr.mask.keep
        assert np.array_equal(report.fused.params.values[off], report.backbone.params.values[off])

    def test_rounds_are_finite(self, report):
        assert report.rounds[-1].client_id == "global"
        assert all(np.isfinite(r.eval_loss) for r in report.rounds)

    def test_deterministic(self, report, small_cfg):
        again = run_pipeline(small_cfg)
        assert again.fused.params.equals(report.fused.params)
        assert again.bi_scores == report.bi_scores
        for a, b in zip(again.rounds, report.rounds):
            assert repr(a) == repr(b)

    def test_seed_changes_result(self, small_cfg, report):
        import dataclasses

        other = run_pipeline(dataclasses.replace(small_cfg, master_seed=1))
        assert not other.fused.params.equals(report.fused.params)


class TestArtifacts:
    def test_emit_report(self, report, tmp_path):
        paths = emit_report(report, tmp_path)
        names = sorted(p.name for p in paths)
        assert names == ["bi.csv", "eval.csv", "metrics.csv", "report.md"]
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "round,client_id,task_loss,eval_loss,h_k,w_k,mean_C,retention,delta_norm"
        assert len(lines) == 1 + 2 * (3 + 1)
        assert "## Block influence" in (tmp_path / "report.md").read_text()

    def test_csv_only(self, report, tmp_path):
        paths = emit_report(report, tmp_path, formats=("csv",))
        assert "report.md" not in {p.name for p in paths}

    def test_model_checkpoint_round_trip(self, report, tmp_path):
        back = load_model(save_model(report.fused, tmp_path / "f.fpxy"))
        assert back.params.equals(report.fused.params)
        assert np.array_equal(back.embed, report.fused.embed)

    def test_correspondence_round_trip(self, report, tmp_path):
        back = load_correspondence(save_correspondence(report.corr, tmp_path / "c.fpxy"))
        assert np.array_equal(back.index, report.corr.index)


class TestCompare:
    def test_rows(self, small_cfg):
        rows = compare_methods(small_cfg, ["fedproxy", "fedavg"])
        assert [r.method for r in rows] == ["fedproxy", "fedavg"]
        assert rows[0].delta_vs_fedproxy == 0.0

    def test_needs_two(self, small_cfg):
        with pytest.raises(ValueError):
            compare_methods(small_cfg, ["fedavg"])
