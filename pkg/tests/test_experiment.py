import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgattack import io
from cgattack.attack import AttackConfig
from cgattack.classifier import LinearScorer, build_classifier
from cgattack.data import DataConfig, gen_synthetic_dataset
from cgattack.experiment import (ExperimentReport, image_seed, lower_median, random_baseline_asr, run_campaign,
                                 run_experiment, summarize, symmetric_kl, verify_assumption1, verify_report)
from cgattack.flow import CondFlow, FlowConfig
from cgattack.latent import DctDecoder, VectorDecoder


def rec(success, queries, image_id=0):
    return {"image_id": image_id, "success": success, "queries": queries, "mode": "untargeted",
            "transfer_mode": "partial", "final_loss": 0.0 if success else 1.0, "seed": 0}


def test_report_arithmetic_example():
    rep = summarize([rec(True, 1, 0), rec(False, 2000, 1), rec(True, 3, 2)])
    assert rep.asr == pytest.approx(66.666, abs=0.01)
    assert rep.mean_queries == 2.0
    # lower median of the two successful counts [1, 3]
    assert rep.median_queries == 1
    assert rep.attempted == 3 and rep.successes == 2


def test_lower_median():
    assert lower_median([]) is None
    assert lower_median([5]) == 5
    assert lower_median([4, 1, 3]) == 3
    assert lower_median([4, 1, 3, 2]) == 2


def test_empty_and_all_failed_reports():
    empty = summarize([])
    assert empty.asr is None and empty.median_queries is None
    failed = summarize([rec(False, 10)])
    assert failed.asr == 0.0 and failed.mean_queries is None


def test_report_json_round_trip_and_verification(tmp_path):
    rep = summarize([rec(True, 4, 0), rec(True, 9, 1), rec(False, 50, 2)], {"seed": 1}, skipped=[7])
    rep.save(tmp_path / "r.json")
    back = ExperimentReport.load(tmp_path / "r.json")
    assert back == rep
    assert verify_report(back)
    back.per_example[0]["queries"] = 5
    assert not verify_report(back)
    assert "ASR" in rep.table() and "66.7" in rep.table()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 10_000)), max_size=40))
def test_reports_recompute_exactly(results):
    rep = summarize([rec(s, q, i) for i, (s, q) in enumerate(results)])
    assert verify_report(ExperimentReport.from_json(rep.to_json()))
    wins = sorted(q for s, q in results if s)
    if wins:
        assert wins[0] <= rep.median_queries <= wins[-1]
        assert sum(1 for w in wins if w <= rep.median_queries) >= len(wins) / 2


def test_image_seed_is_stable_and_distinct():
    assert image_seed(0, 5) == image_seed(0, 5)
    assert len({image_seed(0, i) for i in range(100)} | {image_seed(1, i) for i in range(100)}) == 200


def wrong_always():
    return LinearScorer(np.zeros((2, 2)), np.array([0.0, 1.0]))


def vector_setup():
    dec = VectorDecoder(2)
    flow = CondFlow.create(FlowConfig((2, 1, 1), 1, num_blocks=1, hidden=0, coupling_hidden=0, kernel=1))
    return flow, dec


def test_campaign_with_constant_wrong_model_skips_everything():
    flow, dec = vector_setup()
    images = np.full((3, 1, 1, 2), 0.5)
    rep, totals = run_campaign(wrong_always(), flow, dec, images, np.zeros(3, int), AttackConfig(budget=1))
    assert rep.attempted == 0 and rep.skipped == [0, 1, 2] and totals.queries == 0


def test_campaign_budget_one_success():
    # benign prediction is class 0; eta1 >= 0.025 flips it and the base mean clamps to eta1 = 0.1
    flow, dec = vector_setup()
    model = LinearScorer(np.array([[-1.0, 1.0], [0.0, 0.0]]), np.array([1.05, 0.0]))
    flow.set_base(np.array([5.0, 0.0]).reshape(2, 1, 1), 0.1)
    images = np.full((4, 1, 1, 2), 0.5)
    rep, totals = run_campaign(model, flow, dec, images, np.zeros(4, int),
                               AttackConfig(budget=1, epsilon=0.1, transfer_mode="full", step0=1e-6))
    assert rep.asr == 100.0 and rep.mean_queries == 1.0 and rep.median_queries == 1
    assert totals.queries == 4 and totals.infeasible == 0


def test_targeted_campaign_skips_target_class():
    flow, dec = vector_setup()
    model = LinearScorer(np.zeros((2, 3)), np.array([1.0, 0.0, 0.0]))
    images = np.full((3, 1, 1, 2), 0.5)
    rep, _ = run_campaign(model, flow, dec, images, np.array([0, 2, 1]),
                          AttackConfig(budget=5, mode="targeted:2", epsilon=0.1))
    assert rep.skipped == [1] and rep.attempted == 2


def test_campaign_is_deterministic():
    flow, dec = vector_setup()
    model = LinearScorer(np.array([[-1.0, 1.0], [0.0, 0.0]]), np.array([1.1, 0.0]))
    images = np.random.default_rng(0).uniform(0.2, 0.8, (6, 1, 1, 2))
    cfg = AttackConfig(budget=60, epsilon=0.3, transfer_mode="none", seed=4, step0=0.1)
    a, _ = run_campaign(model, flow, dec, images, np.zeros(6, int), cfg)
    b, _ = run_campaign(model, flow, dec, images, np.zeros(6, int), cfg)
    assert a.to_json() == b.to_json()
    assert [r["seed"] for r in a.per_example] == [image_seed(4, r["image_id"]) for r in a.per_example]


def test_random_baseline_is_a_percentage():
    model = LinearScorer(np.zeros((2, 2)), np.array([0.0, 1.0]))
    images = np.full((10, 1, 1, 2), 0.5)
    assert random_baseline_asr(model, images, np.zeros(10, int), 0.1, np.random.default_rng(0)) == 100.0


def test_symmetric_kl_examples():
    cfg = FlowConfig((2, 2, 2), 1, num_blocks=2, hidden=4, coupling_hidden=4)
    flow = CondFlow.create(cfg, seed=0, identity=False, scale=0.5)
    conds = np.random.default_rng(0).standard_normal((3, 1, 2, 2))
    est, se = symmetric_kl(flow, flow.copy(), conds, 200, np.random.default_rng(1))
    assert abs(est) <= 3 * se + 1e-12
    est, se = symmetric_kl(flow, flow.with_identity_blocks(), conds, 200, np.random.default_rng(1))
    assert est > 3 * se and est > 0
    other = CondFlow.create(FlowConfig((1, 2, 2), 1))
    with pytest.raises(ValueError):
        symmetric_kl(flow, other, conds, 10, np.random.default_rng(0))


def test_verify_assumption_reports_transfer():
    dec = DctDecoder(8, 0.5, 1, 0.1)
    flow = CondFlow.create(FlowConfig(dec.latent_shape, dec.cond_channels))
    data = gen_synthetic_dataset(DataConfig(num_classes=2, n_per_class=5, H=8, W=8))
    target = build_classifier("mlp-2", (8, 8, 1), 2)
    out = verify_assumption1(flow, flow, dec, data, target, 0.1, n_samples=8)
    assert out["symmetric_kl"] == 0.0
    assert 0 <= out["one_shot_asr"] <= 100 and 0 <= out["random_asr"] <= 100
    with pytest.raises(ValueError):
        verify_assumption1(flow, flow, dec, data, target, None)


def write_experiment(tmp_path, **overrides):
    dec = DctDecoder(8, 0.5, 1, 0.2)
    flow = CondFlow.create(FlowConfig(dec.latent_shape, dec.cond_channels))
    io.save_flow(flow, dec, tmp_path / "flow.cadf")
    io.save_classifier(build_classifier("mlp-2", (8, 8, 1), 2, seed=3), tmp_path / "target.cadm")
    io.save_dataset(gen_synthetic_dataset(DataConfig(num_classes=2, n_per_class=3, H=8, W=8)), tmp_path / "d.cads")
    cfg = {"target": "target.cadm", "flow": "flow.cadf", "data": "d.cads", "n_images": 4,
           "attack": {"budget": 40, "epsilon": 0.1, "transfer_mode": "none"}}
    cfg.update(overrides)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_experiment(tmp_path):
    rep = run_experiment(write_experiment(tmp_path))
    assert rep.attempted + len(rep.skipped) == 4
    assert verify_report(rep)
    assert rep.config["scenario"] == "closed-set"


def test_run_experiment_missing_checkpoint(tmp_path):
    path = write_experiment(tmp_path, flow="nowhere.cadf")
    with pytest.raises(FileNotFoundError, match="nowhere"):
        run_experiment(path)
