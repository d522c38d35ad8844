from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixlora import harness
from mixlora.errors import ConfigError, ConstructionError, TrainingError


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.floats(-0.19, 1.0), st.integers(0, 1000))
def test_equiangular_cosines(num_tasks, angle, seed):
    if angle < -1 / (num_tasks - 1):
        return
    tasks = harness.gen_tasks(num_tasks, 8, 8, angle, seed)
    cos = harness.cosine_matrix(tasks)
    off = cos[~np.eye(num_tasks, dtype=bool)]
    assert np.max(np.abs(off - angle)) < 1e-6


def test_paired_layout_cosines():
    tasks = harness.gen_tasks(4, 16, 16, -0.5, 0, layout="paired", skills_per_task=2, skill_spread=2.0)
    np.testing.assert_allclose(harness.cosine_matrix(tasks), harness.conflict_gram(4, -0.5, "paired"), atol=1e-6)


def test_special_angles():
    zero = harness.gen_tasks(2, 6, 5, 0.0, 3)
    assert abs(np.sum(zero[0].teacher_delta * zero[1].teacher_delta)) < 1e-12
    anti = harness.gen_tasks(2, 6, 5, -1.0, 3)
    np.testing.assert_allclose(anti[0].teacher_delta, -anti[1].teacher_delta, atol=1e-12)
    same = harness.gen_tasks(3, 6, 5, 1.0, 3)
    np.testing.assert_allclose(same[0].teacher_delta, same[2].teacher_delta, atol=1e-12)


def test_infeasible_angle_raises():
    with pytest.raises(ConstructionError):
        harness.gen_tasks(4, 16, 16, -0.5, 0, layout="equiangular")
    with pytest.raises(ConstructionError):
        harness.gen_tasks(30, 3, 3, 0.0, 0)


def test_skills_average_to_task_delta():
    tasks = harness.gen_tasks(2, 8, 8, 0.0, 1, skills_per_task=3, skill_spread=1.5, skill_offset=2.0)
    for task in tasks:
        np.testing.assert_allclose(np.mean(task.skill_deltas, axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(np.mean(task.skill_offsets, axis=0), 0, atol=1e-12)
        norms = [np.linalg.norm(d) for d in task.skill_deltas]
        assert np.sqrt(np.mean(np.square(norms))) == pytest.approx(1.5)


def test_sampling_is_seeded():
    task = harness.gen_tasks(2, 4, 4, 0.0, 0)[0]
    h1, y1 = task.sample(3, 2, np.random.default_rng(5))
    h2, y2 = task.sample(3, 2, np.random.default_rng(5))
    assert np.array_equal(h1, h2) and np.array_equal(y1, y2)


def test_single_task_reaches_noise_floor():
    cfg = harness.HarnessConfig(num_tasks=1, skills_per_task=1)
    tasks = harness.tasks_for(cfg, 0)
    floor = cfg.noise_std**2
    for variant in harness.VARIANTS:
        loss = harness.evaluate(harness.train(variant, tasks, cfg, 0), tasks, cfg, 0)[0]
        assert loss <= 1.5 * floor, variant


def test_reduction_loss_curves_are_bit_identical():
    cfg = harness.HarnessConfig(steps=200)
    tasks = harness.tasks_for(cfg, 2)
    lora = harness.train("lora", tasks, cfg, 2)
    mix = harness.train("mixlora", tasks, cfg, 2, num_factors=2, rank=2, gating_mode="hard",
                        cfs_enabled=False, alpha=4.0)
    assert lora.curves == mix.curves


def test_specialists_see_only_their_task():
    cfg = harness.HarnessConfig(steps=80)
    tasks = harness.tasks_for(cfg, 0)
    result = harness.train("lora_specialist", tasks, cfg, 0)
    assert len(result.model) == 4
    assert all(len(c) == 20 for c in result.curves.values())
    # retraining task 2 in isolation gives the same specialist
    alone = harness.train("lora", [tasks[2]], cfg, 0, steps=20)
    for name, value in alone.model.params().items():
        assert np.array_equal(value, result.model[2].params()[name])


def test_divergence_raises_training_error():
    cfg = harness.HarnessConfig(steps=50)
    tasks = [replace(t, noise_std=float("nan")) for t in harness.tasks_for(cfg, 0)]
    with pytest.raises(TrainingError) as info:
        harness.train("mixlora", tasks, cfg, 0)
    assert "step" in info.value.diagnostics


def test_unknown_variant():
    cfg = harness.HarnessConfig()
    with pytest.raises(ConfigError):
        harness.build_model("adapter", harness.tasks_for(cfg, 0), cfg, 0)


def test_aligned_tasks_leave_variants_indistinguishable():
    cfg = harness.HarnessConfig(conflict_angle=1.0, layout="equiangular", skills_per_task=1, steps=1000)
    report = harness.compare_experiment(cfg)
    lora = [report.mean_loss("lora", s) for s in cfg.seeds]
    mix = [report.mean_loss("mixlora", s) for s in cfg.seeds]
    specialist = [report.mean_loss("lora_specialist", s) for s in cfg.seeds]
    spread = max(np.std(lora), np.std(mix), np.std(specialist))
    assert abs(np.mean(mix) - np.mean(lora)) < 2 * spread
    assert abs(np.mean(mix) - np.mean(specialist)) < 2 * spread
    assert abs(np.mean(lora) - np.mean(specialist)) < 2 * spread


def test_interference_comparison_examples():
    # same teacher and same input distribution: tasks differ only by sampling noise
    aligned = harness.HarnessConfig(num_tasks=2, conflict_angle=1.0, layout="equiangular", skills_per_task=1,
                                    mean_scale=0.0, steps=10, seeds=(0,))
    report = harness.interference_comparison(aligned, num_batches=2, batch_size=32)
    np.testing.assert_allclose(report.extras["matrices"]["lora"][0].scores, 1.0, atol=0.1)
    # instance-routed batch gradients are less parallel, so only the sign is stable
    assert np.all(report.extras["matrices"]["mixlora"][0].scores > 0.3)
    anti = harness.HarnessConfig(num_tasks=2, conflict_angle=-1.0, layout="equiangular", skills_per_task=1,
                                 steps=100, seeds=(0,))
    report = harness.interference_comparison(anti, num_batches=2, batch_size=8)
    scores = report.extras["matrices"]["lora"][0].scores
    assert scores[0, 1] < 0 and scores[1, 0] < 0


def test_routing_similarity_full_selection():
    cfg = harness.HarnessConfig(num_factors=2, rank=2, steps=10)
    tasks = harness.tasks_for(cfg, 0)
    model = harness.train("mixlora", tasks, cfg, 0).model
    stats = harness.routing_similarity(model, tasks, cfg, n_samples=5)
    assert stats["within"] == stats["cross"] == 1.0


def test_routing_similarity_random_routing_has_no_gap():
    cfg = harness.HarnessConfig(routing_mode="random", steps=10)
    tasks = harness.tasks_for(cfg, 0)
    model = harness.train("mixlora", tasks, cfg, 0).model
    stats = harness.routing_similarity(model, tasks, cfg, n_samples=250)
    assert abs(stats["gap"]) < 0.05


def test_routing_similarity_rejects_lora():
    cfg = harness.HarnessConfig(steps=4)
    tasks = harness.tasks_for(cfg, 0)
    model = harness.train("lora", tasks, cfg, 0).model
    with pytest.raises(ValueError):
        harness.routing_similarity(model, tasks, cfg, n_samples=3)


def test_cfs_ablation_structure():
    cfg = harness.HarnessConfig(steps=20, seeds=(0,))
    report = harness.cfs_ablation(cfg)
    assert set(report.losses) == {"cfs_on", "cfs_off"}
    off = harness.build_model("mixlora", harness.tasks_for(cfg, 0), cfg, 0, cfs_enabled=False)
    assert not any(name.endswith("w_ab") for name in off.params())
