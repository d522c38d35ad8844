"""Acceptance criteria, one test each, at the stated tolerances and time limits.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed in the terminal summary. ``python tests/test_acceptance.py``
runs the same checks without pytest.
"""

import time

import numpy as np

from mixlora import MixLoraConfig, Selection, checkpoint, harness, init_adapter, interference
from mixlora.gradcheck import MODES, run_suite
from mixlora.interference import ParamGroup

from conftest import record

CONFLICT = harness.HarnessConfig()  # T=4, angle -0.5, d=16, E=8, r=2, 2000 steps, seeds 0..4


def check(criterion, passed, detail, elapsed, limit):
    in_time = elapsed < limit
    ok = record(criterion, passed and in_time, f"{detail}; {elapsed:.2f}s (limit {limit}s)")
    assert ok, f"criterion {criterion}: {detail}; {elapsed:.2f}s"


def test_01_zero_init_identity():
    start = time.perf_counter()
    gen = np.random.default_rng(0)
    worst = 0.0
    for k in range(100):
        E = int(gen.integers(1, 9))
        cfg = MixLoraConfig(
            d_in=int(gen.integers(1, 12)), d_out=int(gen.integers(1, 12)), num_factors=E,
            rank=int(gen.integers(1, E + 1)), routing_mode=["instance", "task", "random"][k % 3],
            gating_mode=["soft", "hard"][k % 2], cfs_enabled=bool(k % 5), num_tasks=3, seed=k,
        )
        adapter = init_adapter(cfg)
        h = gen.standard_normal((2, int(gen.integers(1, 6)), cfg.d_in))
        out, _ = adapter.forward_batch(h, task_ids=[0, 2], rng=gen)
        worst = max(worst, float(np.max(np.abs(out - h @ adapter.base_w.T))))
    check(1, worst == 0.0, f"max |adapted - base| = {worst:.3g} over 100 configs",
          time.perf_counter() - start, 1)


def test_02_gradient_correctness():
    start = time.perf_counter()
    results = run_suite(range(20), MODES)
    excluded = sum(r.flipped for r in results)
    kept = [r for r in results if not r.flipped]
    worst = max(max(max(r.errors.values()), r.input_error) for r in kept)
    enough = len({r.seed for r in kept}) >= 20
    check(2, worst < 1e-6 and enough,
          f"max relative error {worst:.2e} over {len(kept)} instances ({excluded} excluded for index flips)",
          time.perf_counter() - start, 30)


def test_03_lora_reduction():
    start = time.perf_counter()
    cfg = harness.HarnessConfig(steps=500)
    tasks = harness.tasks_for(cfg, 0)
    lora = harness.train("lora", tasks, cfg, 0)
    mix = harness.train("mixlora", tasks, cfg, 0, num_factors=cfg.rank, rank=cfg.rank, gating_mode="hard",
                        cfs_enabled=False, alpha=2.0 * cfg.rank)
    identical = lora.curves == mix.curves and all(len(c) == 125 for c in lora.curves.values())
    h, _ = harness.eval_data(tasks[0], cfg, 0)
    out_l, _ = lora.model.forward_batch(h)
    out_m, _ = mix.model.forward_batch(h)
    diff = float(np.max(np.abs(out_l - out_m)))
    check(3, identical and diff < 1e-12, f"curves bit-identical={identical}, max forward diff {diff:.3g}",
          time.perf_counter() - start, 10)


def test_04_sum_of_outer_products():
    start = time.perf_counter()
    gen = np.random.default_rng(4)
    worst = 0.0
    for k in range(1000):
        E = int(gen.integers(1, 9))
        r = int(gen.integers(1, E + 1))
        cfg = MixLoraConfig(d_in=int(gen.integers(1, 9)), d_out=int(gen.integers(1, 9)), num_factors=E,
                            rank=r, gating_mode="soft" if k % 2 else "hard", seed=k)
        adapter = init_adapter(cfg)
        adapter.set_param("b_factors", gen.standard_normal((E, cfg.d_out)))
        ia, ib = np.sort(gen.choice(E, r, replace=False)), np.sort(gen.choice(E, r, replace=False))
        ga, gb = (gen.random(r), gen.random(r)) if k % 2 else (np.ones(r), np.ones(r))
        sel = Selection(ia, ga, ib, gb, None, None, None)
        outer_sum = np.zeros((cfg.d_out, cfg.d_in))
        for i in range(r):
            outer_sum += np.outer(gb[i] * adapter.pool.b_factors[ib[i]], ga[i] * adapter.pool.a_factors[ia[i]])
        worst = max(worst, float(np.max(np.abs(adapter.assemble_delta_w(sel) - outer_sum))))
    check(4, worst < 1e-12, f"max deviation {worst:.3g} over 1000 selections", time.perf_counter() - start, 1)


def test_05_interference_analytics():
    start = time.perf_counter()
    cfg = harness.HarnessConfig(d_in=6, d_out=6, num_factors=4, rank=2, steps=60, seeds=(0,))
    tasks = harness.tasks_for(cfg, 0)
    model = harness.train("mixlora", tasks, cfg, 0).model
    batches = harness.interference_batches(tasks, cfg, 0, num_batches=3, batch_size=8)
    mats = [interference.build_matrix(model, tasks, ParamGroup(), batches, lam) for lam in (0.01, 0.1, 1.0)]
    diag = float(np.max(np.abs(np.diag(mats[0].scores) - 1)))
    invariant = all(np.array_equal(mats[0].scores, m.scores) for m in mats[1:])
    quad = interference.matrix_from_grads({1: [np.array([-1.0])], 2: [np.array([1.0])]}).scores[0, 1]
    ok = diag <= 1e-9 and invariant and abs(quad + 1) <= 1e-9
    check(5, ok, f"|diag - 1| {diag:.2g}, lambda-invariant={invariant}, quadratic I(1,2)={quad:.12g}",
          time.perf_counter() - start, 5)


def test_06_conflict_mitigation():
    start = time.perf_counter()
    report = harness.compare_experiment(CONFLICT)
    seeds = report.seeds
    lower = sum(report.mean_loss("mixlora", s) < report.mean_loss("lora", s) for s in seeds)
    closer = sum(report.specialist_gap("mixlora", s) < report.specialist_gap("lora", s) for s in seeds)
    detail = (f"MixLoRA below LoRA in {lower}/5 seeds, smaller specialist gap in {closer}/5; mean loss "
              f"lora {np.mean([report.mean_loss('lora', s) for s in seeds]):.4f} "
              f"mixlora {np.mean([report.mean_loss('mixlora', s) for s in seeds]):.4f} "
              f"specialist {np.mean([report.mean_loss('lora_specialist', s) for s in seeds]):.4f}")
    check(6, lower >= 4 and closer >= 4, detail, time.perf_counter() - start, 300)


def test_07_routing_strategy_ordering():
    start = time.perf_counter()
    report = harness.routing_ablation(CONFLICT)
    ordered = 0
    for s in report.seeds:
        inst, task, rand = (report.mean_loss(m, s) for m in ("instance", "task", "random"))
        ordered += inst <= task <= rand
    means = {m: np.mean([report.mean_loss(m, s) for s in report.seeds]) for m in report.losses}
    detail = (f"instance <= task <= random in {ordered}/5 seeds; mean loss "
              + " ".join(f"{m} {v:.4f}" for m, v in means.items()))
    check(7, ordered >= 4, detail, time.perf_counter() - start, 600)


def test_08_interference_reduction():
    start = time.perf_counter()
    report = harness.interference_comparison(CONFLICT, lora_rank=CONFLICT.num_factors)
    neg = report.extras["negative_mean"]
    wins = sum(neg["mixlora"][s] > neg["lora"][s] for s in report.seeds)
    detail = (f"MixLoRA negative-mean above LoRA(r={CONFLICT.num_factors}) in {wins}/5 seeds; "
              f"lora {[round(neg['lora'][s], 3) for s in report.seeds]} "
              f"mixlora {[round(neg['mixlora'][s], 3) for s in report.seeds]}")
    check(8, wins >= 3, detail, time.perf_counter() - start, 300)


def test_09_routing_clustering():
    start = time.perf_counter()
    inst_gaps, rand_gaps = [], []
    for seed in CONFLICT.seeds:
        tasks = harness.tasks_for(CONFLICT, seed)
        trained = harness.train("mixlora", tasks, CONFLICT, seed).model
        inst_gaps.append(harness.routing_similarity(trained, tasks, CONFLICT, 50, seed)["gap"])
        rand = harness.build_model("mixlora", tasks, CONFLICT, seed, routing_mode="random")
        rand_gaps.append(harness.routing_similarity(rand, tasks, CONFLICT, 50, seed)["gap"])
    ok = min(inst_gaps) >= 0.1 and max(abs(g) for g in rand_gaps) < 0.05
    detail = (f"instance within-cross gap min {min(inst_gaps):.3f} (mean {np.mean(inst_gaps):.3f}); "
              f"random |gap| max {max(abs(g) for g in rand_gaps):.4f}")
    check(9, ok, detail, time.perf_counter() - start, 120)


def test_10_serialization(tmp_path):
    cfg = harness.HarnessConfig(steps=40, num_layers=2)
    tasks = harness.tasks_for(cfg, 0)
    result = harness.train("mixlora", tasks, cfg, 0)
    start = time.perf_counter()
    path = tmp_path / "model.ckpt"
    checkpoint.save(path, result.model, optimizer=result.optimizer)
    model, opt, _ = checkpoint.load(path)
    same = all(np.array_equal(v, model.params()[k]) for k, v in result.model.params().items())
    same &= all(np.array_equal(v, opt.m[k]) and np.array_equal(result.optimizer.v[k], opt.v[k])
                for k, v in result.optimizer.m.items())
    h, _ = harness.eval_data(tasks[1], cfg, 0)
    out1, _ = result.model.forward_batch(h)
    out2, _ = model.forward_batch(h)
    exact = np.array_equal(out1, out2)
    check(10, same and exact, f"tensors bit-exact={same}, forward exact={exact}", time.perf_counter() - start, 1)


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            try:
                if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except AssertionError:
                pass
