import numpy as np
import pytest

from mixlora import checkpoint, harness
from mixlora.errors import StateError


def trained(variant="mixlora", **kw):
    cfg = harness.HarnessConfig(steps=30, num_layers=2, **kw)
    tasks = harness.tasks_for(cfg, 4)
    result = harness.train(variant, tasks, cfg, 4)
    return result, tasks, cfg


@pytest.mark.parametrize("routing", ["instance", "task", "random"])
def test_round_trip_is_bit_exact(tmp_path, routing):
    result, tasks, cfg = trained(routing_mode=routing)
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, result.model, optimizer=result.optimizer, extra={"note": "x"})
    model, opt, header = checkpoint.load(path)
    for name, value in result.model.params().items():
        assert np.array_equal(model.params()[name], value)
        assert np.array_equal(opt.m[name], result.optimizer.m[name])
        assert np.array_equal(opt.v[name], result.optimizer.v[name])
    assert opt.step == result.optimizer.step
    assert header["extra.note"] == "x"
    h, _ = tasks[0].sample(6, cfg.seq_len, np.random.default_rng(0))
    ids = np.zeros(6, dtype=int)
    out1, s1 = result.model.forward_batch(h, ids, rng=np.random.default_rng(1))
    out2, s2 = model.forward_batch(h, ids, rng=np.random.default_rng(1))
    assert np.array_equal(out1, out2)


def test_lora_round_trip(tmp_path):
    result, _, _ = trained("lora")
    checkpoint.save(tmp_path / "l.ckpt", result.model)
    model, opt, _ = checkpoint.load(tmp_path / "l.ckpt")
    assert opt is None and not model.is_mixlora
    for name, value in result.model.params().items():
        assert np.array_equal(model.params()[name], value)


def test_cfs_off_has_no_w_ab(tmp_path):
    result, _, _ = trained(cfs_enabled=False)
    checkpoint.save(tmp_path / "c.ckpt", result.model)
    header, _ = checkpoint.read_header(tmp_path / "c.ckpt")
    assert "w_ab" not in header["tensors"]


def test_corrupt_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"hello")
    with pytest.raises(StateError):
        checkpoint.load(bad)
    result, _, _ = trained()
    good = tmp_path / "good.ckpt"
    checkpoint.save(good, result.model)
    data = good.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(data[:-8])
    with pytest.raises(StateError):
        checkpoint.load(tmp_path / "short.ckpt")


def test_kv_round_trip():
    items = {"a": 0.1, "b": True, "c": 3, "d": "text"}
    assert checkpoint.parse_kv(checkpoint.format_kv(items)) == {"a": "0.1", "b": "true", "c": "3", "d": "text"}
