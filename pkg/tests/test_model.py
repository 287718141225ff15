import numpy as np
import pytest

from grc.config import RunConfig, TaskConfig, TrainConfig
from grc.errors import ConfigError, DataError
from grc.model import ModelConfig, build_model, copy_shared_weights
from grc.oracle import gradcheck_model, tiny_instance
from grc.tasks import TaskBatch
from grc.train import Trainer


def small_cfg(**kw):
    base = dict(layers=2, d_model=8, heads=2, cache_len=4, vocab=6, max_len=6, num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


def batch(b=2, t=5, vocab=6, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return TaskBatch(rng.integers(0, vocab, (b, t)), rng.integers(0, classes, b))


def test_build_is_deterministic():
    a, b = build_model(small_cfg(), 3), build_model(small_cfg(), 3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = build_model(small_cfg(), 4)
    assert any(pa.data.tobytes() != pc.data.tobytes() for pa, pc in zip(a.parameters(), c.parameters()))


def test_divisibility_error_names_constraint():
    with pytest.raises(ConfigError, match="d_model % heads"):
        build_model(small_cfg(d_model=8, heads=3))
    with pytest.raises(ConfigError, match="cache_ratio"):
        build_model(small_cfg(d_model=8, heads=4, cache_ratio=0.3))


def test_half_ratio_gives_d_m_four():
    model = build_model(small_cfg(d_model=8, cache_ratio=0.5))
    caches = model.caches()
    assert len(caches) == 2 and all(c.d_m == 4 and not c.C.any() for c in caches)
    assert caches[0] is not caches[1]


def test_forward_shapes_and_loss():
    model = build_model(small_cfg())
    logits, loss = model.forward(batch())
    assert logits.shape == (2, 3) and np.isfinite(loss.data)
    lm = build_model(small_cfg(task_head="lm"))
    tokens = np.random.default_rng(0).integers(0, 6, (2, 5))
    logits, _ = lm.forward(TaskBatch(tokens, tokens))
    assert logits.shape == (2, 5, 6)


def test_data_errors():
    model = build_model(small_cfg())
    with pytest.raises(DataError):
        model.forward(TaskBatch(np.array([[0, 6]]), np.array([0])))
    with pytest.raises(DataError):
        model.forward(TaskBatch(np.zeros((1, 7), dtype=int), np.array([0])))


def test_eval_is_pure():
    model = build_model(small_cfg(), dtype=np.float64)
    b = batch()
    model.forward(b, training=True)
    state = [c.C.copy() for c in model.caches()]
    steps = [c.step for c in model.caches()]
    a, _ = model.forward(b, training=False)
    c, _ = model.forward(b, training=False)
    assert a.data.tobytes() == c.data.tobytes()
    assert [c.C.tobytes() for c in model.caches()] == [s.tobytes() for s in state]
    assert [c.step for c in model.caches()] == steps


def test_training_forward_updates_each_cache_once():
    model = build_model(small_cfg())
    model.forward(batch(), training=True)
    assert [c.step for c in model.caches()] == [1, 1]
    assert all(c.C.any() for c in model.caches())


def test_saturated_lambda_matches_baseline():
    cached = build_model(small_cfg(), 5, np.float64)
    cached.forward(batch(seed=1), training=True)
    for block in cached.blocks:
        block.attn.lam.data[:] = -30.0
    base = build_model(small_cfg(use_cache=False), 6, np.float64)
    copy_shared_weights(cached, base)
    b = batch(seed=2)
    a, _ = cached.forward(b)
    c, _ = base.forward(b)
    assert np.abs(a.data - c.data).max() < 1e-5


def test_tiny_model_gradcheck():
    model, b = tiny_instance()
    reports = gradcheck_model(model, b)
    assert {r.name for r in reports} == {n for n, _ in model.named_parameters()}
    bad = [(r.name, r.max_rel_err) for r in reports if not r.passed]
    assert not bad


def test_lm_head_is_causal():
    model = build_model(small_cfg(task_head="lm"), dtype=np.float64)
    tokens = np.random.default_rng(1).integers(0, 6, (1, 5))
    other = tokens.copy()
    other[0, 4] = (other[0, 4] + 1) % 6
    a, _ = model.forward(TaskBatch(tokens, tokens))
    b, _ = model.forward(TaskBatch(other, other))
    np.testing.assert_array_equal(a.data[0, :4], b.data[0, :4])


def test_padding_does_not_change_classification():
    model = build_model(small_cfg(), dtype=np.float64)
    tokens = np.array([[1, 2, 3, 0, 0]])
    other = np.array([[1, 2, 3, 5, 4]])
    lengths = np.array([3])
    a, _ = model.forward(TaskBatch(tokens, [0], lengths))
    b, _ = model.forward(TaskBatch(other, [0], lengths))
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


@pytest.mark.parametrize("use_cache", [True, False], ids=["cached", "baseline"])
def test_copy_loss_decreases_over_200_steps(use_cache):
    run = RunConfig(
        model=ModelConfig(layers=1, d_model=32, heads=2, cache_len=16, vocab=8, max_len=16,
                          task_head="lm", use_cache=use_cache),
        train=TrainConfig(lr=3e-3, total_steps=200, warmup_steps=20, batch_size=16, eval_interval=200,
                          eval_batches=2, seed=0),
        task=TaskConfig(task="copy", seq_len=16)).validate()
    trainer = Trainer(build_model(run.model, 0), run)
    trainer.fit()
    train = [r["loss"] for r in trainer.history if r["split"] == "train"]
    assert np.mean(train[-10:]) < np.mean(train[:10])
