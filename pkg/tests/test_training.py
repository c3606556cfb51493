import numpy as np
import pytest

from fashionbert.model import FashionBERT, ModelConfig
from fashionbert.synthetic import generate_dataset
from fashionbert.text import build_vocab
from fashionbert.training import (
    LOG_HEADER,
    AdamState,
    TrainConfig,
    adam_update,
    compute_weights,
    lr_schedule,
    prepare_products,
    read_log,
    run_training,
    sample_batch,
    train_step,
    write_log,
)
from fashionbert.model import TaskLosses
from fashionbert.tensor import Tensor


@pytest.fixture(scope="module")
def corpus():
    recs = generate_dataset(40, 32, seed=11)
    vocab = build_vocab(r.description for r in recs)
    data = prepare_products(recs, vocab, 4, 30)
    return data, [r.product_id for r in recs], len(vocab)


def tiny_model(vocab_size, seed=0):
    cfg = ModelConfig(num_layers=1, hidden=16, heads=2, ff=32, vocab_size=vocab_size, max_text_len=32, num_patches=16)
    return FashionBERT(cfg, seed=seed)


class TestSampling:
    def test_balanced_batch(self):
        batch = sample_batch(range(10), TrainConfig(batch_size=64), np.random.default_rng(0))
        labels = [ex.label for ex in batch]
        assert labels.count(1) == 32 and labels.count(0) == 32

    def test_negatives_use_other_products(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            for ex in sample_batch(range(3), TrainConfig(batch_size=8), rng):
                assert (ex.text_id == ex.image_id) == (ex.label == 1)

    def test_negative_ratio(self):
        batch = sample_batch(range(10), TrainConfig(batch_size=12, negative_ratio=2.0), np.random.default_rng(2))
        assert sum(ex.label for ex in batch) == 4


class TestSchedule:
    def test_endpoints(self):
        cfg = TrainConfig(learning_rate=1e-3, warmup_steps=100, total_steps=1000)
        assert lr_schedule(0, cfg) == 0.0
        assert lr_schedule(50, cfg) == pytest.approx(5e-4)
        assert lr_schedule(100, cfg) == pytest.approx(1e-3)
        assert lr_schedule(550, cfg) == pytest.approx(5e-4)
        assert lr_schedule(1000, cfg) == 0.0

    def test_monotone_pieces(self):
        cfg = TrainConfig(warmup_steps=10, total_steps=50)
        lrs = [lr_schedule(t, cfg) for t in range(51)]
        assert all(a <= b for a, b in zip(lrs[:10], lrs[1:11]))
        assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup_steps=10, total_steps=5)
        with pytest.raises(ValueError):
            TrainConfig(text_mask_prob=1.0)


class TestAdam:
    def test_zero_lr_is_identity(self):
        p = {"w": Tensor(np.ones((2, 2)), requires_grad=True)}
        adam_update(p, {"w": np.full((2, 2), 3.0)}, AdamState(), 0.0, TrainConfig())
        np.testing.assert_array_equal(p["w"].data, 1.0)

    def test_zero_gradient_only_decays_matrices(self):
        p = {"w": Tensor(np.ones((2, 2)), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
        cfg = TrainConfig(weight_decay=0.1)
        adam_update(p, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, AdamState(), 0.5, cfg)
        np.testing.assert_allclose(p["w"].data, 1.0 - 0.5 * 0.1)
        np.testing.assert_array_equal(p["b"].data, 1.0)

    def test_first_step_magnitude(self):
        # bias correction makes the first step lr * sign(g)
        p = {"b": Tensor(np.zeros(3), requires_grad=True)}
        adam_update(p, {"b": np.array([2.0, -0.5, 1e-3])}, AdamState(), 0.1, TrainConfig(weight_decay=0.0))
        np.testing.assert_allclose(p["b"].data, [-0.1, 0.1, -0.1], rtol=1e-4)


class TestStep:
    def test_fixed_weights_are_thirds(self):
        w = compute_weights(TaskLosses(5.0, 0.1, 0.7), "fixed")
        assert w.tolist() == [1 / 3] * 3

    def test_adaptive_weights_favour_larger_loss(self):
        w = compute_weights(TaskLosses(5.0, 0.1, 0.7), "adaptive")
        assert w[0] > w[2] > w[1] and w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_step_changes_parameters(self, corpus):
        data, ids, v = corpus
        model = tiny_model(v)
        before = model.params["tia.w"].data.copy()
        cfg = TrainConfig(batch_size=8, warmup_steps=1, total_steps=10, debug=True)
        examples = sample_batch(ids, cfg, np.random.default_rng(0))
        losses, weights, lr = train_step(model, examples, data, AdamState(), cfg, np.random.default_rng(1))
        assert lr == pytest.approx(cfg.learning_rate)
        assert all(np.isfinite(losses.as_tuple()))
        assert not np.array_equal(before, model.params["tia.w"].data)


class TestLoop:
    def test_deterministic(self, corpus):
        data, ids, v = corpus
        cfg = TrainConfig(batch_size=8, warmup_steps=2, total_steps=6, seed=3)
        a = run_training(tiny_model(v), data, ids, cfg)
        b = run_training(tiny_model(v), data, ids, cfg)
        assert [r.row() for r in a.log] == [r.row() for r in b.log]
        for k, p in a.model.params.items():
            assert p.data.tobytes() == b.model.params[k].data.tobytes()

    def test_losses_decrease(self, corpus):
        data, ids, v = corpus
        cfg = TrainConfig(batch_size=16, warmup_steps=10, total_steps=150, learning_rate=3e-3)
        res = run_training(tiny_model(v), data, ids, cfg)
        first = np.mean([r.losses.mlm for r in res.log[:10]])
        last = np.mean([r.losses.mlm for r in res.log[-10:]])
        assert last < 0.7 * first

    def test_early_stop_restores_best(self, corpus):
        data, ids, v = corpus
        scores = iter([50.0, 60.0, 55.0, 54.0, 53.0, 52.0, 51.0, 99.0])
        snapshots = []

        def validate(m):
            snapshots.append(m.params["tia.w"].data.copy())
            return next(scores)

        cfg = TrainConfig(batch_size=4, warmup_steps=1, total_steps=40, eval_every=2, patience=3)
        res = run_training(tiny_model(v), data, ids, cfg, validate=validate)
        assert res.stopped_early and res.best_step == 4
        assert [s for s, _ in res.validation] == [2, 4, 6, 8, 10]
        np.testing.assert_array_equal(res.model.params["tia.w"].data, snapshots[1])

    def test_log_roundtrip(self, corpus, tmp_path):
        data, ids, v = corpus
        res = run_training(tiny_model(v), data, ids, TrainConfig(batch_size=4, warmup_steps=1, total_steps=3))
        write_log(tmp_path / "log.csv", res.log)
        assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(LOG_HEADER)
        rows = read_log(tmp_path / "log.csv")
        assert [r["step"] for r in rows] == [1, 2, 3]
        for r, s in zip(rows, res.log):
            assert r["l_tia"] == s.losses.tia and r["w_mlm"] == s.weights[0]
            assert r["w_mlm"] + r["w_mpm"] + r["w_tia"] == pytest.approx(1.0, abs=1e-12)
