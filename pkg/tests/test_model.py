import math

import numpy as np
import pytest

from fashionbert import tensor as T
from fashionbert.image import PatchGrid, apply_patch_mask
from fashionbert.model import (
    FashionBERT,
    ModelConfig,
    assemble_input,
    collate,
    load_checkpoint,
    match_score,
    save_checkpoint,
    score_pairs,
)
from fashionbert.tensor import Tensor
from fashionbert.text import CLS_ID, SEP_ID, TokenSequence, apply_wwm_mask

VOCAB = 20


def text(n, start=5):
    ids = [start + (i % (VOCAB - start)) for i in range(n)]
    return TokenSequence(ids, [(i, i + 1) for i in range(n)])


def grid(seed=0, m=16, d=54):
    side = int(math.isqrt(m))
    return PatchGrid(side, np.random.default_rng(seed).random((m, d)))


def small_config(**kw):
    base = dict(num_layers=2, hidden=16, heads=2, ff=32, vocab_size=VOCAB, max_text_len=48, num_patches=16)
    base.update(kw)
    return ModelConfig(**base)


class TestAssembly:
    def test_layout(self):
        inp = assemble_input(text(5), grid(), 1, small_config())
        assert inp.seq_len == 23
        assert inp.token_ids[0] == CLS_ID and inp.token_ids[-1] == SEP_ID
        assert inp.segments == [0] * 7 + [1] * 16

    def test_empty_text(self):
        with pytest.raises(ValueError):
            assemble_input(TokenSequence([], []), grid(), 1, small_config())

    def test_text_budget(self):
        cfg = ModelConfig.full_scale(VOCAB)
        g = grid(m=64)
        assert assemble_input(text(446), g, 1, cfg).seq_len == 512
        with pytest.raises(ValueError):
            assemble_input(text(447), g, 1, cfg)

    def test_wrong_patch_count(self):
        with pytest.raises(ValueError):
            assemble_input(text(3), grid(m=9), 1, small_config())

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden=30, heads=4)

    def test_masked_positions_shift_past_cls(self):
        masked = apply_wwm_mask(text(4), 0.0, np.random.default_rng(0))
        inp = assemble_input(masked, grid(), 1)
        assert inp.masked_text_positions == [masked.masked_positions[0] + 1]

    def test_negatives_carry_no_reconstruction_targets(self):
        rng = np.random.default_rng(0)
        pos = assemble_input(apply_wwm_mask(text(4), 0.5, rng), apply_patch_mask(grid(), 0.5, rng), 1)
        neg = assemble_input(apply_wwm_mask(text(4), 0.5, rng), apply_patch_mask(grid(1), 0.5, rng), 0)
        b = collate([neg, pos])
        assert set(b.mlm_rows) == {1} and set(b.mpm_rows) == {1}


class TestForward:
    def test_padding_does_not_change_outputs(self):
        model = FashionBERT(small_config(), seed=1, dtype=np.float64)
        short = assemble_input(text(3), grid(0), 1)
        long_ = assemble_input(text(30), grid(1), 1)
        alone = model.encode(collate([short])).data[0]
        padded = model.encode(collate([short, long_]))
        real = np.r_[0:5, 32:48]
        np.testing.assert_allclose(padded.data[0, real], alone, atol=1e-12)

    def test_single_head_attention_by_hand(self):
        cfg = ModelConfig(num_layers=1, hidden=4, heads=1, ff=8, vocab_size=VOCAB, max_text_len=8, num_patches=1, patch_dim=3)
        model = FashionBERT(cfg, seed=2, dtype=np.float64)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 3, 4))
        bias = np.array([0.0, 0.0, -np.inf])[None, None, None, :]
        out = model._attention(Tensor(x), bias, "layer0.attn.").data[0]
        P = {k: v.data for k, v in model.params.items()}
        q = x[0] @ P["layer0.attn.q.w"] + P["layer0.attn.q.b"]
        k = x[0] @ P["layer0.attn.k.w"] + P["layer0.attn.k.b"]
        v = x[0] @ P["layer0.attn.v.w"] + P["layer0.attn.v.b"]
        s = q @ k[:2].T / 2.0
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        expected = (a @ v[:2]) @ P["layer0.attn.o.w"] + P["layer0.attn.o.b"]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_untrained_scores_near_half(self):
        model = FashionBERT(small_config(), seed=0)
        scores = score_pairs(model, [(text(4 + i % 5), grid(i)) for i in range(32)])
        assert abs(scores.mean() - 0.5) < 0.05

    def test_match_score_deterministic(self):
        model = FashionBERT(small_config(), seed=0)
        assert match_score(model, text(6), grid()) == match_score(model, text(6), grid())

    def test_score_is_probability(self):
        model = FashionBERT(small_config(), seed=4)
        s = match_score(model, text(6), grid())
        assert 0.0 < s < 1.0


class TestHeads:
    @pytest.fixture
    def model(self):
        return FashionBERT(small_config(), seed=5, dtype=np.float64)

    @pytest.fixture
    def batch(self):
        rng = np.random.default_rng(6)
        masked_grid = apply_patch_mask(grid(), 0.0, rng)  # exactly one patch
        return collate([assemble_input(apply_wwm_mask(text(6), 0.3, rng), masked_grid, 1)])

    def test_uniform_mlm_is_log_vocab(self, model, batch):
        model.params["mlm.w"].data[:] = 0.0
        loss = model.mlm_loss(model.encode(batch), batch)
        assert loss.item() == pytest.approx(math.log(VOCAB), abs=1e-12)

    def test_mpm_zero_when_prediction_matches(self, model, batch):
        model.params["mpm.w"].data[:] = 0.0
        model.params["mpm.b"].data[:] = batch.mpm_targets[0]
        assert model.mpm_loss(model.encode(batch), batch).item() == pytest.approx(0.0, abs=1e-12)

    def test_tia_at_half_is_log2(self, model, batch):
        model.params["tia.w"].data[:] = 0.0
        loss, probs = model.tia_loss(model.encode(batch), batch)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)
        assert probs.tolist() == [0.5]

    def test_gradients_sampled(self, batch):
        model = FashionBERT(small_config(num_layers=1, init_std=0.1), seed=7, dtype=np.float64)

        def loss():
            mlm, mpm, tia = model.task_losses(batch)
            return mlm + mpm + tia

        report = T.grad_check_blocks(loss, model.params, max_entries=6)
        assert max(report.values()) < 1e-4


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = FashionBERT(small_config(), seed=8)
        save_checkpoint(tmp_path / "m.bin", model)
        back = load_checkpoint(tmp_path / "m.bin")
        assert back.config == model.config
        for name, p in model.params.items():
            assert back.params[name].data.tobytes() == p.data.tobytes()
        assert match_score(back, text(5), grid()) == match_score(model, text(5), grid())

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.bin")
