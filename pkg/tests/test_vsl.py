import numpy as np
import pytest

from fashionbert.image import PatchGrid
from fashionbert.model import FashionBERT, ModelConfig
from fashionbert.text import TokenSequence
from fashionbert.vsl import (
    BENCH_FIELDS,
    attention_cells,
    bench_latency,
    padded_assemble,
    vsl_assemble,
    vsl_score,
    write_bench_csv,
)

CFG = ModelConfig(num_layers=2, hidden=16, heads=2, ff=32, vocab_size=30, max_text_len=64, num_patches=16)


def text(n, seed=0):
    ids = np.random.default_rng(seed).integers(5, 30, size=n).tolist()
    return TokenSequence(ids, [(i, i + 1) for i in range(n)])


def grid(seed=0):
    return PatchGrid(4, np.random.default_rng(seed).random((16, 54)))


def test_width_follows_longest_text():
    b = vsl_assemble([text(3), text(10)], [grid(0), grid(1)], CFG)
    assert b.width == 28
    assert b.lengths.tolist() == [21, 28]


def test_single_example_has_no_padding():
    b = vsl_assemble([text(7)], [grid()], CFG)
    assert b.width == b.lengths[0] and b.batch.attention_mask.all()


def test_padded_width_is_global():
    b = padded_assemble([text(3)], [grid()], CFG)
    assert b.width == 80
    assert attention_cells(b) == 80 * 80


def test_vsl_matches_padded():
    model = FashionBERT(CFG, seed=0)
    rng = np.random.default_rng(1)
    texts = [text(int(n), s) for s, n in enumerate(rng.integers(3, 41, size=24))]
    grids = [grid(s) for s in range(24)]
    a = vsl_score(model, vsl_assemble(texts, grids, CFG))
    b = model.score(padded_assemble(texts, grids, CFG))
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_batch_order_is_irrelevant():
    model = FashionBERT(CFG, seed=2, dtype=np.float64)
    texts = [text(n, n) for n in (4, 9, 15, 2)]
    grids = [grid(s) for s in range(4)]
    perm = [2, 0, 3, 1]
    a = vsl_score(model, vsl_assemble(texts, grids, CFG, np.float64))
    b = vsl_score(model, vsl_assemble([texts[i] for i in perm], [grids[i] for i in perm], CFG, np.float64))
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_mismatched_inputs():
    with pytest.raises(ValueError):
        vsl_assemble([text(3)], [grid(), grid()], CFG)


class TestBench:
    def test_single_repetition(self):
        model = FashionBERT(CFG, seed=0)
        s = bench_latency(model, [(text(5), grid())], "vsl", repetitions=1, warmup=0)
        assert s.mean_ms == s.p50_ms == s.p95_ms > 0

    def test_bad_arguments(self):
        model = FashionBERT(CFG, seed=0)
        with pytest.raises(ValueError):
            bench_latency(model, [(text(5), grid())], "vsl", repetitions=0)
        with pytest.raises(ValueError):
            bench_latency(model, [(text(5), grid())], "fast")

    def test_csv(self, tmp_path):
        model = FashionBERT(CFG, seed=0)
        pairs = [(text(4, s), grid(s)) for s in range(4)]
        stats = [bench_latency(model, pairs, m, repetitions=2, batch_size=2, warmup=1) for m in ("padded", "vsl")]
        write_bench_csv(tmp_path / "bench.csv", stats)
        lines = (tmp_path / "bench.csv").read_text().splitlines()
        assert lines[0] == ",".join(BENCH_FIELDS)
        assert [ln.split(",")[0] for ln in lines[1:]] == ["padded", "vsl"]
