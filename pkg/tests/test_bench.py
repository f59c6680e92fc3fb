"""Benchmark construction, scoring, fine-tune drivers, probes, reports."""

import numpy as np
import pytest

from blockgen import bench as bh
from blockgen import diffusion as df
from blockgen import grammar as gr
from blockgen import report as rp
from blockgen import sets as cs
from blockgen import storage
from blockgen.encoders import AdapterConfig, DualEncoder, EncoderConfig
from blockgen.errors import DisjointnessError

CFG = gr.DEFAULT_CONFIG
VOCAB = df.Vocabulary.from_grammar(CFG)


@pytest.fixture(scope="module")
def benchmark():
    return bh.build_benchmark(12, rng_seed=999, grammar_config=CFG)


@pytest.fixture(scope="module")
def small_sets():
    factory = cs.StitchedFactory(32, 32, CFG)
    return [
        cs.build_set(gr.generate_scene(2000 + i, CFG, n_entities=2), 4, cs.DEFAULT_MIX,
                     3000 + i, factory, CFG)
        for i in range(12)
    ]


def test_benchmark_items_well_formed(benchmark):
    kinds = {k: 0 for k in bh.ALL_KINDS}
    for item in benchmark:
        kinds[item.kind] += 1
        if item.kind in bh.BINARY_KINDS:
            assert len(item.images) == 1 and len(item.captions) == 2
        else:
            assert len(item.images) == 2 and len(item.captions) == 2
            from collections import Counter
            assert Counter(item.captions[0]) == Counter(item.captions[1])
        a = gr.canonical_form(item.scenes[0], CFG)
        b = gr.canonical_form(item.scenes[1], CFG)
        assert a != b
    assert all(v == 12 for v in kinds.values())


def test_oracle_scorer_perfect_accuracy(benchmark):
    result = bh.evaluate(bh.OracleScorer(CFG), benchmark)
    for kind, acc in result.per_kind_accuracy.items():
        assert acc == 1.0, (kind, acc)
    assert result.text_score == result.image_score == result.group_score == 1.0
    assert min(result.all_gaps()) > 0


def test_random_scorer_chance_level():
    items = bh.build_benchmark(200, rng_seed=31, grammar_config=CFG)
    result = bh.evaluate(bh.RandomScorer(seed=5), items)
    # 99% binomial CI around 0.5 over 600 binary items
    n = sum(result.counts[k] for k in bh.BINARY_KINDS)
    half_width = 2.576 * np.sqrt(0.25 / n)
    pooled = np.average(
        [result.per_kind_accuracy[k] for k in bh.BINARY_KINDS],
        weights=[result.counts[k] for k in bh.BINARY_KINDS],
    )
    assert abs(pooled - 0.5) < half_width + 0.05
    assert result.group_score <= min(result.text_score, result.image_score)


def test_group_never_exceeds_text_or_image(benchmark):
    for seed in range(5):
        result = bh.evaluate(bh.RandomScorer(seed=seed), benchmark)
        assert result.group_score <= min(result.text_score, result.image_score)


def test_benchmark_deterministic(benchmark):
    again = bh.build_benchmark(12, rng_seed=999, grammar_config=CFG)
    assert [i.scene_seed for i in again] == [i.scene_seed for i in benchmark]


def test_benchmark_disjointness_error():
    items = bh.build_benchmark(1, rng_seed=4, grammar_config=CFG)
    poisoned = {items[0].scene_seed}
    with pytest.raises(DisjointnessError):
        bh.build_benchmark(1, rng_seed=4, grammar_config=CFG, train_scene_seeds=poisoned)


def test_benchmark_save_load_round_trip(tmp_path, benchmark):
    bh.save_benchmark(benchmark[:8], tmp_path / "bench", CFG)
    loaded = bh.load_benchmark(tmp_path / "bench")
    assert len(loaded) == 8
    for a, b in zip(benchmark[:8], loaded):
        assert a.kind == b.kind and a.captions == b.captions
        for ia, ib in zip(a.images, b.images):
            np.testing.assert_array_equal(ia.astype(np.float32), ib.astype(np.float32))
    result_a = bh.evaluate(bh.OracleScorer(CFG), loaded)
    assert result_a.per_kind_accuracy


def test_eval_result_json_round_trip(benchmark):
    result = bh.evaluate(bh.RandomScorer(0), benchmark)
    blob = storage.canonical_json_bytes(result.to_json_dict())
    back = bh.EvalResult.from_json_dict(__import__("json").loads(blob))
    assert storage.canonical_json_bytes(back.to_json_dict()) == blob


def test_finetune_zero_epochs_leaves_encoder_unchanged(small_sets, benchmark):
    enc = DualEncoder(EncoderConfig(), VOCAB, init_seed=1)
    img = small_sets[0].real.image
    cap = small_sets[0].real.caption
    before = enc.similarity(img, cap)
    log = bh.finetune(enc, small_sets, loss_mode="sets+neg", epochs=0, seed=0)
    assert log == []
    assert enc.similarity(img, cap) == before


def test_finetune_runs_and_logs_eval_counts(small_sets):
    enc = DualEncoder(EncoderConfig(), VOCAB, init_seed=1)
    log = bh.finetune(enc, small_sets, loss_mode="sets+neg", epochs=1,
                      sets_per_batch=4, lr=1e-3, seed=0)
    assert len(log) == 3
    n, m = 4, 4
    for entry in log:
        base = n * m * m + n * (n - 1)
        assert entry["similarity_eval_count"] >= base
        assert entry["tau"] > 0
        assert np.isfinite(entry["value"])


def test_finetune_contrastive_eval_count_is_all_pairs(small_sets):
    enc = DualEncoder(EncoderConfig(), VOCAB, init_seed=1)
    log = bh.finetune(enc, small_sets, loss_mode="contrastive", epochs=1,
                      sets_per_batch=4, seed=0)
    assert log[0]["similarity_eval_count"] == (4 * 4) ** 2


def test_finetune_deterministic(small_sets):
    logs = []
    sims = []
    for _ in range(2):
        enc = DualEncoder(EncoderConfig(), VOCAB, init_seed=1)
        logs.append(bh.finetune(enc, small_sets, loss_mode="sets", epochs=1,
                                sets_per_batch=4, seed=7))
        sims.append(enc.similarity(small_sets[0].real.image, small_sets[0].real.caption))
    assert logs[0] == logs[1]
    assert sims[0] == sims[1]


def test_category_probe_beats_chance_and_is_stable():
    enc = DualEncoder(EncoderConfig(), VOCAB, init_seed=2)
    acc = bh.category_probe_accuracy(enc, seed=3, n_train_per_cat=8, n_test_per_cat=4)
    assert acc > 1.0 / len(CFG.categories) + 0.2
    acc2 = bh.category_probe_accuracy(enc, seed=3, n_train_per_cat=8, n_test_per_cat=4)
    assert acc == acc2


def test_run_ablation_single_cell(small_sets, benchmark):
    rows = bh.run_ablation(
        cells=[{"name": "sets", "loss_mode": "sets", "dataset": "d", "epochs": 1}],
        seeds=[0, 1],
        datasets={"d": small_sets},
        benchmark=benchmark[:12],
        encoder_factory=lambda seed: DualEncoder(EncoderConfig(), VOCAB, init_seed=seed),
        grammar_config=CFG,
    )
    assert len(rows) == 1
    row = rows[0]
    assert row["errors"] == []
    assert "mean_binary_mean" in row and "mean_binary_std" in row
    assert row["eval_count_per_batch"] == 8 * 16 + 8 * 7


def test_run_ablation_records_partial_failures(small_sets, benchmark):
    rows = bh.run_ablation(
        cells=[{"name": "broken", "loss_mode": "nope", "dataset": "d"}],
        seeds=[0],
        datasets={"d": small_sets},
        benchmark=benchmark[:4],
        encoder_factory=lambda seed: DualEncoder(EncoderConfig(), VOCAB, init_seed=seed),
    )
    assert rows[0]["errors"]


def test_report_outputs_and_validation(tmp_path):
    gaps = {"before": [0.01, -0.02, 0.05, 0.0], "after": [0.1, 0.2, 0.15, 0.3]}
    summary = rp.score_gap_histogram(gaps, tmp_path / "gaps.png")
    for name, seq in gaps.items():
        assert sum(summary["bin_counts"][name]) == len(seq)
    with pytest.raises(ValueError):
        rp.score_gap_histogram({"empty": []}, tmp_path / "bad.png")

    rows = [{"name": "a", "loss_mode": "sets", "dataset": "d", "m": 4,
             "eval_count_per_batch": 100, "errors": [],
             "mean_binary_mean": 0.7, "mean_binary_std": 0.02}]
    written = rp.emit_report(
        {"gaps_by_model": gaps, "ablation": rows, "note": "test"},
        tmp_path / "report", diffusion_config=df.DiffusionConfig(),
    )
    report = storage.read_json(written["report_json"])
    assert report["note"] == "test"
    assert (tmp_path / "report" / "weight_schedule.png").exists()
    assert (tmp_path / "report" / "ablation.csv").exists()
    again = storage.read_json(written["report_json"])
    assert storage.canonical_json_bytes(again) == storage.canonical_json_bytes(report)
