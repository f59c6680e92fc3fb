"""Acceptance gate: one test per criterion, at the stated tolerances.

Each test prints `ACCEPTANCE <n> <name>: PASS` (or FAIL) so a plain
`pytest tests/test_acceptance.py -v -s` reads as a checklist. Heavy
artifacts (the trained denoiser, fine-tuned encoders) are cached under
tests/.acceptance_cache keyed by their configuration, so reruns are
cheap; delete the directory to retrain from scratch.

Runtime: criteria 1-6 and 10-11 finish in minutes; criterion 7 samples
1800 guided images and criteria 8-9 run nine fine-tuning jobs, together
roughly 1.5-3 hours on two CPU cores from a cold cache.
"""

import math
from pathlib import Path

import numpy as np
import pytest

from blockgen import autodiff as ad
from blockgen import bench as bh
from blockgen import diffusion as df
from blockgen import grammar as gr
from blockgen import losses as ls
from blockgen import render as rd
from blockgen import sets as cs
from blockgen import storage
from blockgen.encoders import AdapterConfig, DualEncoder, EncoderConfig
from blockgen.rng import derive_seed

pytestmark = pytest.mark.acceptance

CFG = gr.DEFAULT_CONFIG
VOCAB = df.Vocabulary.from_grammar(CFG)
CACHE = Path(__file__).parent / ".acceptance_cache"

# experiment scales (documented in the decisions ledger where they
# interpret a criterion)
DIFFUSION_TRAIN = {"n_scenes": 240, "epochs": 60, "batch_size": 8, "lr": 2e-3, "seed": 0}
GUIDANCE_SCENES = 200
GUIDANCE_SEEDS = (0, 1, 2)
FT_SETS = 200
FT_EPOCHS = 10
FT_SEEDS = (0, 1, 2)
FT_KW = dict(lr=1e-2, sets_per_batch=2, lr_schedule="cosine")
FT_ADAPTERS = AdapterConfig(rank=16, alpha=16.0)
FT_LOSS_INIT = dict(init_tau=10.0, init_bias=0.0)
CONTRASTIVE_TAU_INIT = dict(init_tau=0.07, init_bias=0.0)
BENCH_ITEMS_PER_KIND = 200


def _report(number, name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {number} {name}: {status}" + (f" ({detail})" if detail else ""))
    assert passed, f"criterion {number} {name}: {detail}"


# ---------------------------------------------------------------------------
# shared heavy artifacts


def _dataset(m, n_sets=FT_SETS, master_seed=11):
    key = f"dataset-m{m}-n{n_sets}-s{master_seed}"
    out = CACHE / key
    if not (out / "manifest.json").exists():
        cs.build_dataset(out, n_sets=n_sets, m=m, mix=cs.DEFAULT_MIX,
                         master_seed=master_seed,
                         factory=cs.StitchedFactory(32, 32, CFG), grammar_config=CFG)
    return cs.load_dataset(out)[1]


@pytest.fixture(scope="module")
def benchmark():
    out = CACHE / f"benchmark-{BENCH_ITEMS_PER_KIND}"
    if not (out / "benchmark.json").exists():
        train_seeds = {derive_seed(11, "set", i, "scene") for i in range(FT_SETS)}
        items = bh.build_benchmark(BENCH_ITEMS_PER_KIND, rng_seed=202400,
                                   grammar_config=CFG, train_scene_seeds=train_seeds)
        bh.save_benchmark(items, out, CFG)
    return bh.load_benchmark(out)


@pytest.fixture(scope="module")
def denoiser():
    cfg = df.DiffusionConfig()
    key_meta = {"config": cfg.to_json_dict(), "train": DIFFUSION_TRAIN}
    key = storage.sha256_hex(storage.canonical_json_bytes(key_meta))[:16]
    path = CACHE / f"denoiser-{key}.ckpt"
    if path.exists():
        model, _ = df.Denoiser.load(path)
        return model, storage.file_sha256(path)
    CACHE.mkdir(exist_ok=True)
    model = df.Denoiser(cfg, VOCAB, init_seed=derive_seed(DIFFUSION_TRAIN["seed"], "denoiser"))
    seeds = [derive_seed(DIFFUSION_TRAIN["seed"], "train-scene", i)
             for i in range(DIFFUSION_TRAIN["n_scenes"])]
    items = df.build_training_items(seeds, VOCAB, cfg, CFG)
    df.train_denoiser(model, items, epochs=DIFFUSION_TRAIN["epochs"],
                      batch_size=DIFFUSION_TRAIN["batch_size"],
                      lr=DIFFUSION_TRAIN["lr"], seed=DIFFUSION_TRAIN["seed"],
                      log_every=10)
    sha = model.save(path)
    return model, sha


def _finetuned(mode, seed, m=5, epochs=FT_EPOCHS):
    """Fine-tuned encoder + eval-ready overlay, cached on disk."""
    base = DualEncoder(EncoderConfig(), VOCAB, init_seed=seed)
    key = f"ft-{mode.replace('+', '_')}-m{m}-e{epochs}-seed{seed}"
    overlay = CACHE / f"{key}.ckpt"
    if overlay.exists():
        base.load_adapter_overlay(overlay)
        return base
    sets = _dataset(m)
    init = CONTRASTIVE_TAU_INIT if mode == "contrastive" else FT_LOSS_INIT
    params = ls.LossParams(**init)
    bh.finetune(base, sets, loss_mode=mode, epochs=epochs,
                adapter_config=FT_ADAPTERS, seed=seed, grammar_config=CFG,
                loss_params=params, **FT_KW)
    base.save_adapter_overlay(overlay, "acceptance-base", FT_ADAPTERS)
    return base


# ---------------------------------------------------------------------------
# criterion 1: weight-schedule algebra


def test_criterion_1_weight_schedule():
    cfg = df.DiffusionConfig()  # T=200, w_max=1.0
    ok = True
    for t in range(cfg.total_steps + 1):
        w_l, w_g = df.guidance_weights(t, cfg)
        ok &= abs((w_l + w_g) - cfg.w_max) <= 1e-12
        if t <= cfg.threshold_step:
            ok &= (w_l, w_g) == (cfg.w_max, 0.0)
    ok &= df.guidance_weights(cfg.total_steps, cfg) == (0.0, cfg.w_max)
    mid = df.guidance_weights(750, df.DiffusionConfig(total_steps=1000, threshold_step=500))
    ok &= abs(mid[0] - 0.5) <= 1e-12 and abs(mid[1] - 0.5) <= 1e-12
    _report(1, "weight-schedule algebra", ok,
            f"midpoint {mid}, conservation exact over t=0..{cfg.total_steps}")


# ---------------------------------------------------------------------------
# criterion 2: mask locality


def test_criterion_2_mask_locality():
    cfg = df.DiffusionConfig()  # site8 is the 8x8 hidden map
    model = df.Denoiser(cfg, VOCAB, init_seed=3)
    model.params["site8.wout"].data = np.random.default_rng(0).normal(
        size=model.params["site8.wout"].shape) * 0.5
    scene = gr.SceneSpec((
        gr.Entity(0, "cube", "red", "solid", "large", "upper_left"),
        gr.Entity(1, "ball", "blue", "solid", "large", "lower_right"),
    ))
    bundle = df.build_bundle(scene, VOCAB, cfg, CFG, "combined")
    entry = bundle.entries[0]
    mask = entry.masks["site8"]
    assert mask.any() and not mask.all()
    gfeats = model.embed_text(bundle.global_ids)
    cells_data = np.random.default_rng(1).normal(size=(mask.shape[0], cfg.channels[2]))

    txt = ad.parameter(model.embed_text(entry.text_ids).data)
    img = ad.parameter(model.embed_image_patches(entry.image).data)

    def update():
        return model.guided_hidden_update(
            ad.constant(cells_data), "site8", gfeats, [(txt, img)], [mask], 1.0, 0.0)

    max_outside = 0.0
    for cell in np.nonzero(~mask)[0]:
        txt.zero_grad(); img.zero_grad()
        update()[int(cell), :].sum().backward()
        for feats in (txt, img):
            if feats.grad is not None and np.any(feats.grad):
                max_outside = max(max_outside, float(np.abs(feats.grad).max()))
    autodiff_ok = max_outside == 0.0

    # finite differences at one outside cell over a sample of coordinates
    outside = int(np.nonzero(~mask)[0][0])
    rng = np.random.default_rng(2)
    fd_max = 0.0
    base_txt = txt.data.copy()
    for _ in range(10):
        i = tuple(rng.integers(s) for s in txt.data.shape)
        for delta in (1e-4, -1e-4):
            txt.data[i] = base_txt[i] + delta
            val = update().data[outside, :].sum()
            txt.data[i] = base_txt[i]
            if delta > 0:
                hi = val
            else:
                lo = val
        fd_max = max(fd_max, abs(hi - lo) / 2e-4)
    inside_cell = int(np.nonzero(mask)[0][0])
    txt.zero_grad(); img.zero_grad()
    update()[inside_cell, :].sum().backward()
    inside_has_grad = txt.grad is not None and np.any(txt.grad)
    inside_scale = float(np.abs(txt.grad).max()) if inside_has_grad else 0.0
    fd_ok = fd_max <= 1e-3 * max(inside_scale, 1.0)
    _report(2, "mask locality", autodiff_ok and fd_ok and inside_has_grad,
            f"autodiff max |grad| outside = {max_outside}, FD max = {fd_max:.2e}, "
            f"inside grad scale = {inside_scale:.2e}")


# ---------------------------------------------------------------------------
# criterion 3: attention oracle


def test_criterion_3_attention_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 8))
        lt, li = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        d = int(rng.choice([2, 4, 8, 16]))
        dv = int(rng.integers(2, 8))
        q = rng.normal(size=(n, d))
        kt, vt = rng.normal(size=(lt, d)), rng.normal(size=(lt, dv))
        ki, vi = rng.normal(size=(li, d)), rng.normal(size=(li, dv))
        got = df.local_cross_attention(
            ad.constant(q), ad.constant(kt), ad.constant(vt),
            ad.constant(ki), ad.constant(vi)).data
        from test_diffusion import brute_force_attention
        want = brute_force_attention(q, np.concatenate([kt, ki]), np.concatenate([vt, vi]))
        worst = max(worst, float(np.abs(got - want).max()))
    _report(3, "attention oracle", worst <= 1e-6, f"max |diff| = {worst:.2e} over 50 instances")


# ---------------------------------------------------------------------------
# criterion 4: loss oracles


def test_criterion_4_loss_oracles():
    from test_losses import oracle_contrastive, oracle_inter, oracle_intra, oracle_neg

    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        b = int(rng.integers(2, 7))
        S = rng.normal(size=(b, b))
        tau = float(rng.uniform(0.3, 3.0))
        bias = float(rng.normal())
        worst = max(worst, abs(ls.contrastive_loss(S, tau)[0].item()
                               - oracle_contrastive(S.tolist(), tau)))
        L = ls.pair_labels(b)
        worst = max(worst, abs(ls.intra_set_loss(S, L, tau, bias)[0].item()
                               - oracle_intra(S, L, tau, bias)))
        worst = max(worst, abs(ls.inter_set_loss(S, tau, bias)[0].item()
                               - oracle_inter(S, tau, bias)))
        pos, neg = rng.normal(size=b), rng.normal(size=b)
        worst = max(worst, abs(ls.neg_text_loss(pos, neg, tau)[0].item()
                               - oracle_neg(pos, neg, tau)))
        intra = [rng.normal(size=(3, 3)) for _ in range(2)]
        R = rng.normal(size=(2, 2))
        total, _ = ls.total_loss(intra, R, tau, bias, pos_sims=pos, neg_sims=neg)
        expected = (oracle_inter(R, tau, bias)
                    + sum(oracle_intra(s, ls.pair_labels(3), tau, bias) for s in intra)
                    + oracle_neg(pos, neg, tau))
        worst = max(worst, abs(total.item() - expected))
    anchor1 = ls.intra_set_loss(np.zeros((1, 1)), np.ones((1, 1)), 1.0, 0.0)[0].item()
    anchor2 = ls.inter_set_loss(np.zeros((2, 2)), 1.0, 0.0)[0].item()
    anchors_ok = (abs(anchor1 - math.log(2)) < 1e-12
                  and abs(anchor2 - 2 * math.log(2)) < 1e-12)
    _report(4, "loss oracles", worst <= 1e-6 and anchors_ok,
            f"max |diff| = {worst:.2e}; anchors ln2={anchor1:.6f}, 2ln2={anchor2:.6f}")


# ---------------------------------------------------------------------------
# criterion 5: gradient checks


def _max_rel_grad_err(build, arrays):
    tensors = [ad.parameter(a) for a in arrays]
    build(*tensors).backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        num = ad.numeric_gradient(
            lambda arrs: build(*[ad.constant(a) for a in arrs]).item(), arrays, i, eps=1e-4)
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(np.abs(num), 1e-6)
        worst = max(worst, float(np.max(np.abs(got - num) / denom)))
    return worst


def test_criterion_5_gradient_checks():
    rng = np.random.default_rng(21)
    worst = 0.0
    L4 = ls.pair_labels(4)
    pos_c = rng.normal(size=4)
    neg_c = rng.normal(size=4)
    for _ in range(20):
        S = rng.normal(size=(4, 4))
        R = rng.normal(size=(3, 3))
        tau = np.array(rng.uniform(0.5, 2.0))
        bias = np.array(rng.normal())
        pos = rng.normal(size=5)
        neg = rng.normal(size=5)
        worst = max(worst, _max_rel_grad_err(
            lambda s, t: ls.contrastive_loss(s, t)[0], [S, tau]))
        worst = max(worst, _max_rel_grad_err(
            lambda s, t, b: ls.intra_set_loss(s, L4, t, b)[0], [S, tau, bias]))
        worst = max(worst, _max_rel_grad_err(
            lambda r, t, b: ls.inter_set_loss(r, t, b)[0], [R, tau, bias]))
        worst = max(worst, _max_rel_grad_err(
            lambda p, q, t: ls.neg_text_loss(p, q, t)[0], [pos, neg, tau]))
        worst = max(worst, _max_rel_grad_err(
            lambda a, b2, r, t, bb: ls.sets_loss([a, b2], r, t, bb)[0],
            [rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=(2, 2)),
             tau, bias]))
        worst = max(worst, _max_rel_grad_err(
            lambda a, b2, r, t, bb: ls.total_loss(
                [a, b2], r, t, bb, pos_sims=ad.constant(pos_c),
                neg_sims=ad.constant(neg_c))[0],
            [rng.normal(size=(3, 3)), rng.normal(size=(3, 3)),
             rng.normal(size=(2, 2)), tau, bias]))
    _report(5, "gradient checks", worst <= 1e-4,
            f"max relative error = {worst:.2e} over 20 instances per loss")


# ---------------------------------------------------------------------------
# criterion 6: efficiency structure


def test_criterion_6_efficiency_structure():
    n, m = 4, 10
    rng = np.random.default_rng(30)
    intra = [rng.normal(size=(m, m)) for _ in range(n)]
    R = rng.normal(size=(n, n))
    _, report = ls.sets_loss(intra, R, 10.0, 0.0)
    measured = report.similarity_eval_count
    formula = n * m * m + n * (n - 1)
    _, all_pairs_report = ls.contrastive_loss(rng.normal(size=(n * m, n * m)), 1.0)
    all_pairs = all_pairs_report.similarity_eval_count
    ratio = measured / all_pairs
    ok = measured == formula == 412 and all_pairs == 1600 and ratio < 0.26
    _report(6, "efficiency structure", ok,
            f"measured {measured} == {formula}, all-pairs {all_pairs}, ratio {ratio:.4f}")


# ---------------------------------------------------------------------------
# criterion 7: guidance-type ordering


def test_criterion_7_guidance_ordering(denoiser):
    model, _ = denoiser
    results = bh.guidance_accuracy_experiment(
        model, n_scenes=GUIDANCE_SCENES, seeds=list(GUIDANCE_SEEDS),
        conditions=("global_only", "local_text", "combined"), grammar_config=CFG)
    detail = []
    ok = True
    for dim in ("attribute", "position"):
        base = results["global_only"][dim]
        text = results["local_text"][dim]
        comb = results["combined"][dim]
        ok &= comb >= text + 0.03 and text >= base + 0.03
        detail.append(f"{dim}: combined {comb:.3f} > local_text {text:.3f} > baseline {base:.3f}")
    _report(7, "guidance-type ordering", ok, "; ".join(detail))


# ---------------------------------------------------------------------------
# criteria 8 and 9: fine-tuning direction and set-size trend


@pytest.fixture(scope="module")
def finetune_results(benchmark):
    out = {}
    for mode in ("sets+neg", "contrastive"):
        accs, gaps = [], []
        for seed in FT_SEEDS:
            enc = _finetuned(mode, seed)
            result = bh.evaluate(enc, benchmark)
            accs.append(result.mean_binary_accuracy())
            gaps.append(float(np.mean(result.all_gaps())))
        out[mode] = {"acc": float(np.mean(accs)), "gap": float(np.mean(gaps)),
                     "accs": accs}
    accs, gaps = [], []
    for seed in FT_SEEDS:
        enc = DualEncoder(EncoderConfig(), VOCAB, init_seed=seed)
        result = bh.evaluate(enc, benchmark)
        accs.append(result.mean_binary_accuracy())
        gaps.append(float(np.mean(result.all_gaps())))
    out["untrained"] = {"acc": float(np.mean(accs)), "gap": float(np.mean(gaps)),
                        "accs": accs}
    return out


def test_criterion_8_finetune_direction(finetune_results):
    full = finetune_results["sets+neg"]
    base = finetune_results["contrastive"]
    none = finetune_results["untrained"]
    margin_untrained = full["acc"] - none["acc"]
    margin_contrastive = full["acc"] - base["acc"]
    gap_ok = full["gap"] > none["gap"] and full["gap"] > base["gap"]
    ok = margin_untrained >= 0.10 and margin_contrastive >= 0.03 and gap_ok
    _report(8, "fine-tuning direction", ok,
            f"full {full['acc']:.3f} vs untrained {none['acc']:.3f} (+{margin_untrained:.3f}) "
            f"vs contrastive {base['acc']:.3f} (+{margin_contrastive:.3f}); "
            f"gaps {full['gap']:.4f} / {base['gap']:.4f} / {none['gap']:.4f}")


def test_criterion_9_set_size_trend(benchmark):
    accs = {}
    for m in (5, 20):
        per_seed = []
        for seed in FT_SEEDS:
            enc = _finetuned("sets+neg", seed, m=m)
            per_seed.append(bh.evaluate(enc, benchmark).mean_binary_accuracy())
        accs[m] = float(np.mean(per_seed))
    ok = accs[20] >= accs[5]
    _report(9, "set-size trend", ok, f"m=20 {accs[20]:.3f} >= m=5 {accs[5]:.3f}")


# ---------------------------------------------------------------------------
# criterion 10: retention


def test_criterion_10_retention():
    before = bh.category_probe_accuracy(
        DualEncoder(EncoderConfig(), VOCAB, init_seed=FT_SEEDS[0]), seed=5)
    after = bh.category_probe_accuracy(_finetuned("sets+neg", FT_SEEDS[0]), seed=5)
    drop = before - after
    _report(10, "retention", drop <= 0.02,
            f"probe accuracy {before:.3f} -> {after:.3f} (drop {drop:+.3f})")


# ---------------------------------------------------------------------------
# criterion 11: pipeline reproducibility


def test_criterion_11_reproducibility(tmp_path, denoiser):
    model, sha = denoiser
    factory = cs.MixedFactory(
        cs.StitchedFactory(32, 32, CFG),
        cs.DiffusionFactory(model, sha, CFG, num_steps=model.config.total_steps),
        stitched_fraction=0.5,
    )
    kwargs = dict(n_sets=4, m=4, mix=cs.DEFAULT_MIX, master_seed=99, factory=factory,
                  grammar_config=CFG)
    _, h1 = cs.build_dataset(tmp_path / "a", **kwargs)
    manifest, h2 = cs.build_dataset(tmp_path / "b", **kwargs)
    hash_ok = h1 == h2

    records = [p for s in manifest["sets"] for p in s["pairs"]]
    rng = np.random.default_rng(0)
    regen_ok = True
    diffusion_checked = 0
    for idx in rng.choice(len(records), size=5, replace=False):
        rec = records[idx]
        image = cs.regenerate_pair_image(rec, model, CFG)
        regen_ok &= storage.image_content_hash(image) == rec["image_hash"]
        diffusion_checked += rec["provenance"] == cs.DIFFUSION
    for rec in records:
        if rec["provenance"] == cs.DIFFUSION:
            image = cs.regenerate_pair_image(rec, model, CFG)
            regen_ok &= storage.image_content_hash(image) == rec["image_hash"]
            diffusion_checked += 1
            break
    _report(11, "pipeline reproducibility", hash_ok and regen_ok,
            f"manifest sha256 {h1[:12]}... twice; 5+ provenance regenerations "
            f"bit-identical ({diffusion_checked} diffusion)")
