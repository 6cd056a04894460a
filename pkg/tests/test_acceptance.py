"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`.  Every tolerance is
stated inline; nothing is deferred to calibration.
"""

import time
from pathlib import Path

import numpy as np
import pytest

import cgsod.autodiff as ad
from cgsod.autodiff import Tape, Tensor, gradient_relative_error
from cgsod.backbone import (
    SequenceReducedAttention,
    reset_score_multiplies,
    score_multiplies,
)
from cgsod.captioning import CaptionModel, CaptionOutput, Vocabulary
from cgsod.data import (
    RelabelSelection,
    SampleRecord,
    export_relabeled_dataset,
    list_sample_records,
    load_pair,
    load_panoptic_map,
    save_saliency_png,
    selection_to_mask,
)
from cgsod.fusion import CaptionGuidedSaliency, aggregate_attention
from cgsod.metrics import MetricsConfig, e_measure, evaluate_dataset, f_measure, mae, pr_curve, s_measure
from cgsod.training import (
    Adam,
    MapCache,
    Sample,
    evaluate_mae,
    run_schedule,
    structure_loss,
    train_caption_branch,
    train_step,
)

from oracles import e_measure_loops, pr_curve_loops, s_measure_loops

ROOT = Path(__file__).resolve().parent.parent
TWOSHAPES = ROOT / "fixtures" / "twoshapes"
MINI_COCO = ROOT / "fixtures" / "mini_coco"

CAPTION_KW = dict(feature_dim=24, model_dim=24, heads=2, layers=1, max_len=12)


def fixture_samples(root=TWOSHAPES, size=64):
    return [
        Sample(r.image_path.name, *load_pair(r, size), r.caption)
        for r in list_sample_records(root)
    ]


def fixture_model(samples, seed=0, **kwargs):
    vocab = Vocabulary.from_corpus([s.caption for s in samples if s.caption])
    kwargs.setdefault("caption_kwargs", dict(CAPTION_KW))
    return CaptionGuidedSaliency(np.random.default_rng(seed), vocab, **kwargs)


def train_loop(model, samples, steps, guidance, seed=0, lr=2e-3, batch_size=4):
    cache = MapCache(model) if any(guidance) else None
    trainable = [
        (n, p) for n, p in model.named_parameters() if not n.startswith("caption.")
    ]
    opt = Adam(trainable, lr=lr)
    order_rng = np.random.default_rng(seed + 1)
    step = 0
    while step < steps:
        order = order_rng.permutation(len(samples))
        for lo in range(0, len(order), batch_size):
            batch = []
            for idx in order[lo : lo + batch_size]:
                s = samples[idx]
                maps = cache.get(s, s.image, False) if cache else []
                batch.append((s.image, s.mask, maps))
            train_step(model, batch, opt, guidance)
            step += 1
            if step >= steps:
                break
    return evaluate_mae(model, samples, guidance)


def test_gradient_integrity():
    """End-to-end analytic gradients vs central differences, 500+ parameters."""
    started = time.time()
    samples = fixture_samples()
    model = fixture_model(samples, seed=0)
    sample = samples[0]
    image = sample.image
    maps = model.caption_maps(Tensor(image))
    guidance = (True, True, True, True)

    trainable = [
        (n, p) for n, p in model.named_parameters() if not n.startswith("caption.")
    ]

    def loss_value() -> float:
        return structure_loss(
            model.forward_logits(Tensor(image), maps, guidance), sample.mask
        ).total.item()

    for _, p in trainable:
        p.grad = None
    with Tape() as tape:
        loss = structure_loss(
            model.forward_logits(Tensor(image), maps, guidance), sample.mask
        ).total
    tape.backward(loss)

    sizes = np.array([p.size for _, p in trainable])
    total = int(sizes.sum())
    rng = np.random.default_rng(17)
    picks = rng.choice(total, size=512, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    step = 1e-4
    worst = 0.0
    for flat_index in picks:
        which = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        name, param = trainable[which]
        local = int(flat_index - offsets[which])
        analytic = 0.0 if param.grad is None else float(param.grad.reshape(-1)[local])
        base = param.data.copy()
        flat = base.reshape(-1)
        for sign in (1.0, -1.0):
            bumped = flat.copy()
            bumped[local] += sign * step
            param.data = bumped.reshape(base.shape)
            if sign > 0:
                hi = loss_value()
            else:
                lo = loss_value()
        param.data = base
        numeric = (hi - lo) / (2.0 * step)
        err = gradient_relative_error(np.array([analytic]), np.array([numeric]), floor=1e-3)
        assert err < 1e-4, f"{name}[{local}]: analytic {analytic} vs numeric {numeric} (err {err})"
        worst = max(worst, err)
    elapsed = time.time() - started
    assert elapsed < 300.0, f"gradient check took {elapsed:.0f}s (budget 300s)"
    print(
        f"PASS gradient integrity: 512 sampled parameters, max rel err "
        f"{worst:.2e} < 1e-4, {elapsed:.0f}s"
    )


def test_efficient_attention_contract():
    """KV length = N / R exactly; rows sum to 1; score cost scales as 1/R."""
    n_side = 16  # 256 tokens
    for reduction in (4, 16, 64):
        attn = SequenceReducedAttention(np.random.default_rng(0), 8, 2, reduction)
        capture = {}
        x = Tensor(np.random.default_rng(1).standard_normal((n_side * n_side, 8)))
        attn(x, n_side, n_side, capture)
        assert capture["kv_len"] * reduction == n_side * n_side
        sums = capture["weights"].sum(axis=-1)
        assert np.abs(sums - 1.0).max() <= 1e-9

    counts = {}
    for reduction in (1, 4):
        attn = SequenceReducedAttention(np.random.default_rng(0), 8, 2, reduction)
        reset_score_multiplies()
        attn(Tensor(np.random.default_rng(2).standard_normal((64, 8))), 8, 8)
        counts[reduction] = score_multiplies()
    assert counts[1] == 4 * counts[4], counts
    print(
        "PASS efficient attention: KV length = N/R for R in {4,16,64}, rows sum to 1 "
        f"+/- 1e-9, score multiplies ratio R1:R4 = {counts[1]}:{counts[4]} (exactly 4)"
    )


def test_fusion_identity():
    """Zero-initialized projections make guided and unguided paths equal."""
    samples = fixture_samples()
    model = fixture_model(samples, seed=3)
    image = Tensor(samples[1].image)
    on, _ = model.predict(image, (True, True, True, True))
    off, _ = model.predict(image, (False, False, False, False))
    diff = np.abs(on.data - off.data).max()
    assert diff <= 1e-12, diff
    print(f"PASS fusion identity: max |on - off| = {diff:.1e} <= 1e-12")


def test_guidance_scale_invariance():
    """Scaling all word maps by c > 0 leaves guidance and saliency unchanged.

    Exactly representable scalings (powers of two) must be bitwise
    invariant; arbitrary positive factors, whose inputs already round, stay
    within 1e-12 relative.
    """
    samples = fixture_samples()
    model = fixture_model(samples, seed=4)
    for xi in model.xi:  # nonzero projections so fusion contributes
        xi.w.data = np.random.default_rng(5).standard_normal(xi.w.data.shape) * 0.2
    image = Tensor(samples[2].image)
    caption = model.caption.caption_image(image)
    if not caption.attention_maps:
        caption = CaptionOutput(
            [1, 3, 2], [Tensor(np.random.default_rng(6).random((7, 7)))]
        )
    maps = [m.detach() for m in caption.attention_maps]
    base_field = aggregate_attention(maps, 16, 16).data
    base_out = model.forward_logits(image, maps).data
    for c in (2.0**-20, 0.5, 2.0, 1024.0, 2.0**13):
        scaled = [Tensor(m.data * c) for m in maps]
        field = aggregate_attention(scaled, 16, 16).data
        out = model.forward_logits(image, scaled).data
        assert np.array_equal(field, base_field), f"guidance field changed at c={c}"
        assert np.array_equal(out, base_out), f"saliency changed at c={c}"
    for c in (3.0, 0.1, 7.37):
        scaled = [Tensor(m.data * c) for m in maps]
        np.testing.assert_allclose(
            aggregate_attention(scaled, 16, 16).data, base_field, rtol=1e-12
        )
    print(
        "PASS guidance scale invariance: bitwise for dyadic c in {2^-20..2^13}, "
        "rtol 1e-12 for general c"
    )


def test_metrics_oracle():
    """Counting-oracle agreement and reference-implementation agreement."""
    cfg = MetricsConfig()
    rng = np.random.default_rng(99)
    for _ in range(100):
        pred = rng.random((8, 8))
        gt = (rng.random((8, 8)) > 0.6).astype(np.float64)
        assert abs(mae(pred, gt) - np.abs(pred - gt).mean()) <= 1e-9
        precision, recall, _ = pr_curve(pred, gt, cfg)
        exp_p, exp_r = pr_curve_loops(pred, gt, cfg.thresholds, cfg.eps)
        assert np.abs(precision - exp_p).max() <= 1e-9
        assert np.abs(recall - exp_r).max() <= 1e-9
        f = f_measure(precision, recall, cfg.beta_sq, cfg.eps)
        exp_f = f_measure(exp_p, exp_r, cfg.beta_sq, cfg.eps)
        assert np.abs(f - exp_f).max() <= 1e-9

    for _ in range(50):
        pred = rng.random((8, 8))
        gt = (rng.random((8, 8)) > 0.5).astype(np.float64)
        s, _, _ = s_measure(pred, gt, cfg)
        assert abs(s - s_measure_loops(pred, gt)) <= 1e-6
        assert abs(e_measure(pred, gt, cfg) - e_measure_loops(pred, gt, cfg.eps)) <= 1e-6

    gt = np.zeros((8, 8))
    gt[2:6, 2:6] = 1.0
    s_perfect, _, _ = s_measure(gt, gt, cfg)
    assert abs(s_perfect - 1.0) <= 1e-6
    assert abs(e_measure(gt, gt, cfg) - 1.0) <= 1e-6
    print(
        "PASS metrics oracle: 100 pairs vs pixel counting (1e-9), 50 vs S/E "
        "references (1e-6), P=G scores 1"
    )


def test_overfit_smoke():
    """Training fits the 8-sample fixture; guidance does not hurt."""
    started = time.time()
    samples = fixture_samples()
    steps = 400  # within the 2000-step budget

    model_off = fixture_model(samples, seed=0)
    mae_off = train_loop(model_off, samples, steps, (False,) * 4, seed=0)

    model_on = fixture_model(samples, seed=0)
    train_caption_branch(model_on, samples, steps=300, lr=1e-2, seed=0)
    mae_on = train_loop(model_on, samples, steps, (True,) * 4, seed=0)

    elapsed = time.time() - started
    assert mae_off < 0.05, f"guidance-off training MAE {mae_off:.4f} >= 0.05"
    assert mae_on < 0.05, f"guidance-on training MAE {mae_on:.4f} >= 0.05"
    assert mae_on <= mae_off, f"guidance hurt training: {mae_on:.5f} > {mae_off:.5f}"
    assert elapsed < 1800.0, f"overfit run took {elapsed:.0f}s (budget 1800s)"
    print(
        f"PASS overfit smoke: {steps} steps, MAE off {mae_off:.4f} / on {mae_on:.4f} "
        f"(both < 0.05, on <= off), {elapsed:.0f}s"
    )


def test_caption_contract():
    """Termination, map distributions, and exact overfit reproduction."""
    vocab = Vocabulary(["cat", "dog", "bird", "runs"])
    image = np.random.default_rng(1).standard_normal((3, 32, 32)) * 0.5
    checked_maps = 0
    for seed in range(1000):
        model = CaptionModel(
            np.random.default_rng(seed), vocab,
            feature_dim=8, model_dim=8, heads=2, layers=1, max_len=6,
        )
        out = model.caption_image(Tensor(image))
        assert len(out.tokens) <= model.max_len
        assert out.tokens[0] == Vocabulary.SOS and out.tokens[-1] == Vocabulary.EOS
        for m in out.attention_maps:
            assert abs(m.data.sum() - 1.0) <= 1e-6
            assert np.all(m.data >= 0.0)
            checked_maps += 1

    corpus = "a red circle and a blue square"
    vocab2 = Vocabulary.from_corpus([corpus])
    model = CaptionModel(
        np.random.default_rng(5), vocab2,
        feature_dim=16, model_dim=16, heads=2, layers=1, max_len=10,
    )
    pair_image = np.random.default_rng(9).standard_normal((3, 32, 32)) * 0.5
    gold = vocab2.wrap(vocab2.encode(corpus))
    opt = Adam(model.named_parameters(), lr=5e-3)
    for _ in range(150):
        opt.zero_grad()
        with Tape() as tape:
            loss = model.caption_loss(model.encode(Tensor(pair_image)), gold)
        tape.backward(loss)
        opt.step()
    out = model.caption_image(Tensor(pair_image))
    assert out.tokens == gold, vocab2.decode(out.tokens)
    print(
        f"PASS caption contract: 1000 random models terminated <= max_len, "
        f"{checked_maps} maps summed to 1 +/- 1e-6, overfit caption reproduced exactly"
    )


def test_relabel_pipeline(tmp_path):
    """Decode -> select -> export -> reload is pixel-exact on the fixture."""
    seg = load_panoptic_map(MINI_COCO, "0000.png")
    nonvoid = sorted(seg.table)
    sel = RelabelSelection("0000.png", frozenset(nonvoid[:2]), "acc", "2024-01-01T00:00:00+00:00")
    expected = selection_to_mask(seg, sel)
    rows, unresolved = export_relabeled_dataset([sel], MINI_COCO, tmp_path)
    assert unresolved == []
    mask_path = tmp_path / rows[0]["mask"]
    record = SampleRecord(MINI_COCO / "images" / "0000.png", mask_path)
    _, loaded = load_pair(record, 64)
    assert np.array_equal(loaded, expected)

    empty = RelabelSelection("0001.png", frozenset(), "acc", "2024-01-01T00:00:00+00:00")
    seg1 = load_panoptic_map(MINI_COCO, "0001.png")
    assert selection_to_mask(seg1, empty).sum() == 0.0
    rows, _ = export_relabeled_dataset([empty], MINI_COCO, tmp_path / "empty")
    _, zero_mask = load_pair(
        SampleRecord(MINI_COCO / "images" / "0001.png", tmp_path / "empty" / rows[0]["mask"]),
        64,
    )
    assert zero_mask.sum() == 0.0
    print("PASS relabel pipeline: export round-trips pixel-exact, empty selection is all-zero")


def test_determinism(tmp_path):
    """Two identically seeded train+eval runs leave byte-identical artifacts."""
    def run(out_dir: Path) -> dict[str, bytes]:
        samples = fixture_samples(MINI_COCO)[:4]
        model = fixture_model(samples, seed=11)
        run_schedule(
            model,
            [],
            samples,
            out_dir,
            lr=1e-3,
            pretrain_epochs=0,
            finetune_epochs=2,
            batch_size=2,
            seed=11,
            guidance=(True, True, True, True),
            caption_steps=40,
        )
        pred_dir = out_dir / "preds"
        gt_dir = out_dir / "gts"
        pred_dir.mkdir()
        gt_dir.mkdir()
        for s in samples:
            prob, _ = model.predict(Tensor(s.image))
            save_saliency_png(pred_dir / s.name, prob.data)
            save_saliency_png(gt_dir / s.name, s.mask)
        report = evaluate_dataset(pred_dir, gt_dir, MetricsConfig())
        report.write(out_dir / "report")
        blobs = {}
        for path in sorted(out_dir.rglob("*")):
            if path.is_file() and path.suffix in {".csv", ".txt", ".png", ".sdgt"}:
                blobs[str(path.relative_to(out_dir))] = path.read_bytes()
        return blobs

    first = run(tmp_path / "run1")
    second = run(tmp_path / "run2")
    assert first.keys() == second.keys()
    differing = [name for name in first if first[name] != second[name]]
    assert not differing, f"artifacts differ: {differing}"
    print(
        f"PASS determinism: {len(first)} artifacts (logs, checkpoints, reports, "
        "predictions) byte-identical across two seeded runs"
    )
