"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria 1-6 are self-contained property checks. Criteria 7-9 share one
end-to-end experiment (three backbones x three seeds on the 20k/2k oracle
world) whose runs are cached under CAPSVQA_ACCEPTANCE_DIR (default
.acceptance/ in the repo root) so reruns reuse finished checkpoints.
"""

import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest
import torch

import capsvqa.world as world
from capsvqa.capsules import CapsuleField, EmRouting, MaskHead, hard_mask, soft_mask
from capsvqa.evalrun import evaluate_checkpoint, write_report
from capsvqa.gradcheck import gradcheck_component
from capsvqa.grounding import active_cells, match, postprocess, prf
from capsvqa.train import TrainConfig, train

ACCEPT_DIR = Path(os.environ.get("CAPSVQA_ACCEPTANCE_DIR", Path(__file__).parent.parent / ".acceptance"))
SEEDS = (0, 1, 2)
ALPHAS = (1.0, 3.0, 5.0, 7.0)
EPOCHS = int(os.environ.get("CAPSVQA_ACCEPTANCE_EPOCHS", "40"))


def _report(name: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


# --- criterion 1 -------------------------------------------------------------


def test_criterion_1_mask_correctness():
    t0 = time.monotonic()
    torch.manual_seed(0)
    gen = np.random.default_rng(0)
    n, d, c = 10_000, 64, 8
    head = MaskHead(d, c).double()
    queries = torch.tensor(gen.standard_normal((n, d)) * 3.0)
    logits = head(queries)
    field = CapsuleField(
        torch.tensor(gen.standard_normal((n, 1, 1, c, 4, 4))),
        torch.tensor(gen.uniform(0, 1, (n, 1, 1, c))),
    )
    _, soft_w = soft_mask(logits, field)
    _, hard_w = hard_mask(logits, field)
    sums = soft_w.weights.sum(dim=-1)
    ok = (
        bool((soft_w.weights >= 0).all())
        and float((sums - 1).abs().max()) <= 1e-6
        and bool((hard_w.weights.sum(dim=-1) == 1).all())
        and bool((hard_w.weights.argmax(dim=-1) == soft_w.weights.argmax(dim=-1)).all())
        and bool(((hard_w.weights == 0) | (hard_w.weights == 1)).all())
    )
    elapsed = time.monotonic() - t0
    _report(
        "criterion 1 (mask correctness)",
        ok and elapsed < 10,
        f"10k queries, max |sum-1|={float((sums - 1).abs().max()):.2e}, {elapsed:.1f}s",
    )


# --- criterion 2 -------------------------------------------------------------


def test_criterion_2_routing_invariants():
    t0 = time.monotonic()
    gen = np.random.default_rng(1)
    worst_perm = 0.0
    worst_agree = 0.0
    acts_ok = True
    for c1, c2 in itertools.product((1, 2, 3, 4), (2, 3, 4)):
        torch.manual_seed(c1 * 10 + c2)
        er = EmRouting(c1, c2, n_iter=3).double()
        with torch.no_grad():
            er.beta_a.copy_(torch.tensor(gen.standard_normal(c2)))
            er.beta_u.copy_(torch.tensor(gen.standard_normal(c2) * 0.3))
        field = CapsuleField(
            torch.tensor(gen.standard_normal((2, 2, 2, c1, 4, 4))),
            torch.tensor(gen.uniform(0.05, 0.95, (2, 2, 2, c1))),
        )
        out = er(field)
        acts_ok &= bool((out.activations > 0).all() and (out.activations < 1).all())
        for perm in itertools.permutations(range(c2)):
            p = torch.tensor(perm)
            er2 = EmRouting(c1, c2, n_iter=3).double()
            with torch.no_grad():
                er2.transforms.copy_(er.transforms[:, p])
                er2.beta_a.copy_(er.beta_a[p])
                er2.beta_u.copy_(er.beta_u[p])
            out2 = er2(field)
            worst_perm = max(
                worst_perm,
                float((out2.poses - out.poses[:, :, :, p]).abs().max()),
                float((out2.activations - out.activations[:, :, :, p]).abs().max()),
            )
    # agreement fixed point across iteration counts
    base = torch.tensor(gen.standard_normal((4, 4)))
    transform = torch.tensor(gen.standard_normal((4, 4)))
    for n_iter in (1, 2, 3, 4):
        er = EmRouting(2, 1, n_iter=n_iter).double()
        with torch.no_grad():
            er.transforms.copy_(transform.expand(2, 1, 4, 4))
        out = er(
            CapsuleField(
                base.expand(1, 1, 1, 2, 4, 4).clone(),
                torch.full((1, 1, 1, 2), 0.6, dtype=torch.float64),
            )
        )
        worst_agree = max(worst_agree, float((out.poses.reshape(4, 4) - base @ transform).abs().max()))
    elapsed = time.monotonic() - t0
    ok = acts_ok and worst_perm <= 1e-6 and worst_agree <= 1e-6 and elapsed < 30
    _report(
        "criterion 2 (routing invariants)",
        ok,
        f"activations in (0,1): {acts_ok}, permutation err {worst_perm:.2e}, "
        f"agreement err {worst_agree:.2e}, {elapsed:.1f}s",
    )


# --- criterion 3 -------------------------------------------------------------


def test_criterion_3_gradient_suite():
    t0 = time.monotonic()
    tolerances = {
        "query_step": 1e-4,
        "primary_capsules": 1e-4,
        "soft_mask": 1e-4,
        "mac_cell": 1e-4,
        "classify": 1e-4,
        "masked_conv_baseline": 1e-4,
        "em_routing": 1e-3,
    }
    details = []
    ok = True
    for component, tol in tolerances.items():
        result = gradcheck_component(component, seed=0)
        details.append(f"{component}={result.max_rel_error:.1e}")
        ok &= result.max_rel_error <= tol
    elapsed = time.monotonic() - t0
    _report(
        "criterion 3 (gradient suite)",
        ok and elapsed < 300,
        ", ".join(details) + f", {elapsed:.1f}s",
    )


# --- criterion 4 -------------------------------------------------------------


def test_criterion_4_metric_oracle_equivalence():
    from test_grounding import pixel_match, random_boxes

    t0 = time.monotonic()
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(500):
        dets = random_boxes(rng)
        gts = random_boxes(rng)
        for criterion in ("overlap", "iou"):
            counts = match(dets, gts, criterion, tau=0.5)
            if (counts.tp, counts.fp, counts.fn) != pixel_match(dets, gts, criterion, 0.5):
                mismatches += 1
    det, gt = (0, 0, 4, 2), (0, 0, 2, 2)
    worked = True
    for criterion in ("overlap", "iou"):
        counts = match([det], [gt], criterion, tau=0.5)
        worked &= (counts.tp, counts.fp, counts.fn) == (1, 0, 0)
    p, r, f1 = prf(match([det], [gt], "overlap", tau=0.5).__class__(tp=1, fp=0, fn=1))
    worked &= (p, r) == (1.0, 0.5) and abs(f1 - 2 / 3) < 1e-12
    elapsed = time.monotonic() - t0
    _report(
        "criterion 4 (metric oracle equivalence)",
        mismatches == 0 and worked and elapsed < 60,
        f"500 instances x 2 criteria, {mismatches} mismatches, worked examples ok={worked}, {elapsed:.1f}s",
    )


# --- criterion 5 -------------------------------------------------------------


def test_criterion_5_dataset_validator():
    t0 = time.monotonic()
    ds = world.gen_dataset(1000, 10, seed=0)
    n, problems = world.validate_dataset(ds)
    n_empty = sum(1 for q in ds.questions if not q.grounding_ids)
    flagged = all(
        (len(q.grounding_ids) == 0) == (len(q.grounding_boxes) == 0) for q in ds.questions
    )
    elapsed = time.monotonic() - t0
    ok = n == 10_000 and not problems and n_empty > 0 and flagged and elapsed < 120
    _report(
        "criterion 5 (dataset validator)",
        ok,
        f"{n} QA validated, {len(problems)} problems, {n_empty} empty-grounding, {elapsed:.1f}s",
    )


# --- criterion 6 -------------------------------------------------------------


def test_criterion_6_postprocess_behavior():
    t0 = time.monotonic()
    rng = np.random.default_rng(6)
    monotone = True
    for _ in range(200):
        a = rng.random((8, 8))
        a /= a.sum()
        alphas = np.sort(rng.uniform(1.0, 16.0, size=5))
        prev = active_cells(a, float(alphas[0]))
        for alpha in alphas[1:]:
            cur = active_cells(a, float(alpha))
            monotone &= bool(np.all(cur <= prev))
            prev = cur
    uniform = np.full((8, 8), 1 / 64)
    uniform_empty = all(
        postprocess(uniform, alpha=float(alpha)).boxes == [] for alpha in np.arange(3.0, 65.0)
    )
    onehot = np.zeros((8, 8))
    onehot[2, 6] = 1.0
    onehot_single = all(
        postprocess(onehot, alpha=float(alpha)).boxes == [(48, 16, 8, 8)]
        for alpha in range(1, 65)
    )
    elapsed = time.monotonic() - t0
    ok = monotone and uniform_empty and onehot_single and elapsed < 10
    _report(
        "criterion 6 (post-processing behavior)",
        ok,
        f"monotone={monotone}, uniform empty for alpha>=3: {uniform_empty}, "
        f"one-hot single box: {onehot_single}, {elapsed:.1f}s",
    )


# --- criteria 7-9: shared end-to-end experiment ------------------------------

RUN_SPECS = [
    (mask_mode, seed) for mask_mode in ("soft", "conv", "none") for seed in SEEDS
]


def _run_config(mask_mode: str, seed: int) -> TrainConfig:
    return TrainConfig(
        mode="mac",
        steps=4,
        num_caps=8,
        d=64,
        mask_mode=mask_mode,
        train_scenes=2000,
        val_scenes=200,
        qa_per_scene=10,
        epochs=EPOCHS,
        learning_rate=1e-3,
        lr_decay_epoch=max(EPOCHS - 8, 1) if EPOCHS > 8 else 0,
        data_seed=0,
        init_seed=seed,
        shuffle_seed=seed,
        feature_mode="oracle",
    )


def _train_worker(spec):
    mask_mode, seed = spec
    torch.set_num_threads(1)
    run_dir = ACCEPT_DIR / f"{mask_mode}_seed{seed}"
    done = run_dir / "train_summary.json"
    if done.exists() and (run_dir / "best.ckpt").exists():
        return json.loads(done.read_text())
    t0 = time.monotonic()
    summary = train(_run_config(mask_mode, seed), run_dir)
    summary["train_seconds"] = time.monotonic() - t0
    done.write_text(json.dumps({k: v for k, v in summary.items() if k != "history"}))
    return json.loads(done.read_text())


def _eval_run(mask_mode: str, seed: int) -> dict:
    run_dir = ACCEPT_DIR / f"{mask_mode}_seed{seed}"
    cached = run_dir / "eval_report.json"
    if cached.exists():
        return json.loads(cached.read_text())
    torch.set_num_threads(2)
    report = evaluate_checkpoint(run_dir / "best.ckpt", alphas=ALPHAS)
    write_report(report, cached)
    return json.loads(cached.read_text())


@pytest.fixture(scope="session")
def experiment():
    ACCEPT_DIR.mkdir(parents=True, exist_ok=True)
    pending = [
        spec
        for spec in RUN_SPECS
        if not (ACCEPT_DIR / f"{spec[0]}_seed{spec[1]}" / "train_summary.json").exists()
    ]
    summaries = {}
    if pending:
        with ProcessPoolExecutor(max_workers=2) as pool:
            for spec, result in zip(pending, pool.map(_train_worker, pending)):
                summaries[spec] = result
    for spec in RUN_SPECS:
        run_dir = ACCEPT_DIR / f"{spec[0]}_seed{spec[1]}"
        summaries[spec] = json.loads((run_dir / "train_summary.json").read_text())
    reports = {spec: _eval_run(*spec) for spec in RUN_SPECS}
    return summaries, reports


def _best_alpha_block(report: dict, criterion: str = "iou") -> dict:
    best_key = max(
        report["alphas"],
        key=lambda k: report["alphas"][k]["metrics"][criterion]["best"]["f1"],
    )
    block = dict(report["alphas"][best_key])
    block["alpha_selected"] = float(best_key)
    return block


def test_criterion_7_directional_reproduction(experiment):
    summaries, reports = experiment
    soft_accs, soft_f1s, conv_f1s, seconds = [], [], [], []
    for seed in SEEDS:
        soft = reports[("soft", seed)]
        conv = reports[("conv", seed)]
        soft_accs.append(soft["answer_accuracy"])
        soft_f1s.append(_best_alpha_block(soft)["metrics"]["iou"]["best"]["f1"])
        conv_f1s.append(_best_alpha_block(conv)["metrics"]["iou"]["best"]["f1"])
        seconds.append(summaries[("soft", seed)].get("train_seconds", 0.0))
    acc_med = float(np.median(soft_accs))
    gap = float(np.median(soft_f1s) - np.median(conv_f1s))
    runtime_ok = all(s <= 3600 for s in seconds)
    ok = acc_med >= 0.90 and gap >= 0.05 and runtime_ok
    _report(
        "criterion 7 (directional reproduction)",
        ok,
        f"capsule acc median {acc_med:.4f} (seeds {[round(a, 4) for a in soft_accs]}), "
        f"IOU-F1 capsule {np.median(soft_f1s):.4f} vs masked-conv {np.median(conv_f1s):.4f} "
        f"(gap {gap * 100:.2f} pts), train times {[int(s) for s in seconds]}s",
    )


def test_criterion_8_structural_metric_dominance(experiment):
    _, reports = experiment
    violations = []
    for spec, report in reports.items():
        for alpha_key, block in report["alphas"].items():
            m = block["metrics"]
            if m["overlap"]["best"]["f1"] < m["iou"]["best"]["f1"] - 1e-12:
                violations.append((spec, alpha_key, "overlap<iou best"))
            if m["overlap"]["last"]["f1"] < m["iou"]["last"]["f1"] - 1e-12:
                violations.append((spec, alpha_key, "overlap<iou last"))
            for criterion in ("overlap", "iou"):
                if m[criterion]["best"]["f1"] < m[criterion]["last"]["f1"] - 1e-12:
                    violations.append((spec, alpha_key, f"best<last {criterion}"))
    _report(
        "criterion 8 (structural metric dominance)",
        not violations,
        f"checked {len(reports)} models x {len(ALPHAS)} alphas; violations: {violations or 'none'}",
    )


def test_criterion_9_background_capsule_diagnostic(experiment):
    from capsvqa.diagnostics import diagnose_samples
    from capsvqa.evalrun import collect_traces
    from capsvqa.train import load_checkpoint, load_splits, prepare_data

    _, reports = experiment
    summaries = {}
    for mask_mode in ("soft", "none"):
        per_seed = []
        for seed in SEEDS:
            run_dir = ACCEPT_DIR / f"{mask_mode}_seed{seed}"
            alpha = _best_alpha_block(reports[(mask_mode, seed)])["alpha_selected"]
            model, cfg, vocab, _ = load_checkpoint(run_dir / "best.ckpt")
            _, val_ds = load_splits(cfg)
            data = prepare_data(val_ds, vocab, cfg.feature_mode, cfg.mode, cfg.steps)
            samples = collect_traces(model, data)
            result = diagnose_samples(samples, alpha=alpha)
            per_seed.append(result["summary"])
        summaries[mask_mode] = per_seed
    caps_rate = float(np.median([s["empty_detection_rate"] for s in summaries["soft"]]))
    none_rate = float(np.median([s["empty_detection_rate"] for s in summaries["none"]]))
    mode_freqs = [s["mode_frequency"] for s in summaries["soft"]]
    report = {
        "capsule_model": summaries["soft"],
        "no_capsule_baseline": summaries["none"],
        "median_empty_detection_rate": {"capsule": caps_rate, "baseline": none_rate},
        "capsule_mode_frequency_per_seed": mode_freqs,
    }
    write_report(report, ACCEPT_DIR / "report.json")
    ok = caps_rate > none_rate
    _report(
        "criterion 9 (background-capsule diagnostic)",
        ok,
        f"empty-detection rate on empty-grounding questions: capsule {caps_rate:.3f} "
        f"vs baseline {none_rate:.3f}; modal-capsule freq {[round(f, 3) for f in mode_freqs]}; "
        f"report at {ACCEPT_DIR / 'report.json'}",
    )
