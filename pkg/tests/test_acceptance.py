"""Acceptance criteria 1-10, one test each, at the stated tolerances.

Each test records a PASS/FAIL line that conftest prints in the terminal
summary. Criteria 7-9 train networks and take most of the runtime (about 35-45
minutes on one CPU core); deselect them with ``-m "not slow"``.
"""
import hashlib
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from deepgait.cli import main
from deepgait.experiments import DESK_MODEL, DESK_TRAIN, mixed_step
from deepgait.gaitsim import generate_corpus
from deepgait.model import REFERENCE_PARAMS, ModelConfig, count_parameters, format_breakdown
from deepgait.pipeline import (AugmentSpec, Dataset, SplitSpec, augment_step, build_dataset, differentiate,
                               sliding_windows, split_steps, test_windows)
from deepgait.training import TrainConfig, cross_validate, fused_loss, train
from deepgait.trajectory import reconstruct
from deepgait.model import build_model
from tests.helpers import LAYER_OPS, hand_count, layer_trial, model_grad_check

RESULTS = []


def record(n, ok, detail):
    RESULTS.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(10, 50, seed=0)


# --------------------------------------------------------------------------

def test_c01_shape_arithmetic(corpus):
    n, bad = 0, 0
    for mode in ("none", "sliding", "random", "combined"):
        spec = AugmentSpec(mode=mode)
        for step in corpus:
            for w in augment_step(step, spec, seed=0) + test_windows(step, spec):
                n += 1
                bad += w.x.shape != (6, 149) or w.y.shape != (3, 29)
    tr, va, te, _ = build_dataset(corpus, AugmentSpec(), SplitSpec(seed=0), seed=0)
    arrays_ok = all(d.x.shape[1:] == (6, 149) and d.y.shape[1:] == (3, 29) for d in (tr, va, te))
    ok = bad == 0 and arrays_ok and n > 0
    record(1, ok, f"{n} windows checked, {bad} with wrong shape")
    assert ok


def test_c02_gradients():
    worst_layer = {}
    for op in LAYER_OPS:
        worst_layer[op] = max(layer_trial(op, seed) for seed in range(100))
    model_err = max(model_grad_check(seed=s) for s in range(2))
    ok = max(worst_layer.values()) <= 1e-6 and model_err <= 1e-4
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst_layer.items())
    record(2, ok, f"per-layer worst over 100 trials: {detail}; model {model_err:.1e}")
    assert ok


def test_c03_parameter_count():
    total, rows = count_parameters(ModelConfig())
    ref = REFERENCE_PARAMS["conv9"]
    rel = abs(total - ref) / ref
    c5, _ = count_parameters(ModelConfig(depth="conv5"))
    print(format_breakdown(total, rows, ref))
    ok = rel <= 1e-3 and len(rows) > 0 and c5 - REFERENCE_PARAMS["conv5"] == 1_832_448
    record(3, ok, f"conv9 {total:,} vs {ref:,} ({rel:.3%}); conv5 {c5:,} vs {REFERENCE_PARAMS['conv5']:,} "
                  f"(gap {c5 - REFERENCE_PARAMS['conv5']:+,}, documented)")
    assert ok


def test_c04_loss_contract():
    rng = np.random.default_rng(0)
    worst, zero_ok, delta_ok = 0.0, True, True
    for _ in range(1000):
        b = int(rng.integers(1, 9))
        t = [rng.normal(size=(b, 29)) for _ in range(3)]
        p = [rng.normal(size=(b, 29)) for _ in range(3)]
        brute = 0.0
        for a, w in zip(range(3), (1.0, 10.0, 10.0)):
            acc = 0.0
            for i in range(b):
                for j in range(29):
                    acc += (p[a][i, j] - t[a][i, j]) ** 2
            brute += w * (acc / (b * 29)) ** 0.5
        worst = max(worst, abs(fused_loss(p, t) - brute))
        zero_ok &= fused_loss(t, t) == 0.0
        q = [x.copy() for x in t]
        q[int(rng.integers(3))][int(rng.integers(b)), int(rng.integers(29))] += 1e-3
        zero_ok &= fused_loss(q, t) > 0
        d = float(rng.uniform(-5, 5))
        delta_ok &= abs(fused_loss([t[0], t[1] + d, t[2]], t) - 10 * abs(d)) <= 1e-12 * max(1, abs(d))
    ok = worst <= 1e-12 and zero_ok and delta_ok
    record(4, ok, f"1000 cases, worst |fused - brute| {worst:.1e}; zero-iff {zero_ok}; 10*delta {delta_ok}")
    assert ok


def test_c05_roundtrip():
    steps = generate_corpus(20, 50, seed=1)
    worst = 0.0
    for s in steps:
        gt = s.gt
        pts = reconstruct(differentiate(gt), gt[:, 0]).points.T
        worst = max(worst, np.abs(pts - gt).max() / np.abs(gt).max())
    ok = len(steps) == 1000 and worst <= 1e-9
    record(5, ok, f"{len(steps)} steps, worst relative deviation {worst:.1e}")
    assert ok


def test_c06_augmentation_accounting(corpus):
    part = split_steps(corpus, SplitSpec(seed=0))
    lengths = [corpus[i].n_imu for i in part.train]
    counts, reports = {}, {}
    for mode in ("sliding", "random", "combined", "none"):
        tr, _, _, rep = build_dataset(corpus, AugmentSpec(mode=mode), part, seed=0)
        counts[mode], reports[mode] = len(tr), rep
    rep = reports["combined"]
    hand = {m: hand_count(lengths, m) for m in ("sliding", "random", "combined", "none")}
    mult_ok = all(abs(rep.multiplier(m) - hand[m] * 150 / sum(lengths)) <= 1e-12 for m in hand)
    again = build_dataset(corpus, AugmentSpec(mode="combined"), part, seed=0)[0]
    first = build_dataset(corpus, AugmentSpec(mode="combined"), part, seed=0)[0]
    repro = first.x.tobytes() == again.x.tobytes() and first.y.tobytes() == again.y.tobytes()
    ok = (counts["combined"] == counts["sliding"] + counts["random"]
          and counts["random"] == 5 * len(part.train)
          and all(counts[m] == hand[m] for m in hand) and mult_ok and repro)
    record(6, ok, f"train steps {len(part.train)}: sliding {counts['sliding']} + random {counts['random']} "
                  f"= combined {counts['combined']}; multipliers match enumeration {mult_ok}; reproducible {repro}")
    assert ok


@pytest.mark.slow
def test_c07_overfit():
    steps = generate_corpus(2, 5, seed=0)
    ws = [w for s in steps for w in sliding_windows(s)][:10]
    ds = Dataset.from_windows(ws, "train", 0)
    # dropout disabled: with p = 0.5 the stochastic loss floor sits above 1% of the start
    cfg = ModelConfig(channel_scale=Fraction(1, 8), dtype="float64", dropout_p=0.0, init_sigma=0.02)
    m = build_model(cfg, seed=0)
    _, hist = train(m, ds, None, TrainConfig(lr=3e-4, epochs=500, batch_size=100))
    ratio = hist.train_loss[-1] / hist.train_loss[0]
    ok = len(ds) == 10 and ratio <= 0.01
    record(7, ok, f"loss {hist.train_loss[0]:.4f} -> {hist.train_loss[-1]:.5f} ({ratio:.2%} of initial)")
    assert ok


# --------------------------------------------------------------------------
# criteria 8 and 9 share the synthetic corpus and the mixed-step runs

_RUNS = {}


def run_mixed(corpus, mode, differential=True):
    key = (mode, differential)
    if key not in _RUNS:
        _RUNS[key] = mixed_step(corpus, AugmentSpec(mode=mode, differential=differential), DESK_MODEL, DESK_TRAIN)
    return _RUNS[key]


@pytest.mark.slow
def test_c08_end_to_end(corpus):
    comb = run_mixed(corpus, "combined")
    slide = run_mixed(corpus, "sliding")
    rand = run_mixed(corpus, "random")
    raw = run_mixed(corpus, "sliding", differential=False)
    ex, ey, ez = comb.report.mean
    bound = 0.1 * comb.stride
    checks = {
        "X<=10% stride": ex <= bound,
        "Y<=0.5": ey <= 0.5,
        "Z<=0.5": ez <= 0.5,
        "combined<=sliding": ex <= slide.report.mean[0],
        "combined<=random": ex <= rand.report.mean[0],
        "raw>differential": raw.report.mean[0] > slide.report.mean[0],
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(8, ok, f"combined X {ex:.2f} (bound {bound:.2f}) Y {ey:.2f} Z {ez:.2f} cm; sliding X "
                  f"{slide.report.mean[0]:.2f}, random X {rand.report.mean[0]:.2f}, raw sliding X "
                  f"{raw.report.mean[0]:.2f}" + (f"; failed {failed}" if failed else ""))
    assert ok, checks


@pytest.mark.slow
def test_c09_independent_walker(corpus):
    folds = split_steps(corpus, SplitSpec(mode="by_subject_kfold", k=6, seed=0))
    disjoint = all(
        not ({corpus[i].subject_id for i in f.train + f.val} & {corpus[i].subject_id for i in f.test})
        for f in folds)
    sizes = sorted(len(f.test_subjects) for f in folds)
    reports, summary = cross_validate(corpus, DESK_MODEL, DESK_TRAIN, AugmentSpec(), k=6, seed=0)
    mixed_x = run_mixed(corpus, "combined").report.mean[0]
    cv_x = summary["mean"][0]
    ok = disjoint and len(reports) == 6 and sizes == [1, 1, 2, 2, 2, 2] and cv_x >= mixed_x
    per_fold = " ".join(f"{r.mean[0]:.2f}" for r in reports)
    record(9, ok, f"6 subject-disjoint folds ({disjoint}); fold X errors {per_fold}; mean {cv_x:.2f} "
                  f"vs mixed-step {mixed_x:.2f} cm")
    assert ok


def _cli_run(out):
    base = ["--out", str(out), "--seed", "4", "--scale", "1/16", "--set", "train.epochs=2",
            "--set", "train.batch_size=32", "--set", "split.k=2"]
    codes = [main(["simulate", *base, "--set", "sim.n_subjects=2", "--set", "sim.steps_per_subject=8"])]
    for cmd in ("ingest", "augment", "train", "eval", "crossval"):
        codes.append(main([cmd, *base]))
    digests = {}
    for f in sorted(Path(out).rglob("*")):
        if f.is_file() and f.suffix in (".csv", ".bin", ".txt"):
            digests[str(f.relative_to(out))] = hashlib.sha256(f.read_bytes()).hexdigest()
    return codes, digests


def test_c10_determinism(tmp_path):
    codes_a, a = _cli_run(tmp_path / "a")
    codes_b, b = _cli_run(tmp_path / "b")
    ckpt = [k for k in a if k.startswith("model/") and k.endswith(".bin")]
    csvs = [k for k in a if k.endswith(".csv")]
    differ = sorted(k for k in a if a.get(k) != b.get(k)) + sorted(set(b) - set(a))
    ok = codes_a == codes_b == [0] * 6 and not differ and ckpt and csvs
    record(10, ok, f"{len(csvs)} CSVs and {len(ckpt)} checkpoint tensors byte-identical across reruns"
                   + (f"; differing {differ}" if differ else ""))
    assert ok
