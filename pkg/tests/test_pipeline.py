import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepgait.imu_data import BadSegment, StepSegment
from deepgait.pipeline import (AugmentSpec, Dataset, NotEnoughSubjects, Partition, SplitSpec, TooFewSteps, TooShort,
                               augment_step, build_dataset, differentiate, integrate, random_starts, random_windows,
                               sliding_starts, sliding_windows, split_steps, step_rng, test_windows)
from tests.helpers import hand_count

SPEC = AugmentSpec()


def make_step(L, subject="s", index=0, seed=0):
    rng = np.random.default_rng(seed)
    return StepSegment(rng.normal(size=(L, 3)), rng.normal(size=(L, 3)),
                       np.cumsum(rng.normal(size=(L // 5, 3)), axis=0), subject, index)


def fake_steps(n_subjects, per_subject, lengths=(300, 335, 400)):
    return [make_step(lengths[(i * per_subject + k) % len(lengths)], f"S{i:02d}", k, seed=100 * i + k)
            for i in range(n_subjects) for k in range(per_subject)]


# --------------------------------------------------------------------------
# differential transform

def test_differentiate_examples():
    np.testing.assert_array_equal(differentiate(np.array([[1.0, 3.0, 6.0]])), [[2.0, 3.0]])
    assert not differentiate(np.full((2, 10), 4.2)).any()
    assert differentiate(np.zeros((1, 150))).shape == (1, 149)


def test_differentiate_too_short():
    with pytest.raises(TooShort):
        differentiate(np.zeros((3, 1)))


@given(seed=st.integers(0, 10_000), n=st.integers(2, 300))
def test_integrate_inverts_differentiate(seed, n):
    s = np.random.default_rng(seed).normal(0, 100, size=(3, n))
    back = integrate(differentiate(s), s[:, 0])
    assert np.abs(back - s).max() <= 1e-9 * max(1.0, np.abs(s).max())


# --------------------------------------------------------------------------
# windowing

@pytest.mark.parametrize("L,starts", [(400, [0, 140, 250]), (150, [0]), (290, [0, 140]), (300, [0, 140, 150])])
def test_sliding_starts(L, starts):
    assert sliding_starts(L, SPEC) == starts
    ws = sliding_windows(make_step(L), SPEC)
    assert [w.provenance.imu_start for w in ws] == starts
    assert all(w.provenance.tag == "sliding" for w in ws)


def test_sliding_window_content():
    step = make_step(400)
    w = sliding_windows(step)[1]
    np.testing.assert_array_equal(w.x, np.diff(step.imu[:, 140:290], axis=1))
    np.testing.assert_array_equal(w.y, np.diff(step.gt[:, 28:58], axis=1))


@given(L=st.integers(30, 400).map(lambda k: 5 * k))
def test_sliding_covers_step(L):
    starts = sliding_starts(L, SPEC)
    covered = np.zeros(L, bool)
    for s in starts:
        assert s % 5 == 0 and s + 150 <= L
        covered[s:s + 150] = True
    assert covered[:L - 4].all()
    assert all(b - a == 140 for a, b in zip(starts[:-2], starts[1:-1]))


def test_random_single_start():
    ws = random_windows(make_step(150), SPEC, np.random.default_rng(0))
    assert len(ws) == 5 and {w.provenance.imu_start for w in ws} == {0}
    assert all(np.array_equal(ws[0].x, w.x) for w in ws)


def test_random_deterministic():
    step = make_step(400)
    a = random_windows(step, SPEC, np.random.default_rng(7))
    b = random_windows(step, SPEC, np.random.default_rng(7))
    assert [w.provenance for w in a] == [w.provenance for w in b]
    assert all(np.array_equal(u.x, v.x) for u, v in zip(a, b))


def test_random_start_distribution():
    n = 100_000
    starts = random_starts(400, AugmentSpec(random_count=n), np.random.default_rng(123))
    assert set(np.unique(starts)) <= set(range(0, 251, 5))
    counts = np.bincount(starts // 5, minlength=51)
    p = 1 / 51
    expected, sigma = n * p, np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - expected) <= 3 * sigma)


@pytest.mark.parametrize("L,n", [(400, 2), (450, 3), (150, 1), (445, 2)])
def test_test_windows(L, n):
    ws = test_windows(make_step(L))
    assert [w.provenance.imu_start for w in ws] == [150 * k for k in range(n)]
    assert all(w.provenance.tag == "test" for w in ws)


def test_short_step_precondition():
    # a 149-sample step cannot exist; a window longer than the step is refused
    with pytest.raises(BadSegment):
        StepSegment(np.zeros((149, 3)), np.zeros((149, 3)), np.zeros((29, 3)), "s", 0)
    wide = AugmentSpec(win_imu=200, win_gt=40)
    for fn in (test_windows, sliding_windows):
        with pytest.raises(TooShort):
            fn(make_step(150), wide)
    with pytest.raises(TooShort):
        random_windows(make_step(150), wide, np.random.default_rng(0))


def test_window_shapes_and_alignment():
    for w in augment_step(make_step(385), SPEC, 0):
        assert w.x.shape == (6, 149) and w.y.shape == (3, 29)
        assert w.provenance.imu_start % 5 == 0
        assert np.isfinite(w.x).all() and np.isfinite(w.y).all()


def test_raw_mode():
    step = make_step(300)
    spec = AugmentSpec(differential=False)
    w = sliding_windows(step, spec)[0]
    np.testing.assert_array_equal(w.x, step.imu[:, 1:150])
    np.testing.assert_array_equal(w.y, step.gt[:, 1:30])


def test_spec_invariants():
    with pytest.raises(ValueError):
        AugmentSpec(win_imu=150, win_gt=31)
    with pytest.raises(ValueError):
        AugmentSpec(overlap_imu=10, overlap_gt=3)
    with pytest.raises(ValueError):
        AugmentSpec(mode="mixup")
    assert SPEC.stride == 140


def test_augment_none_is_tiling():
    step = make_step(400)
    ws = augment_step(step, AugmentSpec(mode="none"), 0)
    assert [w.provenance.imu_start for w in ws] == [0, 150]
    assert all(w.provenance.tag == "none" for w in ws)


def test_step_rng_depends_on_step():
    a = step_rng(0, make_step(300, "A", 1)).integers(1 << 30)
    b = step_rng(0, make_step(300, "A", 2)).integers(1 << 30)
    c = step_rng(0, make_step(300, "A", 1)).integers(1 << 30)
    assert a != b and a == c


# --------------------------------------------------------------------------
# splitting

def test_split_by_step_sizes():
    part = split_steps(fake_steps(2, 5), SplitSpec(seed=3))
    assert (len(part.train), len(part.val), len(part.test)) == (8, 1, 1)
    assert sorted(part.train + part.val + part.test) == list(range(10))


def test_kfold_sizes():
    steps = fake_steps(10, 3)
    folds = split_steps(steps, SplitSpec(mode="by_subject_kfold", k=6, seed=1))
    assert sorted(len(f.test_subjects) for f in folds) == [1, 1, 2, 2, 2, 2]
    seen = [s for f in folds for s in f.test_subjects]
    assert sorted(seen) == sorted({s.subject_id for s in steps})
    for f in folds:
        test_subj = {steps[i].subject_id for i in f.test}
        train_subj = {steps[i].subject_id for i in f.train + f.val}
        assert not test_subj & train_subj
        assert len(f.val) == round(0.1 * (len(f.train) + len(f.val)))
        assert sorted(f.train + f.val + f.test) == list(range(len(steps)))


def test_kfold_needs_subjects():
    with pytest.raises(NotEnoughSubjects):
        split_steps(fake_steps(5, 2), SplitSpec(mode="by_subject_kfold", k=6))
    with pytest.raises(ValueError):
        SplitSpec(mode="by_subject_kfold", k=1)


@given(seed=st.integers(0, 1000))
def test_split_deterministic(seed):
    steps = fake_steps(3, 7)
    assert split_steps(steps, SplitSpec(seed=seed)) == split_steps(steps, SplitSpec(seed=seed))


# --------------------------------------------------------------------------
# datasets

def test_build_dataset_accounting():
    steps = fake_steps(4, 5, lengths=(300,))
    spec = AugmentSpec(mode="combined")
    tr, va, te, rep = build_dataset(steps, spec, SplitSpec(seed=2), seed=5)
    part = split_steps(steps, SplitSpec(seed=2))
    n_train = len(part.train)
    assert rep.rows["combined"][0] == rep.rows["sliding"][0] + rep.rows["random"][0] == len(tr)
    assert rep.rows["random"][0] == 5 * n_train
    lengths = [steps[i].n_imu for i in part.train]
    for mode in ("none", "sliding", "random", "combined"):
        assert rep.rows[mode][0] == hand_count(lengths, mode)
        assert rep.multiplier(mode) == pytest.approx(hand_count(lengths, mode) * 150 / sum(lengths))
    assert len(va) == sum(steps[i].n_imu // 150 for i in part.val)
    assert len(te) == sum(steps[i].n_imu // 150 for i in part.test)
    assert {p.tag for p in va.provenance} == {"test"}


@pytest.mark.parametrize("mode", ["none", "sliding", "random", "combined"])
def test_modes_counts(mode):
    steps = fake_steps(2, 6)
    tr, *_ = build_dataset(steps, AugmentSpec(mode=mode), SplitSpec(seed=0), seed=0)
    part = split_steps(steps, SplitSpec(seed=0))
    assert len(tr) == hand_count([steps[i].n_imu for i in part.train], mode)


def test_no_step_in_two_splits():
    steps = fake_steps(3, 8)
    tr, va, te, _ = build_dataset(steps, SPEC, SplitSpec(seed=9), seed=1)
    keys = [tr.step_keys(), va.step_keys(), te.step_keys()]
    assert not keys[0] & keys[1] and not keys[0] & keys[2] and not keys[1] & keys[2]


def test_build_dataset_reproducible():
    steps = fake_steps(3, 5)
    a = build_dataset(steps, SPEC, SplitSpec(seed=4), seed=8)[0]
    b = build_dataset(steps, SPEC, SplitSpec(seed=4), seed=8)[0]
    c = build_dataset(steps, SPEC, SplitSpec(seed=4), seed=9)[0]
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y) and a.provenance == b.provenance
    assert a.provenance != c.provenance


def test_build_dataset_too_few():
    with pytest.raises(TooFewSteps):
        build_dataset(fake_steps(1, 9), SPEC)


def test_build_dataset_partition_input():
    steps = fake_steps(2, 6)
    part = Partition(tuple(range(10)), (10,), (11,))
    tr, va, te, _ = build_dataset(steps, SPEC, part, seed=0)
    assert te.step_keys() == {steps[11].key}


def test_dataset_save_load(tmp_path):
    steps = fake_steps(2, 5)
    tr, *_ = build_dataset(steps, SPEC, SplitSpec(seed=0), seed=3)
    tr.save(tmp_path / "train")
    back = Dataset.load(tmp_path / "train")
    np.testing.assert_array_equal(back.x, tr.x)
    np.testing.assert_array_equal(back.y, tr.y)
    assert back.provenance == tr.provenance and back.split == "train" and back.seed == 3
    header = (tmp_path / "train" / "manifest.csv").read_text().splitlines()[0]
    assert header == "row,subject_id,step_index,imu_start,tag,split,seed"


def test_size_report_lines(tmp_path):
    steps = fake_steps(2, 5, lengths=(300,))
    *_, rep = build_dataset(steps, SPEC, SplitSpec(seed=0))
    rep.save(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "augmentation,windows,sample_points,seconds,multiplier"
    assert lines[1].startswith("original,0,2400,4.800,")


@settings(max_examples=20)
@given(lengths=st.lists(st.integers(30, 80).map(lambda k: 5 * k), min_size=10, max_size=14))
def test_accounting_property(lengths):
    steps = [make_step(L, "s", i, seed=i) for i, L in enumerate(lengths)]
    tr, _, _, rep = build_dataset(steps, SPEC, SplitSpec(seed=0), seed=0)
    part = split_steps(steps, SplitSpec(seed=0))
    assert len(tr) == hand_count([steps[i].n_imu for i in part.train], "combined")
    assert rep.base_points == sum(steps[i].n_imu for i in part.train)
