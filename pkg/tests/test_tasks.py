from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtkd.encoder import CLS_ID, PAD_ID, SEP_ID
from mtkd.errors import ConfigError, ContractError, InputError
from mtkd.numcore.rng import Rng
from mtkd.tasks import (FIRST_CONTENT_ID, SENT_MARKERS, Dataset, MetricsReport, TaskSpec, accuracy,
                        flip_labels, gen_synthetic, load_splits, macro_f1, make_batches, per_class_prf,
                        recover_label, save_splits)

KINDS = ("SENT2", "NLI2", "TOPIC18")


@pytest.fixture(scope="module", params=KINDS)
def splits(request):
    return gen_synthetic(TaskSpec(kind=request.param, n_train=600, n_dev=150, n_test=150, seed=7))


def test_labels_recoverable_from_tokens(splits):
    for d in (splits.train, splits.dev, splits.test):
        recovered = [recover_label(d.kind, s) for s in d.sequences]
        assert recovered == d.labels.tolist()
        assert all(len(s) <= d.max_seq_len and s[0] == CLS_ID for s in d.sequences)
        assert PAD_ID not in set(np.concatenate(d.sequences).tolist())


def test_splits_are_disjoint(splits):
    keys = [{tuple(s) for s in d.sequences} for d in (splits.train, splits.dev, splits.test)]
    assert sum(map(len, keys)) == len(set().union(*keys)) == 900


def test_every_class_appears(splits):
    assert set(splits.train.labels.tolist()) == set(range(splits.spec.num_classes))


def test_nli_segments_joined_by_separator():
    d = gen_synthetic(TaskSpec(kind="NLI2", n_train=50, n_dev=5, n_test=5, seed=2)).train
    assert all(list(s).count(SEP_ID) == 1 for s in d.sequences)


def test_five_positive_markers_is_positive():
    seq = [CLS_ID] + list(range(FIRST_CONTENT_ID, FIRST_CONTENT_ID + SENT_MARKERS)) + [40, 41]
    assert recover_label("SENT2", seq) == 1
    neg = [CLS_ID] + [FIRST_CONTENT_ID + SENT_MARKERS] * 2 + [FIRST_CONTENT_ID]
    assert recover_label("SENT2", neg) == 0
    assert recover_label("SENT2", [CLS_ID, FIRST_CONTENT_ID, FIRST_CONTENT_ID + SENT_MARKERS]) is None


def test_same_seed_is_byte_identical(tmp_path):
    spec = TaskSpec(kind="TOPIC18", n_train=200, n_dev=50, n_test=50, seed=11, noise_rate=0.2)
    a = save_splits(gen_synthetic(spec), tmp_path / "a")
    b = save_splits(gen_synthetic(spec), tmp_path / "b")
    for name in ("train.txt", "dev.txt", "test.txt", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    other = gen_synthetic(TaskSpec(kind="TOPIC18", n_train=200, n_dev=50, n_test=50, seed=12))
    assert other.fingerprint() != gen_synthetic(spec).fingerprint()


def test_noise_touches_train_only():
    clean = gen_synthetic(TaskSpec(kind="SENT2", n_train=1000, n_dev=100, n_test=100, seed=3))
    noisy = gen_synthetic(TaskSpec(kind="SENT2", n_train=1000, n_dev=100, n_test=100, seed=3, noise_rate=0.3))
    assert np.array_equal(noisy.train.clean_labels, clean.train.labels)
    rate = float((noisy.train.labels != noisy.train.clean_labels).mean())
    assert 0.25 < rate < 0.35
    assert np.array_equal(noisy.dev.labels, clean.dev.labels)
    assert np.array_equal(noisy.test.labels, clean.test.labels)


@given(st.integers(0, 2 ** 32), st.floats(0, 1), st.integers(2, 18))
def test_flipped_labels_always_change_class(seed, rate, c):
    labels = Rng(seed).integers(c, (200,))
    flipped = flip_labels(labels, rate, c, Rng(seed + 1))
    assert flipped.min() >= 0 and flipped.max() < c
    if rate == 0:
        assert np.array_equal(flipped, labels)
    if rate == 1:
        assert np.all(flipped != labels)


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec(kind="TOPIC18", vocab_size=40)
    with pytest.raises(ConfigError):
        TaskSpec(kind="QA")
    with pytest.raises(ConfigError):
        TaskSpec(n_dev=0)
    assert [TaskSpec(kind=k).num_classes for k in KINDS] == [2, 2, 18]


def _toy(n=5):
    seqs = [np.array([CLS_ID] + [10 + i] * (i + 1)) for i in range(n)]
    return Dataset("SENT2", 2, seqs, np.arange(n) % 2, max_seq_len=8)


def test_batch_sizes_and_final_partial():
    batches = make_batches(_toy(), 2, seed=4)
    assert [len(b) for b in batches] == [2, 2, 1]
    assert [len(b) for b in make_batches(_toy(), 2)] == [2, 2, 1]


def test_same_seed_same_order():
    a = [b.index.tolist() for b in make_batches(_toy(), 2, seed=9)]
    assert a == [b.index.tolist() for b in make_batches(_toy(), 2, seed=9)]


def test_every_token_once_per_epoch():
    data = gen_synthetic(TaskSpec(kind="NLI2", n_train=101, n_dev=5, n_test=5, seed=1)).train
    expected = Counter(t for s in data.sequences for t in s.tolist())
    got = Counter()
    for b in make_batches(data, 8, seed=5):
        got.update(b.ids[b.mask].tolist())
        assert np.array_equal(b.mask, b.ids != PAD_ID)
        assert np.array_equal(b.onehot.argmax(1), b.labels)
        assert np.all(b.onehot.sum(1) == 1)
    assert got == expected


def test_batching_errors():
    with pytest.raises(ContractError):
        make_batches(Dataset("SENT2", 2, [], np.array([], int)), 2)
    with pytest.raises(ContractError):
        make_batches(_toy(), 0)


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([0, 1], [1, 0]) == 0.0
    assert accuracy([0, 1, 1, 1], [0, 1, 1, 0]) == 0.75
    with pytest.raises(ContractError):
        accuracy([0, 1], [0])


@pytest.mark.parametrize("c", [2, 5, 18])
def test_perfect_predictions_score_one(c):
    golds = np.arange(3) % c
    assert macro_f1(golds, golds, c) == 1.0


def test_hand_confusion_example():
    golds = np.array([0, 0, 1, 1])
    _, _, f1 = per_class_prf(np.zeros(4, int), golds, 2)
    np.testing.assert_allclose(f1, [2 / 3, 0.0])
    assert macro_f1(np.zeros(4, int), golds, 2) == pytest.approx(1 / 3)


def test_absent_class_convention():
    golds = np.array([0, 1, 0, 1])
    assert macro_f1(golds, golds, 3) == 1.0
    assert macro_f1(golds, golds, 3, absent_f1=0.0) == pytest.approx(2 / 3)
    with pytest.raises(InputError):
        macro_f1([0, 3], [0, 1], 3)
    with pytest.raises(ContractError):
        macro_f1([0, 1], [0], 3)


def _confusion_oracle(preds, golds, c):
    f1s = []
    for k in range(c):
        tp = sum(1 for p, g in zip(preds, golds) if p == k and g == k)
        fp = sum(1 for p, g in zip(preds, golds) if p == k and g != k)
        fn = sum(1 for p, g in zip(preds, golds) if p != k and g == k)
        if tp + fp + fn == 0:
            f1s.append(1.0)
            continue
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(f1s) / c


@given(st.integers(0, 2 ** 32), st.integers(1, 300))
def test_macro_f1_matches_counting_oracle(seed, n):
    rng = Rng(seed)
    golds, preds = rng.integers(18, (n,)), rng.integers(18, (n,))
    assert macro_f1(preds, golds, 18) == pytest.approx(_confusion_oracle(preds.tolist(), golds.tolist(), 18))
    rep = MetricsReport.from_predictions(preds, golds, 18)
    assert 0 <= rep.macro_f1 <= 1 and 0 <= rep.accuracy <= 1
    assert rep.macro_f1 == pytest.approx(np.mean(rep.f1))


@given(st.integers(2, 8), st.integers(1, 10), st.integers(0, 10))
def test_macro_f1_equals_accuracy_for_symmetric_errors(c, per_class, wrong):
    wrong = min(wrong, per_class)
    golds = np.repeat(np.arange(c), per_class)
    preds = golds.copy()
    for k in range(c):
        rows = np.where(golds == k)[0][:wrong]
        preds[rows] = (k + 1) % c
    assert macro_f1(preds, golds, c) == pytest.approx(accuracy(preds, golds))


def test_file_round_trip(tmp_path):
    s = gen_synthetic(TaskSpec(kind="NLI2", n_train=40, n_dev=10, n_test=10, seed=5, noise_rate=0.1))
    loaded = load_splits(save_splits(s, tmp_path))
    assert loaded.fingerprint() == s.fingerprint()
    assert loaded.spec == s.spec
    line = (tmp_path / "train.txt").read_text().splitlines()[0]
    toks, lab = line.split("\t")
    assert toks.split()[0] == str(CLS_ID) and lab.isdigit()
    (tmp_path / "dev.txt").write_text("1 2 3\n")
    with pytest.raises(InputError):
        load_splits(tmp_path)
