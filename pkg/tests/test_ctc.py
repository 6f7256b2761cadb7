import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fingerspell import ctc
from fingerspell.datamodel import (BLANK_INDEX, DataError, LossWeights,
                                   word_to_indices)
from fingerspell.nn import log_softmax


def collapse_oracle(path, blank=0):
    # independent reimplementation: groupby-based dedup, then blank removal
    return [k for k, _ in itertools.groupby(path) if k != blank]


def random_logprobs(rng, T, C):
    return log_softmax(rng.normal(size=(T, C)), axis=-1)


def logsumexp(xs):
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        return -np.inf
    m = xs.max()
    return m + np.log(np.sum(np.exp(xs - m)))


class TestCollapse:
    def test_golden_double_letter(self):
        path = ["l", "o", "-", "o", "s", "e"]
        assert "".join(ctc.collapse(path, blank="-")) == "loose"
        assert ctc.collapse("lo-ose") == "loose"

    def test_golden_index_form(self):
        idx = word_to_indices("lo").tolist() + [BLANK_INDEX] + word_to_indices("ose").tolist()
        assert ctc.collapse(idx) == word_to_indices("loose").tolist()

    def test_plain_cases(self):
        assert ctc.collapse("aa-bb") == "ab"
        assert ctc.collapse("-") == ""
        assert ctc.collapse("a-a") == "aa"
        assert ctc.collapse("abc") == "abc"
        assert ctc.collapse("") == ""

    def test_matches_oracle_on_random_paths(self):
        rng = np.random.default_rng(7)
        for _ in range(2000):
            T = int(rng.integers(0, 30))
            path = rng.integers(0, 5, size=T).tolist()
            assert ctc.collapse(path) == collapse_oracle(path)

    @given(st.lists(st.integers(0, 4), max_size=40))
    @settings(max_examples=300, deadline=None)
    def test_invariants(self, path):
        out = ctc.collapse(path)
        assert BLANK_INDEX not in out
        assert len(out) <= len(path)
        # stuttering any symbol does not change the collapse
        if path:
            stuttered = path[:1] + path
            assert ctc.collapse(stuttered) == out


def enumerate_paths(T, C):
    """All C^T alignment paths grouped by their collapsed letter sequence."""
    groups = {}
    for path in itertools.product(range(C), repeat=T):
        key = tuple(collapse_oracle(path))
        groups.setdefault(key, []).append(path)
    return groups


class TestCtcLossBruteForce:
    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(11)
        C = 5  # blank + 4 letters
        letters = [1, 2, 3, 4]
        targets = [tuple(t) for L in (1, 2, 3)
                   for t in itertools.product(letters, repeat=L)]
        for T in range(1, 7):
            groups = enumerate_paths(T, C)
            for _ in range(3):
                lp = random_logprobs(rng, T, C)
                # vectorized per-path scores, indexed the same way as the groups
                for target in targets:
                    paths = groups.get(target, [])
                    scores = [sum(lp[t, s] for t, s in enumerate(p)) for p in paths]
                    expected = -logsumexp(scores)
                    got = ctc.ctc_loss(lp, np.array(target))
                    if np.isinf(expected):
                        assert not got.feasible
                        assert got.loss == np.inf
                        assert np.all(got.grad == 0.0)
                    else:
                        assert got.feasible
                        assert abs(got.loss - expected) < 1e-9

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(13)
        step = 1e-5
        worst = 0.0
        for _ in range(50):
            T = int(rng.integers(2, 7))
            C = 5
            L = int(rng.integers(1, min(3, T) + 1))
            target = rng.integers(1, C, size=L)
            if T < ctc.min_frames_for(target):
                target = target[: max(1, T // 2)]
            lp = random_logprobs(rng, T, C)
            res = ctc.ctc_loss(lp, target)
            assert res.feasible
            num = np.zeros_like(lp)
            for t in range(T):
                for c in range(C):
                    up = lp.copy(); up[t, c] += step
                    dn = lp.copy(); dn[t, c] -= step
                    num[t, c] = (ctc.ctc_loss(up, target).loss
                                 - ctc.ctc_loss(dn, target).loss) / (2 * step)
            rel = np.abs(res.grad - num) / np.maximum(np.abs(res.grad) + np.abs(num), 1e-4)
            worst = max(worst, rel.max())
        assert worst < 1e-6


class TestCtcLossProperties:
    def test_single_frame_closed_form(self, rng):
        lp = random_logprobs(rng, 1, 5)
        res = ctc.ctc_loss(lp, np.array([3]))
        assert res.loss == pytest.approx(-lp[0, 3], abs=1e-12)

    def test_two_frame_closed_form(self, rng):
        lp = random_logprobs(rng, 2, 4)
        # paths collapsing to "a" (class 1): (1,1), (1,0), (0,1)
        expected = -logsumexp([lp[0, 1] + lp[1, 1],
                               lp[0, 1] + lp[1, 0],
                               lp[0, 0] + lp[1, 1]])
        res = ctc.ctc_loss(lp, np.array([1]))
        assert res.loss == pytest.approx(expected, abs=1e-12)

    def test_loss_nonnegative_and_grad_rows_sum_to_minus_one(self, rng):
        for _ in range(30):
            T = int(rng.integers(3, 10))
            lp = random_logprobs(rng, T, 27)
            word = "".join(rng.choice(list("abcde"), size=int(rng.integers(1, 4))))
            res = ctc.ctc_loss(lp, word)
            if not res.feasible:
                continue
            assert res.loss >= 0.0
            np.testing.assert_allclose(res.grad.sum(axis=1), -1.0, atol=1e-9)

    def test_accepts_word_target(self, rng):
        lp = random_logprobs(rng, 8, 27)
        a = ctc.ctc_loss(lp, "cab")
        b = ctc.ctc_loss(lp, word_to_indices("cab"))
        assert a.loss == b.loss

    def test_min_frames(self):
        assert ctc.min_frames_for("a") == 1
        assert ctc.min_frames_for("ab") == 2
        assert ctc.min_frames_for("aa") == 3
        assert ctc.min_frames_for("aabb") == 6

    def test_infeasible_when_too_short(self, rng):
        lp = random_logprobs(rng, 2, 27)
        res = ctc.ctc_loss(lp, "aa")
        assert not res.feasible and res.loss == np.inf and np.all(res.grad == 0.0)

    def test_rejects_raw_logits(self, rng):
        with pytest.raises(DataError):
            ctc.ctc_loss(rng.normal(size=(4, 27)) + 3.0, "ab")

    def test_rejects_empty_target(self, rng):
        with pytest.raises(DataError):
            ctc.ctc_loss(random_logprobs(rng, 4, 27), "")

    def test_rejects_blank_in_target(self, rng):
        with pytest.raises(DataError):
            ctc.ctc_loss(random_logprobs(rng, 4, 27), np.array([0, 1]))


class TestMasking:
    def test_disallowed_mass_exactly_zero(self, rng):
        for _ in range(100):
            logits = rng.normal(size=(6, 27)) * 3
            word = "".join(rng.choice(list("abcdefghijklmnopqrstuvwxyz"),
                                      size=int(rng.integers(1, 8))))
            lp = ctc.mask_to_word(logits, word)
            probs = np.exp(lp)
            allowed = ctc.word_mask(word)
            assert np.all(probs[:, ~allowed] == 0.0)
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_blank_always_allowed(self):
        mask = ctc.word_mask("a")
        assert mask[BLANK_INDEX]
        assert mask.sum() == 2

    def test_decode_after_mask_stays_in_word(self, rng):
        for _ in range(50):
            logits = rng.normal(size=(12, 27)) * 4
            word = "ban"
            _, decoded = ctc.greedy_decode(ctc.mask_to_word(logits, word))
            assert set(decoded) <= set(word)

    def test_backward_matches_finite_differences(self, rng):
        logits = rng.normal(size=(3, 27))
        w = rng.normal(size=(3, 27))
        word = "feg"
        allowed = ctc.word_mask(word)

        def f(x):
            return float(np.sum(w[:, allowed] * ctc.mask_to_word(x, word)[:, allowed]))

        lp = ctc.mask_to_word(logits, word)
        dy = np.where(allowed, w, 0.0)
        grad = ctc.masked_log_softmax_backward(lp, dy)
        step = 1e-6
        for (i, j) in [(0, 0), (1, 5), (2, 7), (0, 26), (2, 13)]:
            up = logits.copy(); up[i, j] += step
            dn = logits.copy(); dn[i, j] -= step
            num = (f(up) - f(dn)) / (2 * step)
            assert grad[i, j] == pytest.approx(num, abs=1e-6)


class TestGreedyDecode:
    def test_matches_argmax_collapse_oracle(self, rng):
        for _ in range(200):
            lp = random_logprobs(rng, 10, 27)
            path, word = ctc.greedy_decode(lp)
            want = collapse_oracle(np.argmax(lp, axis=1).tolist())
            assert path.tolist() == np.argmax(lp, axis=1).tolist()
            assert word_to_indices(word).tolist() == want

    def test_tie_breaks_to_lowest_index(self):
        row = np.zeros((1, 27))
        path, word = ctc.greedy_decode(row)
        assert path[0] == 0 and word == ""


class TestPerFrameCe:
    def test_unlabeled_frames_have_zero_gradient(self, rng):
        logits = rng.normal(size=(5, 27))
        labels = np.array([3, -1, 0, -1, 7])
        _, grad = ctc.per_frame_ce(logits, labels)
        assert np.all(grad[1] == 0.0) and np.all(grad[3] == 0.0)

    def test_loss_value(self, rng):
        logits = rng.normal(size=(4, 27))
        labels = np.array([2, -1, 5, 0])
        lp = log_softmax(logits, axis=-1)
        want = -(lp[0, 2] + lp[2, 5] + lp[3, 0]) / 3
        loss, _ = ctc.per_frame_ce(logits, labels)
        assert loss == pytest.approx(want, abs=1e-12)

    def test_gradient_finite_differences(self, rng):
        logits = rng.normal(size=(4, 6))
        labels = np.array([2, -1, 5, 0])
        _, grad = ctc.per_frame_ce(logits, labels)
        step = 1e-6
        for (i, j) in [(0, 2), (0, 3), (2, 5), (3, 0), (1, 1)]:
            up = logits.copy(); up[i, j] += step
            dn = logits.copy(); dn[i, j] -= step
            num = (ctc.per_frame_ce(up, labels)[0] - ctc.per_frame_ce(dn, labels)[0]) / (2 * step)
            assert grad[i, j] == pytest.approx(num, abs=1e-6)

    def test_all_unlabeled_rejected(self, rng):
        with pytest.raises(DataError):
            ctc.per_frame_ce(rng.normal(size=(3, 27)), np.array([-1, -1, -1]))


def test_combined_loss_weighting():
    w = LossWeights()
    assert ctc.combined_loss(2.0, 1.0, w) == pytest.approx(0.02 * 2.0 + 0.98 * 1.0)
    assert ctc.combined_loss(0.0, 5.0, LossWeights(0.5, 0.5)) == pytest.approx(2.5)
