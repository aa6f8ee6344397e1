import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from laser import autodiff as ad
from laser.autodiff import Tensor
from laser.losses import (CandidateSet, _kl_logits, LossWeights, downsample_indices, info_nce, kd_output,
                          kd_trajectory, kl_div, total_loss)


def unit(rng, n, m):
    x = rng.normal(size=(n, m))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def py_softmax(xs):
    mx = max(xs)
    e = [math.exp(x - mx) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def py_kl(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def cand_for_scores(score_row):
    """Unit query and docs realising the given cosine scores exactly."""
    B = len(score_row)
    q = np.zeros((1, B + 1))
    q[0, 0] = 1.0
    docs = np.zeros((B, B + 1))
    for i, s in enumerate(score_row):
        docs[i, 0] = s
        docs[i, i + 1] = math.sqrt(1 - s * s)
    return Tensor(q), docs


class TestInfoNCE:
    @pytest.mark.parametrize("B", [1, 2, 7, 16])
    def test_equal_scores_ln_b(self, B):
        docs = np.tile(np.array([[0.6, 0.8]]), (B, 1))
        q = Tensor(np.array([[1.0, 0.0]]))
        loss = info_nce(q, CandidateSet(Tensor(docs), [B - 1]), 0.02).data[0, 0]
        assert abs(loss - math.log(B)) < 1e-9

    def test_direct_summation_oracle(self):
        s = [1.0, 0.2, 0.1, -0.3]
        q, docs = cand_for_scores(s)
        got = info_nce(q, CandidateSet(Tensor(docs), [0]), 0.02).data[0, 0]
        # -log(exp(s0/t) / sum exp(si/t)) = log(1 + sum exp((si - s0)/t))
        expect = math.log(1 + sum(math.exp((x - 1.0) / 0.02) for x in s[1:]))
        assert abs(got - expect) < 1e-12
        assert got >= 0  # exact value ~e^-40 underflows the log1p

    def test_saturation(self):
        q, docs = cand_for_scores([1.0, -1.0, -1.0])
        assert info_nce(q, CandidateSet(Tensor(docs), [0]), 0.02).data[0, 0] < 1e-30

    def test_averaged_over_queries(self):
        rng = np.random.default_rng(0)
        qs, docs = unit(rng, 3, 5), unit(rng, 6, 5)
        pos = [0, 4, 2]
        batch = info_nce(Tensor(qs), CandidateSet(Tensor(docs), pos), 0.1).data[0, 0]
        each = [info_nce(Tensor(qs[i:i + 1]), CandidateSet(Tensor(docs), [pos[i]]), 0.1).data[0, 0]
                for i in range(3)]
        assert abs(batch - sum(each) / 3) < 1e-12

    def test_bad_positive(self):
        with pytest.raises(ValueError, match="out of range"):
            CandidateSet(Tensor(np.eye(2)), [2])

    def test_non_unit_docs(self):
        with pytest.raises(ValueError, match="unit"):
            CandidateSet(Tensor(np.ones((2, 2))), [0])


class TestKL:
    def test_self(self):
        p = np.array([[0.1, 0.2, 0.7]])
        assert abs(kl_div(p, p)) < 1e-10

    def test_ln2(self):
        assert abs(kl_div([[1.0, 0.0]], [[0.5, 0.5]]) - math.log(2)) < 1e-9

    def test_random_against_direct_sum(self):
        rng = np.random.default_rng(4)
        p, q = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))
        assert abs(kl_div(p[None], q[None]) - py_kl(p.tolist(), q.tolist())) < 1e-10

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            kl_div([[1.2, -0.2]], [[0.5, 0.5]])

    def test_not_normalized_rejected(self):
        with pytest.raises(ValueError, match="sum"):
            kl_div([[0.5, 0.6]], [[0.5, 0.5]])

    @given(st.lists(st.floats(0.01, 10), min_size=2, max_size=10), st.data())
    @settings(max_examples=100, deadline=None)
    def test_nonnegative(self, a, data):
        b = data.draw(st.lists(st.floats(0.01, 10), min_size=len(a), max_size=len(a)))
        p = np.array(a) / sum(a)
        q = np.array(b) / sum(b)
        assert kl_div(p[None], q[None]) >= -1e-12


class TestKdOutput:
    def test_identical_zero(self):
        rng = np.random.default_rng(0)
        v = Tensor(unit(rng, 2, 6))
        c = CandidateSet(Tensor(unit(rng, 5, 6)), [0, 1])
        assert abs(kd_output(v, v, c, 0.02).data[0, 0]) < 1e-12

    def test_large_temperature_limit(self):
        rng = np.random.default_rng(1)
        c = CandidateSet(Tensor(unit(rng, 5, 6)), [0])
        loss = kd_output(Tensor(unit(rng, 1, 6)), Tensor(unit(rng, 1, 6)), c, 1e6).data[0, 0]
        assert 0 <= loss < 1e-10

    def test_composition_oracle(self):
        rng = np.random.default_rng(2)
        t, s, d = unit(rng, 1, 8), unit(rng, 1, 8), unit(rng, 6, 8)
        got = kd_output(Tensor(t), Tensor(s), CandidateSet(Tensor(d), [0]), 0.02).data[0, 0]
        p = py_softmax([x / 0.02 for x in (d @ t[0]).tolist()])
        q = py_softmax([x / 0.02 for x in (d @ s[0]).tolist()])
        assert abs(got - py_kl(p, q)) < 1e-10

    def test_teacher_shift_invariance(self):
        rng = np.random.default_rng(3)
        d = unit(rng, 5, 6)
        s = unit(rng, 1, 6)
        t = unit(rng, 1, 6)
        c = CandidateSet(Tensor(d), [0])
        base = kd_output(Tensor(t), Tensor(s), c, 0.05).data[0, 0]
        teacher_scores = t @ d.T
        shifted = _kl_logits(Tensor(teacher_scores + 0.37), Tensor(s @ d.T), 0.05, True).data[0, 0]
        assert abs(base - shifted) < 1e-12

    def test_temperature_monotonic(self):
        scores = Tensor(np.array([[0.9, 0.3, 0.1, -0.2]]))
        peaks = [ad.softmax_rows(scores, t).data.max() for t in (1.0, 0.5, 0.1, 0.02)]
        assert all(a < b for a, b in zip(peaks, peaks[1:]))

    def test_teacher_gets_no_gradient(self):
        rng = np.random.default_rng(5)
        raw_t = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
        raw_s = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
        raw_d = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        d = ad.l2_normalize_rows(raw_d)
        c = CandidateSet(d, [0, 1])
        loss = total_loss({"cl_latent": 0.0, "kd_out": kd_output(ad.l2_normalize_rows(raw_t),
                                                                  ad.l2_normalize_rows(raw_s), c, 0.02)},
                          LossWeights(lambda1=0, lambda3=0))
        ad.backward(loss)
        assert np.all(raw_t.grad == 0)
        assert np.abs(raw_s.grad).sum() > 0 and np.abs(raw_d.grad).sum() > 0

    def test_teacher_gradient_when_not_detached(self):
        rng = np.random.default_rng(5)
        raw_t = Tensor(rng.normal(size=(1, 6)), requires_grad=True)
        c = CandidateSet(Tensor(unit(rng, 4, 6)), [0])
        loss = kd_output(ad.l2_normalize_rows(raw_t), Tensor(unit(rng, 1, 6)), c, 0.1, detach_teacher=False)
        ad.backward(loss)
        assert np.abs(raw_t.grad).sum() > 0


class TestDownsample:
    def test_examples(self):
        assert downsample_indices(9, 3) == [3, 6, 9]
        assert downsample_indices(2, 3) == [1, 1, 2]
        for m in range(1, 10):
            assert downsample_indices(m, m) == list(range(1, m + 1))

    @given(st.integers(1, 60), st.integers(1, 60))
    def test_properties(self, M, K):
        j = downsample_indices(M, K)
        assert len(j) == K
        assert all(1 <= x <= M for x in j)
        assert j == sorted(j)
        assert j[-1] == M
        assert j == [min(max(i * M // K, 1), M) for i in range(1, K + 1)]

    def test_invalid(self):
        with pytest.raises(ValueError):
            downsample_indices(0, 3)


class TestKdTrajectory:
    def test_equal_states_zero(self):
        rng = np.random.default_rng(0)
        teacher = unit(rng, 6, 5)
        sel = [2, 4, 6]
        student = teacher[[i - 1 for i in sel]] * 3.0  # normalization removes scale
        c = CandidateSet(Tensor(unit(rng, 4, 5)), [0])
        assert abs(kd_trajectory(Tensor(teacher), Tensor(student), c, 0.02).data[0, 0]) < 1e-12

    def test_k1_collapses_to_kd_output(self):
        rng = np.random.default_rng(1)
        teacher = rng.normal(size=(4, 5))
        student = rng.normal(size=(1, 5))
        c = CandidateSet(Tensor(unit(rng, 6, 5)), [0])
        a = kd_trajectory(Tensor(teacher), Tensor(student), c, 0.02).data[0, 0]
        tn = teacher[-1:] / np.linalg.norm(teacher[-1])
        sn = student / np.linalg.norm(student)
        b = kd_output(Tensor(tn), Tensor(sn), c, 0.02).data[0, 0]
        assert abs(a - b) < 1e-12

    def test_composition_oracle(self):
        rng = np.random.default_rng(2)
        M, K, B = 6, 3, 5
        teacher, student, docs = rng.normal(size=(M, 8)), rng.normal(size=(K, 8)), unit(rng, B, 8)
        got = kd_trajectory(Tensor(teacher), Tensor(student), CandidateSet(Tensor(docs), [0]), 0.02).data[0, 0]
        total = 0.0
        for i in range(1, K + 1):
            j = math.floor(i * M / K)
            th = teacher[j - 1] / math.sqrt(sum(x * x for x in teacher[j - 1]))
            sh = student[i - 1] / math.sqrt(sum(x * x for x in student[i - 1]))
            p = py_softmax([float(th @ d) / 0.02 for d in docs])
            q = py_softmax([float(sh @ d) / 0.02 for d in docs])
            total += py_kl(p, q)
        assert abs(got - total / K) < 1e-10

    def test_batched_counts(self):
        rng = np.random.default_rng(3)
        t1, t2 = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
        s1, s2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        c = CandidateSet(Tensor(unit(rng, 4, 4)), [0, 1])
        both = kd_trajectory(Tensor(np.vstack([t1, t2])), Tensor(np.vstack([s1, s2])), c, 0.1,
                             K=3, teacher_counts=[2, 5]).data[0, 0]
        one = kd_trajectory(Tensor(t1), Tensor(s1), c, 0.1).data[0, 0]
        two = kd_trajectory(Tensor(t2), Tensor(s2), c, 0.1).data[0, 0]
        assert abs(both - (one + two) / 2) < 1e-12

    def test_width_mismatch(self):
        c = CandidateSet(Tensor(np.eye(3)), [0])
        with pytest.raises(ValueError, match="width"):
            kd_trajectory(Tensor(np.ones((2, 4))), Tensor(np.ones((1, 3))), c, 0.02)


class TestTotal:
    def test_default_weights_unit_parts(self):
        parts = {k: 1.0 for k in ("cl_latent", "cl_explicit", "kd_out", "kd_mid")}
        assert total_loss(parts, LossWeights()).data[0, 0] == 12.1

    def test_zero_lambdas(self):
        parts = {"cl_latent": 0.7, "cl_explicit": 3.0, "kd_out": 2.0, "kd_mid": 5.0}
        w = LossWeights(lambda1=0, lambda2=0, lambda3=0)
        assert total_loss(parts, w).data[0, 0] == 0.7

    def test_nonfinite_named(self):
        with pytest.raises(FloatingPointError, match="kd_mid"):
            total_loss({"cl_latent": 1.0, "kd_mid": float("nan")}, LossWeights())

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            LossWeights(tau=0)
        with pytest.raises(ValueError):
            LossWeights(lambda2=-1)

    def test_gradient_is_weighted_sum_of_terms(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        d = Tensor(unit(rng, 4, 5))
        c = CandidateSet(d, [0, 1])
        t = Tensor(unit(rng, 2, 5))
        w = LossWeights(lambda1=0.5, lambda2=3.0, lambda3=0.25, tau=0.1, tau_kd=0.2)

        def terms():
            v = ad.l2_normalize_rows(x)
            return {"cl_latent": info_nce(v, c, w.tau),
                    "cl_explicit": info_nce(ad.l2_normalize_rows(ad.mul(x, x)), c, w.tau),
                    "kd_out": kd_output(t, v, c, w.tau_kd),
                    "kd_mid": kd_trajectory(Tensor(t.data),
                                            v, c, w.tau_kd, K=1, teacher_counts=[1, 1])}

        assert ad.grad_check(lambda: total_loss(terms(), w), [x]) < 1e-6
        coef = {"cl_latent": 1.0, "cl_explicit": 0.5, "kd_out": 3.0, "kd_mid": 0.25}
        expect = np.zeros_like(x.data)
        for name, c_ in coef.items():
            x.zero_grad()
            ad.backward(terms()[name])
            expect += c_ * x.grad
        x.zero_grad()
        ad.backward(total_loss(terms(), w))
        np.testing.assert_allclose(x.grad, expect, atol=1e-10)
