import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nocbench.errors import DataError, ShapeError
from nocbench.losses import (
    ClassifierHead,
    LossConfig,
    auto_alpha,
    combined_loss,
    cosines,
    ikt_loss,
    ikt_terms,
    init_head,
    kl_divergence,
    lmc_loss,
    softened_probs,
)

from oracles import central_differences, kl_closed_form, max_rel_error, softmax_cross_entropy


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def problem(seed, B=4, C=5, D=6, s=30.0, m=0.4):
    rng = np.random.default_rng(seed)
    head = ClassifierHead(unit(rng.normal(size=(C, D))), s, m)
    X = unit(rng.normal(size=(B, D)))
    labels = rng.integers(0, C, B)
    return rng, head, X, labels


def random_dist(rng, n, C):
    return rng.dirichlet(np.ones(C), size=n)


def two_class_head(s=30.0, m=0.4):
    # x = e0; W rows chosen so cos = (0.9, 0.1)
    w0 = np.array([0.9, math.sqrt(1 - 0.81)])
    w1 = np.array([0.1, math.sqrt(1 - 0.01)])
    return ClassifierHead(np.stack([w0, w1]), s, m), np.array([1.0, 0.0])


class TestCosines:
    def test_parallel_and_orthogonal(self):
        head = ClassifierHead(np.eye(3))
        c = cosines(np.array([1.0, 0, 0]), head)
        assert c[0] == pytest.approx(1.0, abs=1e-6) and c[1] == pytest.approx(0.0, abs=1e-6)

    def test_bounded(self):
        _, head, X, _ = problem(0, B=50)
        c = cosines(X, head)
        assert np.all(c >= -1 - 1e-6) and np.all(c <= 1 + 1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            cosines(np.ones(4), ClassifierHead(np.eye(3)))


class TestLMC:
    def test_uniform_cosines(self):
        head = ClassifierHead(np.eye(4), s=1.0, m=0.0)
        x = np.full(4, 0.5)
        assert lmc_loss(x, [2], head).loss == pytest.approx(math.log(4), abs=1e-6)

    def test_two_class_fixture(self):
        head, x = two_class_head()
        assert lmc_loss(x, [0], head).loss == pytest.approx(math.log1p(math.exp(-12)), abs=1e-9)

    def test_equals_cross_entropy_without_margin(self):
        for seed in range(50):
            rng, head, X, labels = problem(seed, s=1.0, m=0.0)
            ref = np.mean([softmax_cross_entropy(X[i] @ head.W.T, labels[i]) for i in range(len(labels))])
            assert lmc_loss(X, labels, head).loss == pytest.approx(ref, abs=1e-6)

    def test_non_negative_and_decreasing_in_gt_cosine(self):
        head = ClassifierHead(np.eye(3), 30.0, 0.4)
        prev = None
        for g in np.linspace(-0.5, 0.9, 15):
            x = np.array([g, 0.1, -0.2])
            v = lmc_loss(x, [0], head).loss
            assert v >= 0
            if prev is not None:
                assert v < prev
            prev = v

    def test_argmax_invariant_to_scale(self):
        rng, _, X, _ = problem(1, B=20)
        W = unit(rng.normal(size=(5, 6)))
        for s in (1.0, 10.0, 64.0):
            p = softened_probs(X, np.zeros(20, int), ClassifierHead(W, s, 0.0))
            assert np.array_equal(p.argmax(1), (X @ W.T).argmax(1))

    @pytest.mark.parametrize("bad", [-1, 5])
    def test_label_out_of_range(self, bad):
        _, head, X, _ = problem(0)
        with pytest.raises(DataError):
            lmc_loss(X, [bad, 0, 0, 0], head)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        _, head, X, labels = problem(seed, s=8.0)
        t = lmc_loss(X, labels, head)
        W = np.array(head.W)
        num_x = central_differences(lambda: lmc_loss(X, labels, head).loss, X)
        num_w = central_differences(lambda: lmc_loss(X, labels, ClassifierHead(W, 8.0, 0.4)).loss, W)
        assert max_rel_error(t.dX, num_x) < 1e-4
        assert max_rel_error(t.dW, num_w) < 1e-4


class TestSoftenedProbs:
    def test_uniform(self):
        p = softened_probs(np.full(4, 0.5), 1, ClassifierHead(np.eye(4), 30.0, 0.0))
        np.testing.assert_allclose(p, 0.25, atol=1e-12)

    def test_two_class_fixture(self):
        head, x = two_class_head()
        assert softened_probs(x, 0, head)[0] == pytest.approx(1 / (1 + math.exp(-12)), abs=1e-9)

    def test_sums_to_one(self):
        _, head, X, labels = problem(3, B=30)
        np.testing.assert_allclose(softened_probs(X, labels, head).sum(1), 1.0, atol=1e-9)


class TestKL:
    def test_fixture(self):
        assert kl_divergence([0.9, 0.1], [0.5, 0.5]) == pytest.approx(0.3681, abs=1e-4)
        assert kl_closed_form([0.9, 0.1], [0.5, 0.5]) == pytest.approx(0.3681, abs=1e-4)

    def test_self_and_nonnegative(self):
        rng = np.random.default_rng(0)
        p, q = random_dist(rng, 1000, 7), random_dist(rng, 1000, 7)
        assert np.all(kl_divergence(p, p) < 1e-12)
        kl = kl_divergence(p, q)
        assert np.all(kl >= 0)
        for i in range(20):
            assert kl[i] == pytest.approx(kl_closed_form(p[i], q[i]), rel=1e-12)

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(1)
        p = random_dist(rng, 200, 4)
        q = random_dist(rng, 200, 4)
        assert np.all(kl_divergence(p, q) > 1e-9)

    def test_zero_mass_convention(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)

    def test_infinite_divergence_error(self):
        with pytest.raises(DataError):
            kl_divergence([0.5, 0.5], [1.0, 0.0])

    def test_gradient_wrt_night_logits(self):
        rng = np.random.default_rng(2)
        p = random_dist(rng, 3, 5)
        z = rng.normal(size=(3, 5))

        def f():
            e = np.exp(z - z.max(1, keepdims=True))
            return ikt_loss(p, e / e.sum(1, keepdims=True))[0]

        e = np.exp(z - z.max(1, keepdims=True))
        _, g = ikt_loss(p, e / e.sum(1, keepdims=True))
        assert max_rel_error(g, central_differences(f, z)) < 1e-4

    @settings(max_examples=100)
    @given(st.lists(st.floats(0.01, 1), min_size=2, max_size=6))
    def test_gibbs(self, w):
        p = np.array(w) / sum(w)
        q = np.roll(p, 1)
        assert kl_divergence(p, q) >= -1e-15


class TestCombined:
    def test_alpha_zero_is_bitwise_lmc(self):
        rng, head, X, labels = problem(4)
        p_day = random_dist(rng, len(labels), 5)
        c = combined_loss(X, labels, head, p_day, LossConfig(alpha=0.0))
        l = lmc_loss(X, labels, head)
        assert c.loss == l.loss
        assert c.dX.tobytes() == l.dX.tobytes() and c.dW.tobytes() == l.dW.tobytes()

    def test_matching_distributions_vanish(self):
        _, head, X, labels = problem(5)
        p_day = softened_probs(X, labels, head)
        for a in (1.0, 30.0, 1000.0):
            c = combined_loss(X, labels, head, p_day, LossConfig(alpha=a))
            assert c.loss == pytest.approx(lmc_loss(X, labels, head).loss, abs=1e-12)

    @pytest.mark.parametrize("scalar_mode", [False, True])
    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed, scalar_mode):
        rng, head, X, labels = problem(seed, s=8.0)
        p_day = random_dist(rng, len(labels), 5)
        cfg = LossConfig(alpha=2.5, ikt_scalar_mode=scalar_mode)
        t = combined_loss(X, labels, head, p_day, cfg)
        W = np.array(head.W)
        num_x = central_differences(lambda: combined_loss(X, labels, head, p_day, cfg).loss, X)
        num_w = central_differences(
            lambda: combined_loss(X, labels, ClassifierHead(W, 8.0, 0.4), p_day, cfg).loss, W)
        assert max_rel_error(t.dX, num_x) < 1e-4
        assert max_rel_error(t.dW, num_w) < 1e-4

    @pytest.mark.parametrize("scalar_mode", [False, True])
    def test_saturated_night_distribution(self, scalar_mode):
        # s=30 with p_day concentrated away from the night argmax pushes q_j below 1e-12
        head, x = two_class_head()
        p_day = np.array([[1e-6, 1 - 1e-6]])
        t = ikt_terms(x, [0], head, p_day, scalar_mode)
        z = 30.0 * np.array([0.9 - 0.4, 0.1])
        logq = z - np.logaddexp(z[0], z[1])
        expected = sum(p * (math.log(p) - lq) for p, lq in zip(p_day[0], logq))
        assert t.loss == pytest.approx(expected, rel=1e-12)
        X = np.array([x])
        num = central_differences(lambda: ikt_terms(X, [0], head, p_day, scalar_mode).loss, X)
        assert max_rel_error(t.dX, num, floor=1e-6) < 1e-4

    def test_parts(self):
        rng, head, X, labels = problem(6)
        p_day = random_dist(rng, len(labels), 5)
        t = combined_loss(X, labels, head, p_day, LossConfig(alpha=3.0))
        assert t.parts["loss"] == pytest.approx(t.parts["lmc"] + 3.0 * t.parts["ikt"], abs=1e-12)

    def test_p_day_shape(self):
        _, head, X, labels = problem(0)
        with pytest.raises(ShapeError):
            combined_loss(X, labels, head, np.ones((2, 5)) / 5, LossConfig())


class TestConfig:
    def test_auto_alpha(self):
        assert auto_alpha(2.0, 0.5, 30.0) == 4.0
        assert auto_alpha(2.0, 0.0, 30.0) == 30.0

    @pytest.mark.parametrize("kw", [{"alpha": -1}, {"alpha": float("inf")}, {"alpha_mode": "x"}])
    def test_validation(self, kw):
        with pytest.raises(DataError):
            LossConfig(**kw)

    def test_head_validation(self):
        with pytest.raises(DataError):
            ClassifierHead(np.eye(2), s=0)
        with pytest.raises(DataError):
            ClassifierHead(np.eye(2), m=1.0)

    def test_init_head_unit_rows(self):
        h = init_head(10, 8, seed=3)
        np.testing.assert_allclose(np.linalg.norm(h.W.astype(np.float64), axis=1), 1, atol=1e-6)
