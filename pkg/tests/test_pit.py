import math

import numpy as np
import pytest

from mceend.autograd import ShapeError, Tape, Tensor, backward, grad_check, sigmoid, sum_all
from mceend.pit import bce, best_permutation_by_correlation, pit_loss

from oracles import brute_force_pit


class TestBce:
    def test_perfect_prediction_is_zero_after_clamp(self):
        labels = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = bce(Tensor(labels.copy()), labels)
        assert abs(loss.item()) < 1e-6

    def test_uniform_posterior_gives_ln2(self):
        labels = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = bce(Tensor(np.full((2, 2), 0.5)), labels)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_hand_case(self):
        y = np.array([[0.9, 0.2], [0.1, 0.8]])
        labels = np.array([[1.0, 0.0], [0.0, 1.0]])
        expected = -(math.log(0.9) + math.log(0.8) + math.log(0.9) + math.log(0.8)) / 4.0
        loss = bce(Tensor(y), labels)
        assert loss.item() == pytest.approx(expected, abs=1e-12)
        assert loss.item() == pytest.approx(0.1643, abs=5e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce(Tensor(np.full((2, 3), 0.5)), np.zeros((2, 2)))


class TestPitLoss:
    def test_orbit_invariance(self):
        rng = np.random.default_rng(0)
        y = Tensor(rng.uniform(0.05, 0.95, size=(3, 6)))
        labels = (rng.uniform(size=(3, 6)) > 0.5).astype(float)
        base, _ = pit_loss(y, labels)
        for perm in ([1, 0, 2], [2, 1, 0], [1, 2, 0]):
            permuted, _ = pit_loss(y, labels[perm, :])
            assert permuted.item() == pytest.approx(base.item(), abs=1e-12)

    def test_hand_case_with_swapped_labels(self):
        y = Tensor(np.array([[0.9, 0.2], [0.1, 0.8]]))
        swapped = np.array([[0.0, 1.0], [1.0, 0.0]])
        loss, perm = pit_loss(y, swapped)
        assert loss.item() == pytest.approx(0.1643, abs=5e-5)
        assert perm == (1, 0)

    def test_identity_when_labels_match(self):
        y = Tensor(np.array([[0.9, 0.2], [0.1, 0.8]]))
        labels = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, perm = pit_loss(y, labels)
        assert perm == (0, 1)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(1)
        for n_speakers in (2, 3, 4):
            y = rng.uniform(0.02, 0.98, size=(n_speakers, 7))
            labels = (rng.uniform(size=(n_speakers, 7)) > 0.5).astype(float)
            loss, perm = pit_loss(Tensor(y), labels)
            oracle_loss, oracle_perm = brute_force_pit(y, labels)
            assert loss.item() == pytest.approx(oracle_loss, abs=1e-12)
            assert perm == oracle_perm

    def test_never_exceeds_plain_bce(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            y = Tensor(rng.uniform(0.01, 0.99, size=(3, 5)))
            labels = (rng.uniform(size=(3, 5)) > 0.5).astype(float)
            loss, _ = pit_loss(y, labels)
            assert loss.item() <= bce(y, labels).item() + 1e-15

    def test_speaker_cap(self):
        with pytest.raises(ValueError):
            pit_loss(Tensor(np.full((7, 3), 0.5)), np.zeros((7, 3)))

    def test_gradient_through_selected_branch(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        labels = (rng.uniform(size=(2, 5)) > 0.5).astype(float)

        def f():
            loss, _ = pit_loss(sigmoid(logits), labels)
            return loss

        report = grad_check(f, [logits], tol=1e-4)
        assert report.passed, report

    def test_gradients_flow_only_through_best_branch(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        labels = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
        with Tape():
            y = sigmoid(logits)
            loss, perm = pit_loss(y, labels)
        backward(loss)
        grad_pit = logits.grad.copy()
        logits.zero_grad()
        with Tape():
            loss_direct = bce(sigmoid(logits), labels[list(perm), :])
        backward(loss_direct)
        np.testing.assert_allclose(grad_pit, logits.grad, atol=1e-12)


class TestBestPermutationByCorrelation:
    def test_row_swap_recovered(self):
        rng = np.random.default_rng(5)
        y = rng.uniform(size=(2, 40))
        assert best_permutation_by_correlation(y, y[[1, 0], :]) == (1, 0)

    def test_identity(self):
        rng = np.random.default_rng(6)
        y = rng.uniform(size=(3, 30))
        assert best_permutation_by_correlation(y, y) == (0, 1, 2)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            a = rng.uniform(size=(2, 25))
            b = rng.uniform(size=(2, 25))

            def corr(x, z):
                xc, zc = x - x.mean(), z - z.mean()
                d = math.sqrt((xc * xc).sum() * (zc * zc).sum())
                return 0.0 if d == 0 else (xc * zc).sum() / d

            scores = {
                (0, 1): corr(a[0], b[0]) + corr(a[1], b[1]),
                (1, 0): corr(a[0], b[1]) + corr(a[1], b[0]),
            }
            expected = max(scores, key=scores.get)
            assert best_permutation_by_correlation(a, b) == expected

    def test_degenerate_rows_contribute_zero(self):
        a = np.vstack([np.ones(10), np.linspace(0, 1, 10)])
        b = np.vstack([np.linspace(0, 1, 10), np.ones(10)])
        # constant rows give zero correlation, so the pairing that matches the
        # ramps wins
        assert best_permutation_by_correlation(a, b) == (1, 0)
