import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lgcoamix.core import LossConfig
from lgcoamix.losses import (
    LinearHead,
    contrastive_loss,
    cross_entropy_soft,
    finite_diff_check,
    global_loss,
    local_loss,
    total_loss,
    unit_normalize,
)

T64 = torch.float64


def contrast_oracle(vectors, labels, tau, literal=True):
    """Loop-by-loop evaluation of the superpixel contrastive loss."""
    n = len(vectors)
    total = 0.0
    for i in range(n):
        pos = [j for j in range(n) if j != i and labels[j] == labels[i]]
        neg = [k for k in range(n) if labels[k] != labels[i]]
        if not pos:
            continue
        acc = 0.0
        for j in pos:
            s_ij = math.exp(float(np.dot(vectors[i], vectors[j])) / tau)
            if literal:
                denom = s_ij + sum(math.exp(float(np.dot(vectors[i], vectors[k])) / tau) for k in neg)
            else:
                denom = sum(math.exp(float(np.dot(vectors[i], vectors[k])) / tau) for k in range(n) if k != i)
            acc += math.log(s_ij / denom)
        total += acc / len(pos)
    return -total / n


def random_unit(gen, n, d):
    v = gen.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def head(d, k, seed=0, role="local"):
    torch.manual_seed(seed)
    return LinearHead(d, k, role, dtype=T64)


class TestCrossEntropy:
    def test_uniform(self):
        ce = cross_entropy_soft(torch.zeros(4, dtype=T64), torch.tensor([0, 1, 0, 0.0], dtype=T64))
        assert ce.item() == pytest.approx(math.log(4), abs=1e-14)

    def test_saturated(self):
        ce = cross_entropy_soft(torch.tensor([1000.0, 0, 0], dtype=T64), torch.tensor([1.0, 0, 0], dtype=T64))
        assert abs(ce.item()) <= 1e-9

    def test_soft_target(self):
        # mpmath at 30 digits, frozen
        ce = cross_entropy_soft(torch.tensor([1.0, 2.0], dtype=T64), torch.tensor([0.3, 0.7], dtype=T64))
        assert ce.item() == pytest.approx(0.613261687518222834, abs=1e-14)

    def test_batched(self):
        logits = torch.randn(5, 3, dtype=T64)
        target = torch.softmax(torch.randn(5, 3, dtype=T64), 1)
        expected = torch.nn.functional.cross_entropy(logits, target, reduction="none")
        np.testing.assert_allclose(cross_entropy_soft(logits, target).numpy(), expected.numpy(), atol=1e-12)


class TestGlobalLoss:
    def setup_method(self):
        gen = torch.Generator().manual_seed(0)
        self.logits = torch.randn(6, 4, dtype=T64, generator=gen)
        self.y1 = torch.eye(4, dtype=T64)[torch.tensor([0, 1, 2, 3, 0, 1])]
        self.y2 = torch.eye(4, dtype=T64)[torch.tensor([3, 3, 1, 0, 2, 2])]

    def test_lambda_zero(self):
        out = global_loss(self.logits, self.y1, self.y2, torch.zeros(6, dtype=T64))
        ref = torch.nn.functional.cross_entropy(self.logits, self.y1.argmax(1))
        assert out.item() == pytest.approx(ref.item(), abs=1e-14)

    def test_lambda_one(self):
        out = global_loss(self.logits, self.y1, self.y2, torch.ones(6, dtype=T64))
        ref = torch.nn.functional.cross_entropy(self.logits, self.y2.argmax(1))
        assert out.item() == pytest.approx(ref.item(), abs=1e-14)

    def test_uniform_logits(self):
        out = global_loss(torch.zeros(1, 2, dtype=T64), torch.tensor([[1.0, 0]], dtype=T64),
                          torch.tensor([[0, 1.0]], dtype=T64), torch.tensor([0.3], dtype=T64))
        assert out.item() == pytest.approx(math.log(2), abs=1e-15)

    def test_lambda_gets_no_gradient(self):
        lam = torch.full((6,), 0.4, dtype=T64, requires_grad=True)
        global_loss(self.logits.requires_grad_(), self.y1, self.y2, lam).backward()
        assert lam.grad is None

    def test_rejects_lambda(self):
        with pytest.raises(ValueError):
            global_loss(self.logits, self.y1, self.y2, torch.full((6,), 1.5, dtype=T64))


class TestLocalLoss:
    def test_confident(self):
        h = head(2, 3)
        with torch.no_grad():
            h.weight.zero_()
            h.bias.copy_(torch.tensor([0.0, 1000.0, 0.0]))
        out = local_loss(torch.randn(1, 2, dtype=T64), torch.tensor([True]),
                         torch.tensor([1.0, 0, 0], dtype=T64), torch.tensor([0, 1.0, 0], dtype=T64), h)
        assert abs(out.item()) <= 1e-9

    @pytest.mark.parametrize("n,k", [(1, 2), (5, 4), (7, 10)])
    def test_uniform_outputs(self, n, k):
        h = head(3, k)
        with torch.no_grad():
            h.weight.zero_()
            h.bias.zero_()
        out = local_loss(torch.randn(n, 3, dtype=T64), torch.zeros(n, dtype=torch.bool),
                         torch.eye(k, dtype=T64)[0], torch.eye(k, dtype=T64)[1], h)
        assert out.item() == pytest.approx(n * math.log(k), abs=1e-12)

    def test_two_superpixels(self):
        h = head(2, 2)
        with torch.no_grad():
            h.weight.copy_(torch.eye(2, dtype=T64))
            h.bias.zero_()
        vecs = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=T64)
        out = local_loss(vecs, torch.tensor([False, True]), torch.tensor([1.0, 0], dtype=T64),
                         torch.tensor([0, 1.0], dtype=T64), h)
        # first vector against y1 with logits [1, 0]; second against y2 with logits [0, 2]
        expected = math.log(1 + math.exp(-1)) + math.log(1 + math.exp(-2))
        assert out.item() == pytest.approx(expected, abs=1e-14)

    def test_batch_mean_of_sums(self):
        h = head(3, 3, 1)
        gen = torch.Generator().manual_seed(1)
        sel = [torch.randn(2, 3, dtype=T64, generator=gen), torch.randn(4, 3, dtype=T64, generator=gen)]
        prov = [torch.tensor([True, False]), torch.tensor([False, False, True, True])]
        y1 = torch.eye(3, dtype=T64)[[0, 1]]
        y2 = torch.eye(3, dtype=T64)[[2, 0]]
        out = local_loss(sel, prov, y1, y2, h)
        per_image = [local_loss(sel[j], prov[j], y1[j], y2[j], h) for j in range(2)]
        assert out.item() == pytest.approx((per_image[0] + per_image[1]).item() / 2, abs=1e-14)
        flat = local_loss(torch.cat(sel), torch.cat(prov), y1, y2, h, image_index=torch.tensor([0, 0, 1, 1, 1, 1]))
        assert flat.item() == pytest.approx(out.item(), abs=1e-14)

    def test_needs_local_head(self):
        with pytest.raises(ValueError):
            local_loss(torch.zeros(1, 2, dtype=T64), torch.tensor([True]), torch.tensor([1.0, 0]),
                       torch.tensor([0, 1.0]), head(2, 2, role="global"))

    def test_empty_selection(self):
        with pytest.raises(ValueError):
            local_loss([torch.zeros(0, 2, dtype=T64)], [torch.zeros(0, dtype=torch.bool)],
                       torch.eye(2, dtype=T64)[[0]], torch.eye(2, dtype=T64)[[1]], head(2, 2))


class TestContrastive:
    def test_worked_example(self):
        v = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=T64)
        out = contrastive_loss(v, [0, 0, 1], 0.7).item()
        # each of the first two anchors: log(1 + exp(-1/0.7)) = 0.214829917785906 (mpmath)
        assert out == pytest.approx(2 * 0.214829917785906 / 3, abs=1e-12)
        assert out == pytest.approx(0.143219945190604, abs=1e-12)
        assert round(out, 4) == 0.1432

    def test_single_class(self):
        v = torch.from_numpy(random_unit(np.random.default_rng(0), 5, 3))
        assert contrastive_loss(v, [1] * 5, 0.7).item() == 0.0

    def test_no_positive_anchor_counts(self):
        v = torch.from_numpy(random_unit(np.random.default_rng(1), 3, 4))
        full = contrastive_loss(v, [0, 1, 2], 0.5).item()
        assert full == 0.0

    @pytest.mark.parametrize("literal", [True, False])
    @pytest.mark.parametrize("seed", range(25))
    def test_oracle(self, seed, literal):
        gen = np.random.default_rng(seed)
        n = int(gen.integers(2, 13))
        d = int(gen.integers(2, 9))
        v = random_unit(gen, n, d)
        labels = gen.integers(0, 3, size=n)
        tau = float(gen.uniform(0.1, 2.0))
        out = contrastive_loss(torch.from_numpy(v), torch.from_numpy(labels), tau, literal=literal).item()
        assert abs(out - contrast_oracle(v, labels, tau, literal)) <= 1e-9

    def test_large_tau_limit(self):
        gen = np.random.default_rng(2)
        v = random_unit(gen, 10, 4)
        labels = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2, 1])
        # as tau grows every similarity term tends to 1, each log term to -log(1 + |N_i|)
        limit = np.mean([math.log(1 + np.sum(labels != labels[i])) for i in range(10)])
        out = contrastive_loss(torch.from_numpy(v), labels, 1e3).item()
        assert abs(out - limit) < 1e-2
        assert abs(out - contrast_oracle(v, labels, 1e3)) <= 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rotation_invariance(self, seed):
        gen = np.random.default_rng(seed)
        v = random_unit(gen, 8, 5)
        q, _ = np.linalg.qr(gen.normal(size=(5, 5)))
        labels = gen.integers(0, 2, size=8)
        a = contrastive_loss(torch.from_numpy(v), labels, 0.7).item()
        b = contrastive_loss(torch.from_numpy(v @ q), labels, 0.7).item()
        assert abs(a - b) <= 1e-12 and a >= 0

    def test_rejects_tau(self):
        with pytest.raises(ValueError):
            contrastive_loss(torch.eye(2, dtype=T64), [0, 0], 0.0)

    def test_unit_normalize(self):
        c = unit_normalize(torch.randn(7, 3, dtype=T64))
        np.testing.assert_allclose(c.norm(dim=1).numpy(), 1.0, atol=1e-12)


class TestTotalLoss:
    def test_arithmetic(self):
        assert total_loss(1.0, 2.0, 3.0, LossConfig(gamma1=0.1, gamma2=0.05)) == pytest.approx(1.35, abs=1e-15)

    def test_global_only(self):
        assert total_loss(0.7, 5.0, 9.0, LossConfig(gamma1=0.0, gamma2=0.0)) == 0.7


class TestFiniteDiff:
    def test_quadratic(self):
        theta = torch.randn(6, dtype=T64)
        assert finite_diff_check(lambda t: (t ** 2).sum(), [theta]) < 1e-8

    def test_linear(self):
        a = torch.randn(5, dtype=T64)
        theta = torch.randn(5, dtype=T64)
        assert finite_diff_check(lambda t: (a * t).sum() + 3.0, [theta]) < 1e-10

    def test_detects_wrong_gradient(self):
        theta = torch.randn(3, dtype=T64)
        assert finite_diff_check(lambda t: (t ** 2).sum(), [theta], analytic=[3 * theta]) > 0.1

    def test_non_finite(self):
        assert finite_diff_check(lambda t: torch.log(t).sum(), [torch.tensor([-1.0], dtype=T64)]) == math.inf

    def test_params_untouched(self):
        theta = torch.randn(4, dtype=T64)
        before = theta.clone()
        finite_diff_check(lambda t: (t ** 3).sum(), [theta])
        assert torch.equal(theta, before)

    @pytest.mark.parametrize("seed", range(3))
    def test_each_loss(self, seed):
        gen = torch.Generator().manual_seed(seed)
        logits = torch.randn(3, 4, dtype=T64, generator=gen)
        y1 = torch.eye(4, dtype=T64)[[0, 1, 2]]
        y2 = torch.eye(4, dtype=T64)[[3, 3, 1]]
        lam = torch.rand(3, dtype=T64, generator=gen)
        assert finite_diff_check(lambda z: global_loss(z, y1, y2, lam), [logits]) < 1e-4
        h = head(5, 4, seed)
        vecs = torch.randn(6, 5, dtype=T64, generator=gen)
        prov = torch.tensor([0, 1, 0, 1, 1, 0], dtype=torch.bool)
        idx = torch.tensor([0, 0, 1, 1, 2, 2])

        def local(v, w, b):
            fresh = LinearHead(5, 4, "local", dtype=T64)
            del fresh.weight, fresh.bias
            fresh.weight, fresh.bias = w, b
            return local_loss(v, prov, y1, y2, fresh, image_index=idx)
        assert finite_diff_check(local, [vecs, h.weight.detach().clone(), h.bias.detach().clone()]) < 1e-4
        labels = torch.tensor([0, 1, 0, 1, 1, 2])
        assert finite_diff_check(lambda v: contrastive_loss(unit_normalize(v), labels, 0.7), [vecs]) < 1e-4

    def test_rejects_epsilon(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda t: t.sum(), [torch.zeros(1)], epsilon=0)
