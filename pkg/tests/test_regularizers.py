import copy

import mpmath as mp
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_model
from xsketch.regularizers import (
    chord_positions,
    excerpt_signals,
    fit_planning_signal,
    loss_fac,
    loss_pln,
    loss_reg,
    loss_str,
    pairwise_reg,
    structure_signal,
)
from xsketch.seqcvae import PerformanceVAE


def normal_equation_fit(k, degree):
    """(V^T V)^-1 V^T k solved in 50-digit arithmetic.

    In float64 the normal equations square the Vandermonde condition number
    (~1e6 at degree 8), which alone costs about 1e-5 of accuracy.
    """
    mp.mp.dps = 50
    C = k.shape[0]
    deg = min(degree, C - 1)
    t = [mp.mpf(c) / (C - 1) for c in range(C)] if C > 1 else [mp.mpf(0)]
    V = mp.matrix([[ti ** j for j in range(deg + 1)] for ti in t])
    cols = [mp.lu_solve(V.T * V, V.T * mp.matrix(k[:, a].tolist())) for a in range(k.shape[1])]
    coeffs = np.array([[float(c) for c in col] for col in cols])
    fitted = np.array([[float(v) for v in V * col] for col in cols]).T
    return fitted, coeffs


def test_polyfit_matches_normal_equations():
    rng = np.random.default_rng(0)
    for _ in range(200):
        C = int(rng.integers(2, 17))
        degree = int(rng.choice([1, 2, 4, 8]))
        k = rng.uniform(-1, 1, (C, 3))
        got = fit_planning_signal(k, degree)
        want, coeffs = normal_equation_fit(k, degree)
        assert np.abs(got.I_pln - want).max() < 1e-8
        assert got.degree == min(degree, C - 1)
        # coefficients of near-interpolating fits are large; compare relative to their size
        assert np.abs(got.coeffs - coeffs).max() < 1e-6 * max(1.0, np.abs(coeffs).max())


def test_polyfit_recovers_exact_polynomial():
    coeffs = np.array([[0.1, -0.4, 0.3, 0.2, -0.1], [0.0, 0.2, 0.0, -0.3, 0.05], [-0.2, 0.1, 0.1, 0.0, 0.0]])
    t = chord_positions(16)
    k = np.stack([np.polynomial.polynomial.polyval(t, c) for c in coeffs], axis=1)
    sig = fit_planning_signal(k, 4)
    assert np.abs(sig.coeffs - coeffs).max() < 1e-6
    assert np.abs(sig.I_pln - k).max() < 1e-9


def test_polyfit_short_sequences():
    one = fit_planning_signal(np.array([[0.3, -0.2, 0.1]]), 4)
    np.testing.assert_allclose(one.I_pln, [[0.3, -0.2, 0.1]])
    two = fit_planning_signal(np.array([[0.0, 1.0, 0.5], [1.0, 0.0, 0.5]]), 4)
    assert two.degree == 1
    np.testing.assert_allclose(two.I_pln, [[0.0, 1.0, 0.5], [1.0, 0.0, 0.5]], atol=1e-8)


def test_polyfit_constant_column():
    k = np.column_stack([np.full(12, 0.37), np.linspace(-1, 1, 12), np.zeros(12)])
    sig = fit_planning_signal(k, 8)
    assert np.abs(sig.I_pln[:, 0] - 0.37).max() < 1e-12
    assert np.abs(sig.I_pln[:, 2]).max() < 1e-12


def test_structure_signal():
    k = np.array([[0.5, 0.0, -0.2], [0.1, 0.3, 0.2]])
    I = np.array([[0.2, 0.0, 0.0], [0.4, 0.3, 0.1]])
    np.testing.assert_array_equal(structure_signal(k, I), [[1, 0, -1], [-1, 0, 1]])
    assert (structure_signal(I, I) == 0).all()
    assert (structure_signal(I + 0.1, I) == 1).all()
    rng = np.random.default_rng(5)
    for _ in range(100):
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        a[rng.random((6, 3)) < 0.2] = 0.0
        b[a == 0] = 0.0
        want = [[(1 if a[i, j] > b[i, j] else -1 if a[i, j] < b[i, j] else 0) for j in range(3)] for i in range(6)]
        np.testing.assert_array_equal(structure_signal(a, b), want)
    I_pln, I_str = excerpt_signals(np.random.default_rng(1).uniform(-1, 1, (10, 3)))
    assert set(np.unique(I_str)) <= {-1.0, 0.0, 1.0}
    assert I_pln.shape == (10, 3)


# -- discriminator losses


def test_loss_pln_masked_mse():
    pred = torch.tensor([[[0.1, 0.2, 0.3], [9.0, 9.0, 9.0]]])
    target = torch.zeros(1, 2, 3)
    mask = torch.tensor([[True, False]])
    assert float(loss_pln(pred, target, mask)) == pytest.approx((0.01 + 0.04 + 0.09) / 3)
    I = torch.randn(2, 5, 3)
    full = torch.ones(2, 5, dtype=torch.bool)
    assert float(loss_pln(I, I, full)) == 0.0
    assert float(loss_pln(I + 1, I, full)) == pytest.approx(1.0)


def test_loss_str_examples():
    I = torch.sign(torch.randn(2, 4, 16))
    mask = torch.ones(2, 4, dtype=torch.bool)
    assert float(loss_str(I, I, mask)) == 0.0
    assert float(loss_str(torch.zeros(2, 4, 3), torch.ones(2, 4, 3), mask)) == 1.0


def test_discriminator_losses_match_loops():
    rng = np.random.default_rng(6)
    for _ in range(100):
        B, C, D = 3, int(rng.integers(2, 8)), 3
        pred, target = rng.normal(size=(B, C, D)), rng.normal(size=(B, C, D))
        mask = rng.random((B, C)) < 0.7
        mask[0, 0] = True
        total, count = 0.0, 0
        for b in range(B):
            for c in range(C):
                if mask[b, c]:
                    for a in range(D):
                        total += (pred[b, c, a] - target[b, c, a]) ** 2
                        count += 1
        args = (torch.tensor(pred), torch.tensor(target), torch.tensor(mask))
        assert abs(float(loss_pln(*args)) - total / count) < 1e-12
        assert abs(float(loss_str(*args)) - total / count) < 1e-12


# -- attribute regularizer


def naive_pairwise(d, a):
    n = len(d)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += (np.tanh(d[i] - d[j]) - np.sign(a[i] - a[j])) ** 2
    return total / (n * n)


def test_pairwise_reg_examples():
    d = torch.tensor([-10.0, 10.0], dtype=torch.float64)
    assert float(pairwise_reg(d, torch.tensor([1.0, -1.0], dtype=torch.float64))) == pytest.approx(2.0)
    assert float(pairwise_reg(d, torch.tensor([-1.0, 1.0], dtype=torch.float64))) < 1e-15
    assert float(pairwise_reg(d[:1], d[:1])) == 0.0
    a = torch.tensor([-10.0, 0.0, 10.0], dtype=torch.float64)
    assert float(pairwise_reg(a, a)) < 1e-8


def test_pairwise_reg_equal_attributes():
    d = torch.tensor([0.3, -0.2, 0.9], dtype=torch.float64)
    same = torch.full((3,), 0.5, dtype=torch.float64)
    D = d.unsqueeze(1) - d.unsqueeze(0)
    assert float(pairwise_reg(d, same)) == pytest.approx(float((torch.tanh(D) ** 2).mean()), abs=1e-15)
    assert float(pairwise_reg(torch.full((3,), 0.1, dtype=torch.float64), same)) == 0.0


def test_pairwise_reg_matches_naive_loop():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        d = rng.normal(size=n)
        a = rng.normal(size=n)
        a[rng.random(n) < 0.2] = 0.0  # ties
        got = float(pairwise_reg(torch.tensor(d), torch.tensor(a)))
        assert abs(got - naive_pairwise(d, a)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pairwise_reg_invariant_to_monotone_attribute_transform(seed):
    rng = np.random.default_rng(seed)
    d = torch.tensor(rng.normal(size=12))
    a = rng.normal(size=12)
    base = float(pairwise_reg(d, torch.tensor(a)))
    assert float(pairwise_reg(d, torch.tensor(np.exp(3 * a) - 5))) == pytest.approx(base, abs=1e-12)


def test_loss_reg_pools_items_across_batch():
    rng = np.random.default_rng(3)
    z = torch.tensor(rng.normal(size=(2, 5, 12)))
    k = torch.tensor(rng.normal(size=(2, 5, 3)))
    mask = torch.tensor([[True] * 5, [True] * 3 + [False] * 2])
    got = float(loss_reg(z, k, mask, [0, 4, 8]))
    zs = z.numpy().reshape(-1, 12)[mask.numpy().ravel()]
    ks = k.numpy().reshape(-1, 3)[mask.numpy().ravel()]
    want = np.mean([naive_pairwise(zs[:, dim], ks[:, a]) for a, dim in enumerate([0, 4, 8])])
    assert got == pytest.approx(want, abs=1e-12)


def test_loss_reg_subsamples_large_pools():
    z = torch.randn(40, 16, 12, dtype=torch.float64)
    k = torch.randn(40, 16, 3, dtype=torch.float64)
    mask = torch.ones(40, 16, dtype=torch.bool)
    a = loss_reg(z, k, mask, [0, 4, 8], torch.Generator().manual_seed(1))
    b = loss_reg(z, k, mask, [0, 4, 8], torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
    assert 0.0 <= float(a) <= 4.0


# -- factorization loss


def _rel(a, b):
    return float(torch.linalg.norm(a - b) / max(float(torch.linalg.norm(b)), 1e-300))


def test_loss_fac_only_moves_the_decoder(small_batch):
    model = make_model()
    post_pln, *_ = model.encode(small_batch.x, small_batch.y, small_batch.chord_index, small_batch.chord_mask)
    plan = post_pln.mu
    loss = loss_fac(model, small_batch, plan, torch.Generator().manual_seed(0))
    loss.backward()
    for name, p in model.named_parameters():
        group = PerformanceVAE.param_group(name)
        if group == "decoder":
            continue
        assert p.grad is None or float(p.grad.abs().max()) == 0.0, name
    assert any(p.grad is not None and float(p.grad.abs().max()) > 0
               for n, p in model.named_parameters() if PerformanceVAE.param_group(n) == "decoder")


def test_loss_fac_decoder_gradient_matches_finite_differences(small_batch):
    model = make_model(seed=4)
    frozen = copy.deepcopy(model)
    with torch.no_grad():
        post_pln, *_ = frozen.encode(small_batch.x, small_batch.y, small_batch.chord_index, small_batch.chord_mask)
    plan = post_pln.mu

    def value():
        return loss_fac(model, small_batch, plan, torch.Generator().manual_seed(7), frozen)

    value().backward()
    h = 1e-5
    analytic, numeric = [], []
    for name, p in model.named_parameters():
        if PerformanceVAE.param_group(name) != "decoder":
            continue
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            with torch.no_grad():
                up = value().item()
            flat[i] = old - h
            with torch.no_grad():
                down = value().item()
            flat[i] = old
            numeric.append((up - down) / (2 * h))
        # the chord-attribute head never reaches x, so it may carry no gradient at all
        analytic.append(torch.zeros_like(flat) if p.grad is None else p.grad.view(-1))
    rel = _rel(torch.cat(analytic), torch.tensor(numeric, dtype=torch.float64))
    assert rel < 1e-3


def test_loss_fac_ignores_plan_when_decoder_does(small_batch):
    model = make_model()
    width = model.config.plan_dim
    with torch.no_grad():
        model.dec_chord.weight_ih_l0[:, :width] = 0.0
    post_pln, *_ = model.encode(small_batch.x, small_batch.y, small_batch.chord_index, small_batch.chord_mask)
    a = loss_fac(model, small_batch, post_pln.mu, torch.Generator().manual_seed(0))
    b = loss_fac(model, small_batch, post_pln.mu + 3.0, torch.Generator().manual_seed(0))
    assert torch.equal(a, b)
