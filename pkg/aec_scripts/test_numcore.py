#!/usr/bin/env python3
"""
Tests for the autodiff core and the optimizer
"""

import sys

import numpy as np
import pytest

from testkit import run_tests

import numcore as nc
import trainer  # noqa: F401  (registers the loss gradient checks)
from errors import ContractError, ShapeError


def test_every_registered_op_passes_gradcheck():
    results = nc.run_gradcheck_suite()
    expected = {'add', 'matmul', 'gru_sequence', 'lagged_mix', 'istft', 'apply_ccm',
                'align_attention', 'rnn_block', 'snr_loss', 'modulation_loss', 'delay_loss_ce', 'vad_bce'}
    assert expected <= {r.name for r in results}
    failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not failed, failed
    assert all(r.max_rel_error < 1e-4 for r in results)


def test_shared_input_accumulates_gradient():
    x = nc.Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
    loss = nc.tsum(x * x + x)
    nc.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_graph_records_intermediate_gradients():
    x = nc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x
    graph = nc.backward(nc.tsum(y * 3.0))
    np.testing.assert_allclose(graph.grad_of(y), [3.0, 3.0])
    assert graph.grad_of(nc.Tensor(np.zeros(2))) is None
    assert len(graph.nodes) == 3


def test_broadcast_gradient_is_reduced_to_input_shape():
    x = nc.Tensor(np.ones((4, 3)), requires_grad=True)
    b = nc.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    nc.backward(nc.tsum(x * b))
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])
    np.testing.assert_allclose(x.grad, np.tile([1.0, 2.0, 3.0], (4, 1)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((4, 2))))
    assert '(2, 3)' in str(info.value) and '(4, 2)' in str(info.value)


def test_backward_needs_scalar_loss():
    x = nc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        nc.backward(x * 2.0)


def test_no_grad_records_no_graph():
    x = nc.Tensor(np.ones(3), requires_grad=True)
    with nc.no_grad():
        y = nc.tsum(x * 3.0)
    assert not y.requires_grad
    assert nc.grad_enabled()


def test_unfold_is_causal():
    x = nc.Tensor(np.arange(1.0, 6.0))
    windows = nc.unfold(x, kernel=3).data
    assert windows.shape == (5, 3)
    np.testing.assert_array_equal(windows[0], [0, 0, 1])
    np.testing.assert_array_equal(windows[4], [3, 4, 5])


def test_gru_step_matches_gate_equations():
    rng = np.random.default_rng(3)
    n_in, n = 3, 2
    x, h = rng.standard_normal(n_in), rng.standard_normal(n)
    w_ih, w_hh = rng.standard_normal((n_in, 3 * n)), rng.standard_normal((n, 3 * n))
    b_ih, b_hh = rng.standard_normal(3 * n), rng.standard_normal(3 * n)

    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    gi, gh = x @ w_ih + b_ih, h @ w_hh + b_hh
    r = sig(gi[:n] + gh[:n])
    z = sig(gi[n:2 * n] + gh[n:2 * n])
    cand = np.tanh(gi[2 * n:] + r * gh[2 * n:])
    expected = (1 - z) * cand + z * h

    out = nc.gru_step(*(nc.Tensor(a) for a in (x, h, w_ih, w_hh, b_ih, b_hh)))
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_gru_sequence_equals_repeated_steps():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 5, 3))
    h0 = rng.standard_normal((2, 4))
    weights = [nc.Tensor(rng.standard_normal(s)) for s in ((3, 12), (4, 12), (12,), (12,))]
    seq = nc.gru_sequence(nc.Tensor(x), nc.Tensor(h0), *weights).data
    h = nc.Tensor(h0)
    for t in range(5):
        h = nc.gru_step(nc.Tensor(x[:, t]), h, *weights)
        np.testing.assert_allclose(seq[:, t], h.data, atol=1e-12)


def test_lagged_mix_of_one_hot_weights_is_a_shift():
    rng = np.random.default_rng(5)
    r = rng.standard_normal((6, 2, 3))
    weights = np.zeros((6, 4))
    weights[:, 2] = 1.0
    out = nc.lagged_mix(nc.Tensor(weights), nc.Tensor(r)).data
    np.testing.assert_array_equal(out[:2], 0.0)
    np.testing.assert_allclose(out[2:], r[:4])


def test_adam_first_step_moves_each_weight_by_lr():
    p = nc.Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    opt = nc.Adam({'p': p}, lr=0.01, clip_norm=0.0)
    nc.backward(nc.tsum(p * np.array([3.0, -0.2, 1e-3])))
    opt.step()
    np.testing.assert_allclose(p.data, [0.99, -0.99, 0.49], atol=1e-6)
    assert opt.state.step == 1


def test_gradient_clipping_scales_to_max_norm():
    grads = {'a': np.array([3.0, 0.0]), 'b': np.array([4.0])}
    clipped, norm = nc.clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum(np.sum(g ** 2) for g in clipped.values()))
    assert total == pytest.approx(1.0, rel=1e-9)


def test_adam_minimizes_a_quadratic():
    p = nc.Tensor(np.array([4.0, -3.0]), requires_grad=True)
    opt = nc.Adam({'p': p}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        nc.backward(nc.tsum(nc.square(p - np.array([1.0, 2.0]))))
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, 2.0], atol=1e-2)


if __name__ == "__main__":
    sys.exit(run_tests(dict(globals()), "Testing autodiff core"))
