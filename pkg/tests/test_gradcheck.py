"""Finite-difference checker: smooth cases, kinks, and every primitive."""

import numpy as np
import pytest

import signflow.tensor as st
from signflow.tensor import Tensor
from signflow.gradcheck import grad_check


def test_quadratic_form_tight():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    x = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    report = grad_check(lambda t: (t.T @ Tensor(a) @ t).sum(), [x])
    assert report.max_rel_error < 1e-6


def test_relu_at_zero_flagged_and_excluded():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    report = grad_check(lambda t: st.relu(t).sum(), [x])
    assert ("input0", (0,)) in report.excluded
    assert report.passed  # the two smooth coordinates agree


@pytest.mark.parametrize("seed", range(5))
def test_primitive_battery(seed):
    """Each primitive agrees with central differences at random points."""
    rng = np.random.default_rng(seed)

    cases = []
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    cases.append((lambda a, b: (a * b).sum(), [x, y]))
    cases.append((lambda a, b: (a + b).sum(), [x, y]))

    m = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    n = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    cases.append((lambda a, b: ((a @ b) * (a @ b)).sum(), [m, n]))

    z = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    cases.append((lambda a: (st.softmax(a) ** 2).sum(), [z]))
    cases.append((lambda a: st.exp(a * 0.3).sum(), [z]))
    cases.append((lambda a: st.log(st.exp(a) + 1.0).sum(), [z]))
    cases.append((lambda a: st.relu(a).sum(), [z]))
    cases.append((lambda a: (a.reshape((3, 4)) @ Tensor(rng.normal(size=(4, 1)))).sum(), [z]))
    cases.append((lambda a: (a.T ** 2).sum(), [z]))
    cases.append((lambda a: (st.concat([a, a * 2.0], axis=0) ** 2).sum(), [z]))

    table = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    ids = np.array([0, 2, 2, 3])
    cases.append((lambda t: (st.embedding(t, ids) ** 2).sum(), [table]))

    p = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    idx = rng.integers(0, 5, size=4)
    cases.append((lambda a: (st.take_per_row(a, idx) ** 2).sum(), [p]))

    g = Tensor(rng.normal(size=(5,)) * 0.5 + 1.0, requires_grad=True)
    bvec = Tensor(rng.normal(size=(5,)) * 0.1, requires_grad=True)
    h = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    cases.append((lambda a, gg, bb: (st.layer_norm(a, gg, bb) ** 2).sum(), [h, g, bvec]))

    vol = Tensor(rng.normal(size=(3, 4, 4, 2)), requires_grad=True)
    cgain = Tensor(np.ones(2) + rng.normal(size=2) * 0.1, requires_grad=True)
    cbias = Tensor(rng.normal(size=2) * 0.1, requires_grad=True)
    rm, rv = np.zeros(2), np.ones(2)
    cases.append((lambda a, gg, bb: (st.batch_norm(a, gg, bb, rm.copy(), rv.copy(),
                                                   training=True) ** 2).sum(),
                  [vol, cgain, cbias]))

    w = Tensor(rng.normal(size=(2, 2, 2, 2, 3)) * 0.5, requires_grad=True)
    cb = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
    cases.append((lambda a, ww, bb: (st.conv3d(a, ww, bb, stride=(1, 2, 2),
                                               padding=(0, 1, 1)) ** 2).sum(),
                  [vol, w, cb]))
    cases.append((lambda a: (st.max_pool3d(a, kernel=(2, 2, 2), stride=(1, 2, 2)) ** 2).sum(),
                  [vol]))

    sq = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    cases.append((lambda a: (st.softmax(st.causal_mask(a)) ** 2).sum(), [sq]))

    for func, tensors in cases:
        report = grad_check(func, tensors)
        assert report.passed, f"{func}: {report}"
