import numpy as np
import pytest

from spattend import gradcheck
from spattend import tensor as T
from spattend.cli import main

FAST_SEEDS = 3


@pytest.mark.parametrize("name", [n for n in gradcheck.registry() if n != "model"])
def test_op_passes(name):
    for r in gradcheck.run([name], seeds=FAST_SEEDS)[name]:
        assert r.max_error <= gradcheck.OP_TOLERANCE, r


def _broken_square(x):
    """Square whose backward is off by a factor of 3."""
    x = T.as_tensor(x)
    return T._make(x.data * x.data, [x], lambda g: [6.0 * x.data * g])


def test_corrupted_backward_is_caught():
    case = gradcheck.Case("broken", lambda r: (_broken_square, [r.standard_normal((3,))]))
    assert not gradcheck.check(case, 0).passed
    assert main(["gradcheck", "--ops", "broken", "--seeds", "2"], gradcheck_cases={"broken": case}) == 2


def test_report_is_deterministic():
    a = gradcheck.report(gradcheck.run(["softmax", "lstm_step"], seeds=2))
    b = gradcheck.report(gradcheck.run(["softmax", "lstm_step"], seeds=2))
    assert a == b and a[1]


def test_unknown_op():
    with pytest.raises(KeyError):
        gradcheck.run(["nope"])
    assert main(["gradcheck", "--ops", "nope"]) == 1


def test_zero_gradient_floor():
    # relu on strictly negative inputs: both gradients are exactly zero
    case = gradcheck.Case("neg_relu", lambda r: (T.relu, [-1.0 - r.random((4,))]))
    r = gradcheck.check(case, 0)
    assert r.passed and r.max_error == 0.0
    assert np.isfinite(r.max_error)
