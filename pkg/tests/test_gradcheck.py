import numpy as np
import pytest

from relchain.autodiff import ops
from relchain.gradcheck import (
    TOLERANCE,
    CheckResult,
    check_function,
    check_models,
    fixture_instances,
    model_specs,
    numeric_grad,
    rel_error,
)
from relchain.kb import Relation


def test_rel_error_uses_floor():
    assert rel_error([1e-9], [0.0]) == pytest.approx(1e-3)
    assert rel_error([2.0], [1.0]) == 0.5
    assert rel_error([], []) == 0.0


def test_numeric_grad_restores_input():
    x = np.array([1.0, 2.0, 3.0])
    g = numeric_grad(lambda: float(np.sum(x ** 3)), x)
    np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-8)
    np.testing.assert_array_equal(x, [1.0, 2.0, 3.0])


def test_check_function_catches_a_wrong_gradient(rng):
    from relchain.autodiff.tensor import make_result

    def bad_square(x):
        # forward x^2, backward claims 3x
        return make_result(x.data ** 2, (x,), lambda g: (3 * x.data * g,), "bad_square")

    err, _ = check_function(bad_square, [rng.normal(size=(3,)) + 2], rng)
    assert err > TOLERANCE
    good, _ = check_function(lambda x: ops.mul(x, x), [rng.normal(size=(3,))], rng)
    assert good <= TOLERANCE


def test_fixture_instances_resolve():
    a, b = fixture_instances()
    assert (a.k, b.k) == (3, 2)
    assert b.target == Relation("nephew")
    assert a.num_entities == 4


def test_every_variant_is_covered():
    names = [n for n, _ in model_specs()]
    assert len(names) == 15 and len(set(names)) == 15


@pytest.mark.parametrize("name", [n for n, _ in model_specs()])
def test_model_gradients(name):
    (result,) = check_models(seed=2, names=[name])
    assert result.ok, result.line()


def test_line_format():
    assert CheckResult("add", 2e-5, 10, 0.01).line().endswith("ok")
    assert CheckResult("add", 2e-3, 10, 0.01).line().endswith("FAIL")
