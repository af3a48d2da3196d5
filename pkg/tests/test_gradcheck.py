import numpy as np
import pytest

from ldnkit.gradcheck import KERNEL_CASES, TOLERANCE, GradCheckResult, checkKernel, checkKernels, numericGradient


@pytest.mark.parametrize("name", sorted(KERNEL_CASES))
def test_kernel_gradients(name):
    result = checkKernel(name, trials=3)
    assert result.passed, str(result)


@pytest.mark.slow
def test_kernel_gradients_full_suite():
    results = checkKernels()
    assert len(results) == len(KERNEL_CASES)
    for result in results:
        assert result.trials == 25
        assert result.maxRelativeError <= TOLERANCE, str(result)


def test_numeric_gradient_of_square():
    inputs = {"x": np.array([1.0, -2.0, 3.0])}
    grad = numericGradient(lambda a: float(np.sum(a["x"] ** 2)), inputs, "x")
    np.testing.assert_allclose(grad, [2.0, -4.0, 6.0], rtol=1e-6)


def test_result_line():
    assert str(GradCheckResult("relu", 25, 1e-9, 1e-6)) == "relu: max_rel_error=1.000e-09 trials=25 ok"
    assert not GradCheckResult("relu", 25, 1e-3, 1e-6).passed


def test_unknown_kernel():
    with pytest.raises(KeyError):
        checkKernel("winograd")
