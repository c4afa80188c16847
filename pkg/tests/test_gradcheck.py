import numpy as np
import pytest

from usr.autograd import Function, Tensor
from usr.errors import GradCheckFailure, ParameterError
from usr.gradcheck import grad_check, run_suite, require_pass, GradCheckResult


class ScaledSquare(Function):
    """
    1e-6 * x**2 with a backward that drops half the gradient
    """

    def forward(self, x):
        self.x = x
        return 1e-6 * x * x

    def backward(self, grad):
        return (grad * 1e-6 * self.x,)


class TestGradCheck:

    def test_polynomial(self):
        x = Tensor(np.array([0.5, -1.5, 2.0]))
        assert grad_check(lambda: (x * x * x).sum(), [x]) < 1e-7

    def test_detects_wrong_gradient(self):
        x = Tensor(np.array([1.0, 2.0]))

        def fn():
            # detach hides the square from backpropagation
            return (x * Tensor(x.data.copy())).sum()

        assert grad_check(fn, [x]) > 0.1

    def test_needs_scalar(self):
        x = Tensor(np.ones(3))
        with pytest.raises(ParameterError):
            grad_check(lambda: x * 2.0, [x])

    def test_sampled_coordinates(self):
        x = Tensor(np.linspace(-1.0, 1.0, 50))
        assert grad_check(lambda: (x * x).sum(), [x], max_coords=10, seed=3) < 1e-7


class TestSuites:

    @pytest.mark.parametrize('module', ['nn', 'aude', 'vddc'])
    def test_every_case_passes(self, module):
        results = run_suite(module)
        assert results
        assert all(r.module == module for r in results)
        failed = [(r.name, r.error) for r in results if not r.passed]
        assert failed == []

    def test_nn_cases(self):
        names = {r.name for r in run_suite('nn')}
        assert {'conv2d', 'depthwise_dynamic_conv', 'pixel_shuffle', 'window_msa', 'layer_norm'} <= names

    def test_unknown_module(self):
        with pytest.raises(ParameterError):
            run_suite('optim')

    def test_require_pass(self):
        require_pass([GradCheckResult('nn', 'ok', 1e-9)])
        with pytest.raises(GradCheckFailure) as info:
            require_pass([GradCheckResult('nn', 'ok', 1e-9), GradCheckResult('vddc', 'bad', 1e-2)])
        assert 'vddc/bad' in str(info.value)
        assert info.value.exit_code == 3


class TestSmallGradients:

    def test_half_gradient_at_small_scale_fails(self):
        x = Tensor(np.array([1.0, -0.7, 2.5]))
        assert grad_check(lambda: ScaledSquare.apply(x).sum(), [x]) == pytest.approx(0.5, rel=1e-3)

    @pytest.mark.parametrize('scale', [1e-9, 1e-3, 1.0, 1e4])
    def test_correct_gradient_passes_at_any_scale(self, scale):
        x = Tensor(np.array([0.3, -1.2, 2.0, 0.05]))
        assert grad_check(lambda: (x * x * x).sum() * scale, [x]) < 1e-7

    def test_zero_gradient_passes(self):
        x = Tensor(np.array([1.0, 2.0]))
        y = Tensor(np.array([3.0]))
        assert grad_check(lambda: (x * x).sum() + y * 0.0, [x, y]) < 1e-7

    def test_missing_small_term_is_caught(self):
        x = Tensor(np.array([1.0, 2.0]))

        def fn():
            # the second term never reaches backpropagation
            return (x * x).sum() + (Tensor(x.data.copy()) * 1e-3).sum()

        assert grad_check(fn, [x]) > 1e-5
