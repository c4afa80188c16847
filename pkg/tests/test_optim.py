import numpy as np
import pytest

from usr.errors import NumericError, DimensionError, ParameterError
from usr.nn import Parameter
from usr.optim import Adam, AdamState, adam_step


def _param(values, name='p'):
    p = Parameter((len(values),))
    p.data = np.array(values, dtype=np.float64)
    p.name = name
    return p


class TestAdam:

    def test_matches_reference(self):
        p = _param([1.0, -2.0])
        state = AdamState(lr=0.1, beta1=0.9, beta2=0.99, eps=1e-8)
        grads = [np.array([0.5, -1.0]), np.array([0.1, 0.2]), np.array([-0.3, 0.0])]
        x, m, v = p.data.copy(), np.zeros(2), np.zeros(2)
        for t, g in enumerate(grads, start=1):
            adam_step([p], [g], state)
            m = 0.9 * m + 0.1 * g
            v = 0.99 * v + 0.01 * g * g
            x = x - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-12)
        assert state.step == 3

    def test_first_step_moves_by_lr(self):
        p = _param([0.0])
        adam_step([p], [np.array([3.0])], AdamState(lr=0.01))
        assert p.data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_non_finite_gradient_leaves_everything(self):
        a, b = _param([1.0], 'a'), _param([2.0], 'b')
        state = AdamState()
        with pytest.raises(NumericError):
            adam_step([a, b], [np.array([1.0]), np.array([np.inf])], state)
        assert a.data[0] == 1.0 and state.step == 0 and not state.m

    @pytest.mark.parametrize('names', [('', ''), ('w', 'w'), ('w', '')])
    def test_moments_need_distinct_names(self, names):
        a, b = _param([1.0], names[0]), _param([2.0], names[1])
        state = AdamState(lr=0.1)
        with pytest.raises(ParameterError):
            adam_step([a, b], [np.array([1.0]), np.array([-1.0])], state)
        assert a.data[0] == 1.0 and b.data[0] == 2.0
        assert state.step == 0 and not state.m

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step([_param([1.0])], [np.zeros(2)], AdamState())

    def test_missing_gradient_counts_as_zero(self):
        p = _param([1.0])
        opt = Adam([p], lr=0.1)
        opt.step()
        assert p.data[0] == 1.0
        assert opt.grad_norm() == 0.0
