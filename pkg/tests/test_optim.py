import math

import numpy as np
import pytest

from tempdistill.optim import AdamWHyper, AdamWState, adamw_step, cosine_lr


def reference_adamw(p, grads, lr, b1, b2, eps, wd):
    """Scalar transcription of the update, written out step by step."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * wd * p
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        h = AdamWHyper(weight_decay=0.0)
        p = [np.array([1.0, -2.0])]
        out, _ = adamw_step(p, [np.zeros(2)], AdamWState.zeros_like(p), h)
        assert np.array_equal(out[0], p[0])

    def test_decoupled_decay(self):
        h = AdamWHyper(lr=0.1, weight_decay=0.2)
        p = [np.array([3.0])]
        state = AdamWState.zeros_like(p)
        for step in range(1, 4):
            p, state = adamw_step(p, [np.zeros(1)], state, h)
            assert p[0][0] == pytest.approx(3.0 * (1 - 0.1 * 0.2) ** step, rel=1e-15)

    def test_three_steps_against_reference(self):
        h = AdamWHyper(lr=1e-2, beta1=0.8, beta2=0.95, eps=1e-6, weight_decay=0.05)
        grads = [0.7, -1.3, 0.25]
        p = [np.array([0.4])]
        state = AdamWState.zeros_like(p)
        for g in grads:
            p, state = adamw_step(p, [np.array([g])], state, h)
        want = reference_adamw(0.4, grads, h.lr, h.beta1, h.beta2, h.eps, h.weight_decay)
        assert abs(p[0][0] - want) < 1e-12
        assert state.step == 3

    def test_inputs_untouched(self):
        p = [np.array([1.0])]
        state = AdamWState.zeros_like(p)
        adamw_step(p, [np.array([0.5])], state, AdamWHyper())
        assert p[0][0] == 1.0 and state.step == 0 and state.m[0][0] == 0.0

    def test_shape_mismatch(self):
        p = [np.zeros(2)]
        with pytest.raises(ValueError):
            adamw_step(p, [np.zeros(3)], AdamWState.zeros_like(p), AdamWHyper())
        with pytest.raises(ValueError):
            adamw_step(p, [], AdamWState.zeros_like(p), AdamWHyper())

    def test_lr_override(self):
        p = [np.array([1.0])]
        a, _ = adamw_step(p, [np.array([1.0])], AdamWState.zeros_like(p), AdamWHyper(weight_decay=0), lr=0.5)
        assert a[0][0] == pytest.approx(0.5, abs=1e-7)


class TestCosine:
    @pytest.mark.parametrize("step,expected", [(0, 2e-4), (50, 1e-4), (100, 0.0), (150, 0.0)])
    def test_schedule_points(self, step, expected):
        assert cosine_lr(step, 100, 2e-4) == pytest.approx(expected, abs=1e-18)

    def test_monotone(self):
        lrs = [cosine_lr(s, 40, 1.0) for s in range(41)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_floor(self):
        assert cosine_lr(10, 10, 1.0, min_lr=0.1) == pytest.approx(0.1)
