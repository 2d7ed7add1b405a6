import numpy as np
import pytest

from irisusformer.optim import AdamW, LrSchedule, MissingGradientError, lr_at
from irisusformer.tensor import Tensor


def test_triangular_schedule_values():
    s = LrSchedule()
    assert lr_at(s, 0) == 1e-5
    assert abs(lr_at(s, 2000) - 1e-3) <= 1e-12
    assert abs(lr_at(s, 4000) - 1e-5) <= 1e-12
    assert lr_at(s, 1000) == pytest.approx(1e-5 + 0.5 * (1e-3 - 1e-5))
    assert lr_at(s, 1234) == lr_at(s, 1234 + 3 * 4000)


def test_cosine_schedule_endpoints():
    s = LrSchedule(policy="cosine")
    assert lr_at(s, 0) == 1e-5 and lr_at(s, 2000) == pytest.approx(1e-3, abs=1e-15)
    assert lr_at(s, 1000) == pytest.approx(1e-5 + 0.5 * (1e-3 - 1e-5))


def test_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(lr_min=1e-2, lr_max=1e-3)
    with pytest.raises(ValueError):
        LrSchedule(policy="exp")
    with pytest.raises(ValueError):
        lr_at(LrSchedule(), -1)


def _param(value, grad):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = None if grad is None else np.array([grad])
    return p


def test_adam_first_step():
    p = _param(1.0, 1.0)
    AdamW({"w": p}, weight_decay=0.0).step(0.1)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)


def test_zero_gradient_no_decay_is_noop():
    p = _param(1.5, 0.0)
    AdamW({"w": p}, weight_decay=0.0).step(0.1)
    assert p.data[0] == 1.5


def test_decoupled_decay():
    p = _param(2.0, 0.0)
    AdamW({"w": p}, weight_decay=0.01).step(0.1)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), abs=1e-15)


def test_missing_gradient_is_an_error():
    opt = AdamW({"w": _param(1.0, None)})
    with pytest.raises(MissingGradientError):
        opt.step(0.1)
    opt.step(0.1, allow_missing=True)


def test_adam_matches_reference_sequence(rng):
    # independent re-derivation of the bias-corrected update
    grads = rng.normal(size=(5, 3))
    p = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW({"w": p}, weight_decay=0.05)
    theta, m, v = np.ones(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, 1):
        p.grad = g
        opt.step(1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta * (1 - 1e-2 * 0.05) - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, theta, rtol=1e-14)
