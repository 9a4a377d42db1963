import math

import numpy as np
import pytest

from ccgan.schedule import ScheduleConfig, consistency_weight, learning_rate, rampup, sample_lambda


def test_rampup_endpoints_and_midpoint():
    assert rampup(0, 200) == pytest.approx(math.exp(-5), abs=1e-15)
    assert rampup(100, 200) == pytest.approx(math.exp(-1.25), abs=1e-15)
    assert rampup(200, 200) == 1.0
    assert rampup(500, 200) == 1.0


def test_rampup_is_monotone():
    vals = [rampup(e, 50) for e in range(80)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_learning_rate_schedule():
    cfg = ScheduleConfig()
    assert learning_rate(0, cfg) == cfg.base_lr
    assert learning_rate(399, cfg) == cfg.base_lr
    assert learning_rate(500, cfg) == pytest.approx(cfg.base_lr / 2)
    assert learning_rate(599, cfg) == pytest.approx(cfg.base_lr / 200)
    with pytest.raises(ValueError):
        learning_rate(600, cfg)


def test_consistency_weight_scales_rampup():
    cfg = ScheduleConfig(lambda_cons_max=10.0)
    assert consistency_weight(0, cfg) == pytest.approx(10 * math.exp(-5))
    assert consistency_weight(cfg.rampup_epochs, cfg) == 10.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(total_epochs=10, rampup_epochs=20)
    with pytest.raises(ValueError):
        ScheduleConfig(ema_k=1.1)
    with pytest.raises(ValueError):
        rampup(-1, 10)


@pytest.mark.parametrize("alpha", [0.1, 1.0, 2.0])
def test_beta_moments(alpha):
    draws = np.array([sample_lambda(alpha, (9, i)) for i in range(20000)])
    assert ((draws >= 0) & (draws <= 1)).all()
    mean, var = 0.5, 1.0 / (4.0 * (2.0 * alpha + 1.0))
    assert abs(draws.mean() - mean) < 0.02
    assert abs(draws.var() - var) < 0.02


def test_sample_lambda_deterministic():
    assert sample_lambda(0.1, (1, 2)) == sample_lambda(0.1, (1, 2))
    with pytest.raises(ValueError):
        sample_lambda(0.0, 0)
