import numpy as np
import pytest
import torch

from gendistill.diffusion import (
    NoiseSchedule,
    TimestepSet,
    add_noise,
    predict_x0_from_eps,
    sample_student_timestep,
)


@pytest.mark.parametrize("make", [NoiseSchedule.cosine, NoiseSchedule.linear])
def test_schedules_variance_preserving(make):
    s = make(1000)
    assert s.t_max == 999
    assert torch.allclose(s.alphas**2 + s.sigmas**2, torch.ones(1000, dtype=torch.float64))
    assert s.alpha(999) > 0


def test_cosine_starts_clean():
    s = NoiseSchedule.cosine(100)
    assert s.alpha(0) == 1.0 and s.sigma(0) == 0.0


def test_schedule_rejects_bad_input():
    with pytest.raises(ValueError, match="variance"):
        NoiseSchedule(torch.tensor([1.0, 0.5]), torch.tensor([0.0, 0.5]))
    with pytest.raises(ValueError, match="strictly"):
        NoiseSchedule.from_alphas([1.0, 0.9, 0.95])
    with pytest.raises(ValueError):
        NoiseSchedule.cosine(10).alpha(10)


def test_schedule_dict_round_trip():
    s = NoiseSchedule.linear(50)
    assert torch.allclose(NoiseSchedule.from_dict(s.to_dict()).sigmas, s.sigmas)


def test_add_noise_and_inverse():
    s = NoiseSchedule.cosine(100)
    x0, eps = torch.rand(4, 3, 5, 5, dtype=torch.float64), torch.randn(4, 3, 5, 5, dtype=torch.float64)
    t = torch.tensor([0, 10, 50, 99])
    xt = add_noise(x0, t, eps, s)
    assert torch.allclose(xt[2], s.alpha(50) * x0[2] + s.sigma(50) * eps[2])
    assert torch.allclose(predict_x0_from_eps(xt, t, eps, s), x0)
    assert torch.equal(add_noise(x0, 0, eps, s), x0)
    with pytest.raises(ValueError):
        add_noise(x0, 100, eps, s)
    with pytest.raises(ValueError, match="shape"):
        add_noise(x0, 1, eps[:2], s)


def test_timestep_set():
    with pytest.raises(ValueError):
        TimestepSet(())
    with pytest.raises(ValueError):
        TimestepSet((5, 5))
    ts = TimestepSet((250, 500, 750, 999))
    with pytest.raises(ValueError):
        ts.validate(NoiseSchedule.cosine(500))
    rng = np.random.default_rng(0)
    draws = [sample_student_timestep(ts, rng) for _ in range(400)]
    assert set(draws) == set(ts.taus)
