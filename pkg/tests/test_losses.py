import numpy as np
import pytest

from cloudcam import tensor as T
from cloudcam.errors import ConfigError, DomainError, ShapeError, UndefinedCorrelationError
from cloudcam.losses import (LossConfig, evaluate_fields, improvement_pct, improvement_pct_rounded, l2_loss, mae,
                             mse, mto_loss, pearson)
from cloudcam.tensor import Tensor


def test_l2_hand_values():
    assert l2_loss(np.array([0.0, 0.0]), np.array([1.0, 1.0])).item() == 1.0
    assert l2_loss(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0])).item() == 0.0
    # (1 + 4 + 0 + 9) / 4
    assert l2_loss(np.array([[0.0, 0.0], [1.0, 3.0]]), np.array([[1.0, 2.0], [1.0, 0.0]])).item() == 3.5


def test_mto_unit_errors_gives_sixteen():
    z, o = np.zeros((1, 4, 4)), np.ones((1, 4, 4))
    assert mto_loss(z, o, z, o, LossConfig(1.0, 15.0)).item() == 16.0


def test_mto_is_weighted_sum_exactly(rng):
    a, b, c, d = (rng.normal(size=(1, 8, 8)) for _ in range(4))
    got = mto_loss(a, b, c, d, LossConfig(1.0, 15.0)).item()
    assert got == 1.0 * l2_loss(a, b).item() + 15.0 * l2_loss(c, d).item()


def test_mto_without_cer_term_is_l2(rng):
    a, b, c, d = (rng.normal(size=(1, 8, 8)) for _ in range(4))
    assert mto_loss(a, b, c, d, LossConfig(1.0, 0.0)).item() == l2_loss(a, b).item()


def test_mse_shares_l2_definition(rng):
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    assert mse(a, b) == pytest.approx(l2_loss(a, b).item(), rel=1e-15)


def test_l2_gradient():
    y = Tensor([1.0, 3.0], requires_grad=True)
    T.backward(l2_loss(np.array([0.0, 0.0]), y))
    np.testing.assert_allclose(y.grad, [1.0, 3.0])


@pytest.mark.parametrize("cfg", [LossConfig(-1, 1), LossConfig(1, -1), LossConfig(0, 0)])
def test_bad_weights(cfg):
    z = np.zeros((2, 2))
    with pytest.raises(ConfigError):
        mto_loss(z, z, z, z, cfg)


def test_shape_errors():
    with pytest.raises(ShapeError):
        l2_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        l2_loss(np.zeros(0), np.zeros(0))
    with pytest.raises(ShapeError):
        mae(np.zeros(3), np.zeros(2))


def test_mae_mse_small_example():
    assert mae([0.0, 2.0], [1.0, 1.0]) == 1.0
    assert mse([0.0, 2.0], [1.0, 1.0]) == 1.0


def test_pearson_self_and_anti(rng):
    y = rng.normal(size=(10, 10))
    assert pearson(y, y) == pytest.approx(1.0, abs=1e-12)
    assert pearson(y, -y) == pytest.approx(-1.0, abs=1e-12)


def test_pearson_against_numpy(rng):
    t, y = rng.normal(size=50), rng.normal(size=50)
    assert pearson(t, y) == pytest.approx(np.corrcoef(t, y)[0, 1], abs=1e-12)


def test_pearson_constant_raises():
    with pytest.raises(UndefinedCorrelationError):
        pearson(np.ones(5), np.arange(5.0))
    with pytest.raises(UndefinedCorrelationError):
        pearson(np.arange(5.0), np.full(5, 2.0))


@pytest.mark.parametrize("a,b", [(2.5, 1.0), (0.01, -3.0), (-1.7, 0.4)])
def test_pearson_affine(a, b, rng):
    t, y = rng.normal(size=200), rng.normal(size=200)
    r = pearson(t, y)
    assert abs(pearson(t, a * y + b) - np.sign(a) * r) <= 1e-12


def test_mae_bounded_by_rmse(rng):
    for _ in range(100):
        t, y = rng.normal(size=(16, 16)), rng.standard_cauchy(size=(16, 16))
        assert mae(t, y) <= np.sqrt(mse(t, y)) + 1e-15


def test_mask():
    t = np.array([0.0, 1.0, 2.0, 3.0])
    y = np.array([5.0, 1.0, 2.0, 4.0])
    m = t > 0
    assert mae(t, y, m) == pytest.approx(1.0 / 3.0)
    with pytest.raises(ShapeError):
        mae(t, y, np.zeros(4, dtype=bool))


def test_improvement_pct():
    assert improvement_pct_rounded(0.176, 0.043) == 76
    # 100 * 1.772 / 2.024 = 87.55..., so this pair rounds to 88; 86 needs a model MAE near 0.291
    assert improvement_pct_rounded(2.024, 0.252) == 88
    assert improvement_pct_rounded(2.024, 0.291) == 86
    assert improvement_pct(1.0, 1.0) == 0.0
    assert improvement_pct(1.0, 2.0) == -100.0
    for bad in (0.0, -1.0):
        with pytest.raises(DomainError):
            improvement_pct(bad, 0.1)


def test_evaluate_fields_averages_profiles(rng):
    pairs = []
    maes = []
    for _ in range(3):
        tc, pc = rng.uniform(0, 3, (8, 8)), rng.uniform(0, 3, (8, 8))
        tr, pr = rng.uniform(5, 30, (8, 8)), rng.uniform(5, 30, (8, 8))
        pairs.append((tc, pc, tr, pr))
        maes.append((mae(tc, pc), mae(tr, pr)))
    rep = evaluate_fields(pairs)
    assert rep.cot.mae == pytest.approx(np.mean([m[0] for m in maes]), rel=1e-14)
    assert rep.cer.mae == pytest.approx(np.mean([m[1] for m in maes]), rel=1e-14)
    assert len(rep.per_profile) == 3


def test_report_baseline_fill():
    pairs = [(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 2.5]), np.array([5.0, 6.0, 7.0]),
              np.array([5.0, 6.0, 8.0]))]
    base = [(np.array([0.0, 1.0, 2.0]), np.array([1.0, 1.0, 2.5]), np.array([5.0, 6.0, 7.0]),
             np.array([7.0, 6.0, 8.0]))]
    rep = evaluate_fields(pairs).with_baseline(evaluate_fields(base))
    assert rep.cot.impv_over_baseline_pct == pytest.approx(100 * (0.5 - 1 / 6) / 0.5)
    assert rep.cer.impv_over_baseline_pct == pytest.approx(100 * (1.0 - 1 / 3) / 1.0)
