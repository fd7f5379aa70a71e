import numpy as np
import pytest

from dmole.autograd import Tensor, mean, mul
from dmole.gradcheck import (check_gradients, get_recommendation, get_verification_summary, model_case,
                             relative_error, verify_gradients)


def test_full_model_loss_matches_central_differences():
    name, loss_fn, params = model_case(np.random.default_rng(0))
    report = check_gradients(loss_fn, params, name)
    assert report['status'] == 'pass', report['max_rel_error']


def test_verify_gradients_report():
    report = verify_gradients(trials=3, seed=1)
    assert report['status'] == 'pass'
    assert report['failed_cases'] == []
    assert len(report['results']) == 3 * (9 + 1)
    assert [r['trial'] for r in report['results'] if r['name'] == 'toy_model'] == [0, 1, 2]
    assert report['max_rel_error'] < 1e-4
    assert get_verification_summary(report) == '验证通过 ✅'


def test_wrong_gradient_is_reported():
    a = Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True, name='a')
    # 第二个因子是脱离计算带的副本，解析梯度只有真实值的一半
    report = check_gradients(lambda: mean(mul(a, Tensor(a.data.copy()))), [a], 'detached_square')
    assert report['status'] == 'fail'
    assert report['params']['a'] > 0.4
    summary = {'status': 'fail', 'failed_cases': ['detached_square'], 'max_rel_error': report['max_rel_error']}
    assert 'detached_square' in get_recommendation(summary)
    assert get_verification_summary(summary) == '需要检查 ⚠️'


def test_relative_error_near_zero_is_absolute():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-10
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0


@pytest.mark.slow
def test_full_model_passes_on_every_trial():
    report = verify_gradients(trials=100, seed=0)
    model_results = [r for r in report['results'] if r['name'] == 'toy_model']
    assert len(model_results) == 100
    assert all(r['status'] == 'pass' for r in model_results), max(r['max_rel_error'] for r in model_results)
    assert report['status'] == 'pass'
