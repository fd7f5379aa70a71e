import numpy as np
import pytest

from dmole.errors import ContractError
from dmole.router import (TaskAutoencoder, calibrate_threshold, export_router_embeddings, route, route_batch,
                          select_transfer_expert, train_autoencoder)


def _cluster(center, n=40, seed=0):
    rng = np.random.default_rng(seed)
    return center + 0.1 * rng.normal(size=(n, center.shape[0]))


def _stub_router(task_id, losses_by_row, threshold):
    """重构损失固定的假路由器（按样本第0维取损失）"""
    ae = TaskAutoencoder(task_id, 2, hidden=2)
    ae.reconstruction_loss = lambda z: np.array([losses_by_row[int(row[0])] for row in np.atleast_2d(z)])
    ae.trained = True
    ae.threshold = threshold
    return ae


@pytest.fixture(scope='module')
def two_routers():
    rng = np.random.default_rng(5)
    centers = {1: rng.normal(size=6) * 3, 2: rng.normal(size=6) * 3}
    routers = []
    for task_id, center in centers.items():
        feats = _cluster(center, seed=task_id)
        ae = train_autoencoder(feats, task_id, hidden=8, epochs=60, learning_rate=0.01, seed=task_id)
        calibrate_threshold(ae, feats)
        routers.append(ae)
    return routers, centers


def test_training_reduces_reconstruction_loss(two_routers):
    routers, _ = two_routers
    for ae in routers:
        assert ae.loss_history[-1] < ae.loss_history[0]
        assert all(not p.requires_grad for p in ae.parameters())


def test_threshold_is_scale_times_max_training_loss(two_routers):
    routers, centers = two_routers
    ae = routers[0]
    feats = _cluster(centers[1], seed=1)
    assert ae.threshold == pytest.approx(1.2 * ae.reconstruction_loss(feats).max())
    assert ae.max_train_loss == pytest.approx(ae.reconstruction_loss(feats).max())


def test_every_training_sample_admits_its_own_router(two_routers):
    routers, centers = two_routers
    for ae in routers:
        feats = _cluster(centers[ae.task_id], seed=ae.task_id)
        decisions = route_batch(routers, feats, k=1)
        assert all(ae.task_id in d.relevant for d in decisions)


def test_far_away_sample_falls_back(two_routers):
    routers, centers = two_routers
    far = np.full(6, 100.0)
    decision = route(routers, far)
    assert decision.fallback
    assert decision.active == ()
    assert decision.gate(1) == 0


def test_ranking_and_top_k_truncation():
    routers = [_stub_router(t, {0: loss}, 1.0) for t, loss in ((1, 0.5), (2, 0.2), (3, 0.9), (4, 1.5))]
    decision = route(routers, np.array([0.0, 0.0]), k=2)
    assert decision.relevant == (1, 2, 3)
    assert decision.ranking == (2, 1, 3)
    assert decision.active == (2, 1)
    assert not decision.fallback
    assert route(routers, np.array([0.0, 0.0]), k=5).active == (2, 1, 3)


def test_equal_losses_rank_lower_task_first():
    routers = [_stub_router(t, {0: 0.3}, 1.0) for t in (3, 1, 2)]
    assert route(routers, np.zeros(2), k=2).active == (1, 2)


def test_threshold_factor_scales_admission():
    routers = [_stub_router(1, {0: 0.5}, 1.0)]
    assert route(routers, np.zeros(2), threshold_factor=0.1).fallback
    assert not route(routers, np.zeros(2), threshold_factor=10).fallback


def test_route_batch_matches_single_routing():
    routers = [_stub_router(t, {0: 0.2 * t, 1: 1.0 - 0.2 * t}, 0.7) for t in (1, 2, 3)]
    batch = np.array([[0.0, 0.0], [1.0, 0.0]])
    decisions = route_batch(routers, batch, k=2)
    for row, decision in zip(batch, decisions):
        assert decision == route(routers, row, k=2)


def test_no_routers_means_fallback():
    decisions = route_batch([], np.zeros((3, 2)))
    assert all(d.fallback for d in decisions)


def test_contract_errors():
    ae = TaskAutoencoder(1, 2, hidden=2)
    with pytest.raises(ContractError):
        calibrate_threshold(ae, np.zeros((2, 2)))
    with pytest.raises(ContractError):
        route([ae], np.zeros(2))
    with pytest.raises(ContractError):
        route([], np.zeros(2), k=0)
    with pytest.raises(ContractError):
        train_autoencoder(np.zeros((1, 2)), 1)


def test_transfer_expert_is_lowest_mean_loss():
    routers = [_stub_router(1, {0: 0.9}, 1.0), _stub_router(2, {0: 0.1}, 1.0)]
    assert select_transfer_expert(routers, np.zeros((4, 2))) == 2
    assert select_transfer_expert([], np.zeros((4, 2))) is None


def test_export_router_embeddings(tmp_path, two_routers):
    import pandas as pd

    routers, centers = two_routers
    path = export_router_embeddings(routers, {1: _cluster(centers[1], n=5), 2: _cluster(centers[2], n=3)},
                                    tmp_path / 'router_embeddings.csv')
    frame = pd.read_csv(path)
    assert len(frame) == 8
    assert {'source_task', 'sample', 'z0', 'loss_t1', 'loss_t2'} <= set(frame.columns)
