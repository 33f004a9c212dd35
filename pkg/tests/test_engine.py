import numpy as np
import pytest

from skymask_fl import nn
from skymask_fl.attacks import Attack
from skymask_fl.data import gen_synthetic, rng_for
from skymask_fl.engine import (
    ClientUpdate,
    DetectionReport,
    FedAvg,
    Federation,
    FLParams,
    RoundState,
    detection_rates,
    fedavg,
    local_train,
    malicious_flags,
    run_round,
)
from skymask_fl.exceptions import UsageError


@pytest.fixture
def small_fed():
    lay = nn.LayerLayout((4, 6, 3))
    ds = gen_synthetic(3, 4, 200, 0.3, 0)
    clients = [ds.subset(np.arange(i, 200, 5)) for i in range(5)]
    fed = Federation(lay, clients, malicious_flags(5, 0.2), ds.subset(np.arange(20)),
                     FLParams(local_iters=3, lr=0.1, batch_size=16), seed=1)
    W0 = nn.init_params(lay, rng_for(0, "w0"))
    return fed, W0


def _upd(cid, delta, size):
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    return ClientUpdate(cid, -delta, delta, size)


def test_zero_lr_gives_zero_update(small_fed):
    fed, W0 = small_fed
    u = local_train(W0, fed.clients[0], fed.layout, FLParams(3, 0.0), seed=0)
    np.testing.assert_array_equal(u.weights, W0)
    assert not np.any(u.update)


def test_single_full_batch_step_matches_gradient(small_fed):
    fed, W0 = small_fed
    data = fed.clients[1]
    u = local_train(W0, data, fed.layout, FLParams(1, 0.3, batch_size=len(data)), seed=0)
    _, g = nn.loss_and_grad(W0, fed.layout, data.X, data.y)
    np.testing.assert_allclose(u.update, 0.3 * g, atol=1e-14)
    assert u.dataset_size == len(data)


def test_local_train_deterministic(small_fed):
    fed, W0 = small_fed
    a = local_train(W0, fed.clients[2], fed.layout, fed.fl, seed=9, client_id=2)
    b = local_train(W0, fed.clients[2], fed.layout, fed.fl, seed=9, client_id=7)
    np.testing.assert_array_equal(a.update, b.update)
    with pytest.raises(UsageError):
        local_train(W0, fed.clients[2], fed.layout, FLParams(0), seed=0)


def test_empty_client_contributes_nothing(small_fed):
    fed, W0 = small_fed
    empty = fed.clients[0].subset([])
    u = local_train(W0, empty, fed.layout, fed.fl, seed=0)
    assert u.dataset_size == 0 and not np.any(u.update)


def test_fedavg_arithmetic():
    W = np.array([10.0])
    assert fedavg(W, [_upd(0, 2.0, 5)], 0.5)[0] == pytest.approx(9.0)
    assert fedavg(W, [_upd(0, 1.0, 4), _upd(1, -1.0, 4)])[0] == pytest.approx(10.0)
    ups = [_upd(0, 6.0, 1), _upd(1, 3.0, 2), _upd(2, 2.0, 3)]
    assert fedavg(W, ups, 1.0)[0] == pytest.approx(7.0, abs=1e-12)
    with pytest.raises(UsageError):
        fedavg(W, [])
    with pytest.raises(UsageError):
        fedavg(W, [_upd(0, 1.0, 0)])


def test_malicious_flags_count():
    assert malicious_flags(20, 0.2).sum() == 4
    assert malicious_flags(10, 0.25).sum() == 3
    assert malicious_flags(7, 0.0).sum() == 0
    with pytest.raises(UsageError):
        malicious_flags(5, 1.0)


def test_detection_rates():
    truth = np.array([1, 1, 0, 0, 0], bool)
    flagged = np.array([1, 0, 1, 0, 0], bool)
    assert detection_rates(flagged, truth) == (pytest.approx(1 / 3), 0.5)
    assert detection_rates(flagged, np.zeros(5, bool))[1] is None
    rep = DetectionReport(malicious=flagged, truth=truth)
    assert rep.benign_set == [1, 3, 4]


def test_fedavg_round_without_attack(small_fed):
    fed, W0 = small_fed
    state, report = run_round(RoundState(0, W0), fed, FedAvg(), None)
    assert report is None and state.t == 1
    expected = fedavg(W0, [fed.train(i, W0, d, 0) for i, d in enumerate(fed.clients)])
    np.testing.assert_array_equal(state.W, expected)
    assert not state.W.flags.writeable


class _Recorder(Attack):
    def craft(self, ctx):
        self.seen = list(ctx.malicious)
        return np.zeros((ctx.n_malicious, ctx.honest.shape[1]))


def test_attack_touches_only_malicious(small_fed):
    fed, W0 = small_fed
    atk = _Recorder()
    state, _ = run_round(RoundState(0, W0), fed, FedAvg(), atk)
    assert atk.seen == [0]
    assert not np.any(state.updates[0].update)
    np.testing.assert_array_equal(state.updates[0].weights, W0)
    assert np.any(state.updates[1].update)


def test_round_is_bit_reproducible(small_fed):
    fed, W0 = small_fed
    a, _ = run_round(RoundState(0, W0), fed, FedAvg(), None)
    b, _ = run_round(RoundState(0, W0), fed, FedAvg(), None)
    assert a.W.tobytes() == b.W.tobytes()
