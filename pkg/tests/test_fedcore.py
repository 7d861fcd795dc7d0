import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feddwa import fedcore, nn
from feddwa.config import config_from_dict
from feddwa.divergence import kld, log_softmax
from feddwa.errors import InvalidInputError
from feddwa.fedcore import (ClientState, ClientUpdate, LocalOptions, ServerState, control_contribution,
                            local_round, server_update_fedavg, server_update_feddwa)
from feddwa.losses import DALossConfig, DALossObjective
from feddwa.synthdata import ClientProfile, Geometry, generate_client_dataset

GEOM = Geometry(6, 6, 3, 3)
SIZES = (3, 5, 3)
GOLDEN = Path(__file__).parent / "data" / "scaffold_3rounds.json"


def make_clients(model, n_clients=3, n_samples=6, eta=0.2, seed=0):
    priors = [(0.5, 0.5, 0.0), (0.4, 0.0, 0.6), (0.3, 0.3, 0.4), (0.6, 0.2, 0.2)]
    clients = []
    for cid in range(n_clients):
        p = ClientProfile(cid, n_samples, priors[cid % 4], pose_angle=0.4 * cid, noise_sigma=0.3, seed=seed + cid)
        train, test = generate_client_dataset(p, GEOM)
        clients.append(ClientState.create(cid, train, test, model, eta))
    return clients


@pytest.fixture
def model():
    return nn.init_model(SIZES, seed=1)


def test_zero_gradients_and_matching_controls_keep_model(model, monkeypatch):
    client = make_clients(model, 1)[0]
    c = np.full(model.params.size, 0.3)
    client.c_local = c.copy()

    def zero_grad(m, x, mask, objective=None):
        res = nn.BackwardResult(0.0, np.zeros(m.params.size), nn.forward(m, x), None)
        return res

    monkeypatch.setattr(fedcore.nn, "value_and_grad", zero_grad)
    update = local_round(client, model, c)
    assert np.array_equal(update.params, model.params)


def test_single_sample_step_matches_hand_update(model):
    client = make_clients(model, 1, n_samples=1)[0]
    assert len(client.train) == 1
    s = client.train[0]
    _, g = nn.backward(model, s.input, s.mask)
    update = local_round(client, model, np.zeros(model.params.size))
    assert np.allclose(update.params, model.params - client.eta_local * g, atol=1e-15, rtol=0)
    # the only sample is scored before any step, so its divergence is 0 and T_m vanishes
    assert update.klds == (0.0,)
    assert not update.T.any()


def test_zero_divergence_gives_zero_contribution():
    c = np.random.default_rng(0).standard_normal(10)
    assert not control_contribution(c, 0.0, 7).any()


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 10), st.floats(1.0001, 100), st.integers(1, 50))
def test_contribution_scales_linearly_with_divergence(o_sum, lam, n):
    c = np.linspace(-1, 1, 9)
    base = control_contribution(c, o_sum, n)
    scaled = control_contribution(c, lam * o_sum, n)
    assert np.allclose(scaled, lam * base, rtol=1e-12, atol=0)


def replay_local_round(client, g_model, c_global, loss_cfg, eta, order):
    """Independent re-run of one FedDWA pass: returns (params, c_m, O)."""
    g_prev = g_model.params.copy()
    working = g_prev.copy()
    corr = c_global - client.c_local
    grads, o_sum = [], 0.0
    for i in order:
        s = client.train[i]
        glp = log_softmax(nn.forward(g_model, s.input))
        cur = g_model.with_params(working)
        obj = DALossObjective(loss_cfg, glp, g_prev) if loss_cfg else None
        _, g = nn.backward(cur, s.input, s.mask, obj)
        o_sum += kld(glp, log_softmax(nn.forward(cur, s.input)))
        grads.append(g)
        working = working - eta * (g + corr)
    n = len(order)
    U = eta * (np.sum(grads, axis=0) + corr)
    return g_prev - U / n, np.sum(grads, axis=0) / n, o_sum


@pytest.mark.parametrize("loss_cfg", [None, DALossConfig(C=0.5)])
def test_local_round_bookkeeping_matches_replay(model, loss_cfg):
    client = make_clients(model, 1, n_samples=8)[0]
    client.c_local = 0.01 * np.arange(model.params.size) / model.params.size
    c_global = np.full(model.params.size, 0.02)
    c_before = client.c_local.copy()
    order = fedcore._shuffle_rng(5, 3, client.client_id).permutation(len(client.train))
    shadow = dataclasses.replace(client, c_local=c_before)
    expected_params, expected_c, expected_o = replay_local_round(shadow, model, c_global, loss_cfg,
                                                                 client.eta_local, order)
    update = local_round(client, model, c_global, loss_cfg, round_index=3, shuffle_seed=5)
    assert np.allclose(update.params, expected_params, atol=1e-13, rtol=0)
    assert np.allclose(client.c_local, expected_c, atol=1e-13, rtol=0)
    assert client.O == pytest.approx(expected_o, rel=1e-12)
    assert np.allclose(update.T, (expected_o / len(order)) * expected_c, atol=1e-13, rtol=0)
    # U equals W (scaled as applied) in the default mode
    assert np.allclose(client.U, client.eta_local * (client.W + c_global - c_before), atol=1e-13)


def test_strict_mode_uses_round_start_gradients(model):
    client = make_clients(model, 1, n_samples=5)[0]
    opts = LocalOptions(strict_u_at_round_start=True)
    update = local_round(client, model, np.zeros(model.params.size), None, opts)
    total = sum(nn.backward(model, s.input, s.mask)[1] for s in client.train)
    assert np.allclose(update.params, model.params - client.eta_local * total / len(client.train), atol=1e-14)


def test_sgd_local_update_returns_working_parameters(model):
    client = make_clients(model, 1, n_samples=5)[0]
    order = fedcore._shuffle_rng(0, 0, 0).permutation(len(client.train))
    working = model.params.copy()
    for i in order:
        s = client.train[i]
        working = working - client.eta_local * nn.backward(model.with_params(working), s.input, s.mask)[1]
    update = local_round(client, model, np.zeros(model.params.size), None, LocalOptions(local_update="sgd"))
    assert np.allclose(update.params, working, atol=1e-14)


def test_batched_pass_uses_mean_step(model):
    client = make_clients(model, 1, n_samples=5)[0]
    update = local_round(client, model, np.zeros(model.params.size), None, LocalOptions(batch_size=len(client.train)))
    total = sum(nn.backward(model, s.input, s.mask)[1] for s in client.train)
    assert np.allclose(update.params, model.params - client.eta_local * total / 4, atol=1e-14)


def test_empty_client_is_skipped(model, caplog):
    client = ClientState.create(7, [], [], model, 0.1)
    with caplog.at_level(logging.WARNING):
        assert local_round(client, model, np.zeros(model.params.size)) is None
    assert "client 7" in caplog.text


def _update(cid, params, T=None, n=1):
    return ClientUpdate(cid, np.asarray(params, float), np.zeros(len(params)) if T is None else np.asarray(T, float), n)


def test_server_single_unchanged_client(model):
    for eta_g in (0.3, 1.0, 2.5):
        server = ServerState.create(model, eta_global=eta_g)
        new = server_update_feddwa(server, [_update(0, model.params)])
        assert np.array_equal(new.model.params, model.params)


def test_server_unit_step_is_plain_average(model):
    rng = np.random.default_rng(2)
    server = ServerState.create(model, eta_global=1.0)
    params = [rng.standard_normal(model.params.size) for _ in range(3)]
    new = server_update_feddwa(server, [_update(i, p) for i, p in enumerate(params)])
    assert np.max(np.abs(new.model.params - np.mean(params, axis=0))) < 1e-12


def test_server_control_update(model):
    size = model.params.size
    server = ServerState.create(model)
    server.c_global = np.full(size, 0.5)
    same = server_update_feddwa(server, [_update(0, model.params), _update(1, model.params)])
    assert np.array_equal(same.c_global, server.c_global)
    t1, t2 = np.full(size, 1.0), np.full(size, 3.0)
    new = server_update_feddwa(server, [_update(0, model.params, t1), _update(1, model.params, t2)])
    assert np.allclose(new.c_global, 0.5 + 2.0)


def test_literal_sign_moves_away(model):
    target = model.params + 1.0
    server = ServerState.create(model, literal_eq9=True)
    new = server_update_feddwa(server, [_update(0, target)])
    assert np.allclose(new.model.params, model.params - 1.0)


def test_server_rejects_empty_and_mismatched(model):
    server = ServerState.create(model)
    with pytest.raises(InvalidInputError):
        server_update_feddwa(server, [])
    with pytest.raises(InvalidInputError):
        server_update_fedavg(server, [_update(0, np.zeros(3))])


def test_fedavg_weighting(model):
    rng = np.random.default_rng(4)
    g1, g2 = rng.standard_normal(model.params.size), rng.standard_normal(model.params.size)
    server = ServerState.create(model)
    assert np.array_equal(server_update_fedavg(server, [_update(0, g1, n=5)]).model.params, g1)
    both = server_update_fedavg(server, [_update(0, g1, n=4), _update(1, g2, n=4)]).model.params
    assert np.allclose(both, (g1 + g2) / 2, atol=1e-15)
    skew = server_update_fedavg(server, [_update(1, g2, n=3), _update(0, g1, n=1)]).model.params
    assert np.allclose(skew, 0.25 * g1 + 0.75 * g2, atol=1e-15)


def test_lr_schedule_decays_every_period(model):
    clients = make_clients(model, 2)
    server = ServerState.create(model, lr_decay=0.5, lr_period=2)
    etas = []
    for _ in range(5):
        server = fedcore.run_feddwa_round(server, clients)
        etas.append(clients[0].eta_local)
    fedcore.broadcast(server, clients)
    etas.append(clients[0].eta_local)
    assert etas == [0.2, 0.2, 0.1, 0.1, 0.05, 0.05]


def _trajectory(model, runner, rounds=5, **kw):
    clients = make_clients(model, 3, n_samples=6)
    server = ServerState.create(model)
    history = []
    for _ in range(rounds):
        server = runner(server, clients, **kw)
        history.append((server.model.params.copy(), server.c_global.copy()))
    return history


def test_unit_weight_feddwa_equals_scaffold_bitwise(model):
    a = _trajectory(model, fedcore.run_feddwa_round, weighting=fedcore.WEIGHT_UNIT, loss_cfg=DALossConfig(C=0.0))
    b = _trajectory(model, fedcore.run_scaffold_round)
    for (pa, ca), (pb, cb) in zip(a, b):
        assert pa.tobytes() == pb.tobytes() and ca.tobytes() == cb.tobytes()


def test_scaffold_local_update_without_controls_equals_fedavg(model):
    c1, c2 = make_clients(model, 1)[0], make_clients(model, 1)[0]
    zero = np.zeros(model.params.size)
    u1 = local_round(c1, model, zero, weighting=fedcore.WEIGHT_NONE)
    u2 = local_round(c2, model, zero, weighting=fedcore.WEIGHT_NONE, use_control=False)
    assert u1.params.tobytes() == u2.params.tobytes()


def test_scaffold_matches_golden_trajectory(model):
    history = _trajectory(model, fedcore.run_scaffold_round, rounds=3)
    golden = json.loads(GOLDEN.read_text())
    for (p, c), g in zip(history, golden["rounds"]):
        assert np.allclose(p, g["params"], atol=1e-10, rtol=0)
        assert np.allclose(c, g["c_global"], atol=1e-10, rtol=0)


def test_collapse_to_fedavg_averaging(model):
    # controls frozen at zero and a unit server step: the server step is an unweighted mean
    clients = make_clients(model, 3)
    server = ServerState.create(model, eta_global=1.0)
    fedcore.broadcast(server, clients)
    updates = [local_round(c, server.model, server.c_global, use_control=False) for c in clients]
    new = server_update_feddwa(server, updates)
    assert np.max(np.abs(new.model.params - np.mean([u.params for u in updates], axis=0))) < 1e-12


def test_server_sees_only_models_and_contributions():
    fields = {f.name for f in dataclasses.fields(ClientUpdate)}
    assert fields == {"client_id", "params", "T", "n_samples", "klds"}
    for f in dataclasses.fields(ClientUpdate):
        assert "Sample" not in str(f.type)


def small_cfg(**over):
    base = {"algorithm": "feddwa", "rounds": 3, "geometry": {"H": 6, "W": 6, "F": 3, "K": 3},
            "model": {"hidden": [5]},
            "clients": [{"id": 0, "n_samples": 6, "class_prior": [0.5, 0.5, 0.0], "noise_sigma": 0.3},
                        {"id": 1, "n_samples": 6, "class_prior": [0.4, 0.0, 0.6], "noise_sigma": 0.3,
                         "pose": {"angle": 0.5}}],
            "optim": {"eta_local": 0.2}}
    base.update(over)
    return config_from_dict(base)


def test_run_experiment_reports_and_determinism():
    cfg = small_cfg()
    a = fedcore.run_experiment(cfg)
    b = fedcore.run_experiment(cfg)
    assert [repr(r) for r in a] == [repr(r) for r in b]
    assert len(a) == 3 * 2 * 2
    assert {r.scope for r in a} == {"global", "local"}


def test_run_experiment_rejects_zero_rounds():
    cfg = small_cfg().replace(rounds=0)
    with pytest.raises(InvalidInputError):
        fedcore.run_experiment(cfg)


def test_single_client_fedavg_global_equals_local():
    cfg = small_cfg(algorithm="fedavg", rounds=1,
                    clients=[{"id": 0, "n_samples": 6, "class_prior": [0.5, 0.5, 0.0], "noise_sigma": 0.3}])
    seen = {}

    def grab(r, server, clients, reports):
        seen["server"], seen["client"] = server.model.params.copy(), clients[0].model.params.copy()

    fedcore.run_experiment(cfg, on_round=grab)
    assert np.array_equal(seen["server"], seen["client"])


def test_non_finite_training_aborts():
    from feddwa.errors import NumericalError
    cfg = small_cfg(optim={"eta_local": 1e200})
    with pytest.raises(NumericalError):
        with np.errstate(all="ignore"):
            fedcore.run_experiment(cfg)
