"""Federated protocol: FedDWA plus FedAvg and SCAFFOLD-style baselines.

One communication round:

1. the server broadcasts the global model ``G_g^-``, the global control
   variate ``c_g^-`` and the current step-size scale;
2. every client trains on its own samples (:func:`local_round`) and returns a
   :class:`ClientUpdate` holding only its model and its control contribution;
3. the server folds the updates into a new :class:`ServerState`.

Local training, per sample ``i`` in a seeded shuffled order::

    g_i  = grad of the sample loss at the working parameters
    U   += g_i            (or the gradient at G_m^-, strict mode)
    W   += g_i
    O   += KL(P_g^-(x_i) || P_m(x_i))
    working -= eta_m * (g_i + c_g^- - c_m^-)

and after the pass::

    U   = eta_m * (U + c_g^- - c_m^-)
    G_m = G_m^- - U / n
    c_m = W / n
    T_m = (O / n) * c_m

with ``n`` the number of processed samples. The server then sets
``c_g = c_g^- + mean(T_m)`` and ``G_g = G_g^- + eta_g * mean(G_m - G_g^-)``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import divergence, nn
from .errors import InvalidInputError, NumericalError
from .losses import DALossConfig, DALossObjective
from .metrics import SCOPE_GLOBAL, SCOPE_LOCAL, RoundReport, evaluate, iou
from .synthdata import Sample, generate_client_dataset

log = logging.getLogger(__name__)

# How a client's control variate is weighted in its contribution T_m.
WEIGHT_KLD = "kld"      # FedDWA: mean divergence of the round
WEIGHT_UNIT = "unit"    # FedDWA formula with every divergence forced to 1
WEIGHT_NONE = "none"    # SCAFFOLD-style: T_m = c_m

LOCAL_UPDATES = ("accumulated", "sgd")


@dataclass(frozen=True)
class LocalOptions:
    epochs: int = 1
    batch_size: int = 1
    strict_u_at_round_start: bool = False
    kld_reduction: str = divergence.DEFAULT_KLD_REDUCTION
    # "accumulated": G_m = G_m^- - U / n after the pass; "sgd": G_m is the final
    # working parameters of the per-sample pass.
    local_update: str = "accumulated"


@dataclass
class ClientState:
    client_id: int
    train: list[Sample]
    test: list[Sample]
    model: nn.MlpModel
    c_local: np.ndarray
    eta_base: float
    eta_local: float
    U: np.ndarray
    W: np.ndarray
    O: float = 0.0
    last_update: "ClientUpdate | None" = field(default=None, repr=False)

    @classmethod
    def create(cls, client_id: int, train: list[Sample], test: list[Sample],
               model: nn.MlpModel, eta_local: float) -> "ClientState":
        size = model.params.size
        return cls(client_id, list(train), list(test), model.copy(), np.zeros(size), float(eta_local),
                   float(eta_local), np.zeros(size), np.zeros(size))


@dataclass
class ServerState:
    model: nn.MlpModel
    c_global: np.ndarray
    eta_global: float = 1.0
    round: int = 0
    lr_decay: float = 0.5
    lr_period: int = 20
    lr_scale: float = 1.0
    literal_eq9: bool = False

    @classmethod
    def create(cls, model: nn.MlpModel, **kwargs) -> "ServerState":
        return cls(model.copy(), np.zeros(model.params.size), **kwargs)


@dataclass(frozen=True)
class ClientUpdate:
    """Everything a client sends to the server after a round."""

    client_id: int
    params: np.ndarray
    T: np.ndarray
    n_samples: int
    klds: tuple[float, ...] = ()


def broadcast(server: ServerState, clients: Sequence[ClientState]) -> None:
    for c in clients:
        c.model = server.model.copy()
        c.eta_local = c.eta_base * server.lr_scale


def control_contribution(c_local: np.ndarray, o_sum: float, n_samples: int) -> np.ndarray:
    """``T_m = (O_m / n) * c_m``: the control variate scaled by the mean divergence."""
    return (o_sum / n_samples) * c_local


def _shuffle_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, round_index, client_id])


def local_round(client: ClientState, g_global_prev: nn.MlpModel, c_global_prev: np.ndarray,
                loss_cfg: DALossConfig | None = None, opts: LocalOptions = LocalOptions(),
                weighting: str = WEIGHT_KLD, round_index: int = 0, shuffle_seed: int = 0,
                use_control: bool = True) -> ClientUpdate | None:
    """Train ``client`` for one round starting from ``g_global_prev``.

    ``loss_cfg=None`` (or a disabled config) trains on cross-entropy.
    ``use_control=False`` drops the ``c_g^- - c_m^-`` correction and leaves
    ``c_m`` untouched, which is the FedAvg client. Returns ``None`` for a
    client without training samples.
    """
    if weighting not in (WEIGHT_KLD, WEIGHT_UNIT, WEIGHT_NONE):
        raise InvalidInputError(f"unknown weighting {weighting!r}")
    if opts.local_update not in LOCAL_UPDATES:
        raise InvalidInputError(f"unknown local_update {opts.local_update!r}")
    if c_global_prev.shape != g_global_prev.params.shape or client.c_local.shape != g_global_prev.params.shape:
        raise InvalidInputError("control variates and model parameters differ in length")
    if not client.train:
        log.warning("client %d has no training samples; skipped this round", client.client_id)
        return None

    g_prev = g_global_prev.params.copy()
    size = g_prev.size
    client.model = g_global_prev.copy()
    client.U = np.zeros(size)
    client.W = np.zeros(size)
    client.O = 0.0

    eta = client.eta_local
    correction = (c_global_prev - client.c_local) if use_control else np.zeros(size)
    use_daloss = loss_cfg is not None and loss_cfg.enabled
    global_logp = [divergence.log_softmax(nn.forward(g_global_prev, s.input)) for s in client.train]

    def objective(i: int):
        if use_daloss:
            return DALossObjective(loss_cfg, global_logp[i], g_prev, opts.kld_reduction)
        return None

    working = g_prev.copy()
    rng = _shuffle_rng(shuffle_seed, round_index, client.client_id)
    klds: list[float] = []
    n = 0
    for _ in range(opts.epochs):
        order = rng.permutation(len(client.train))
        for start in range(0, len(order), opts.batch_size):
            batch = order[start:start + opts.batch_size]
            model_now = g_global_prev.with_params(working)
            grad_sum = np.zeros(size)
            for i in batch:
                sample = client.train[i]
                res = nn.value_and_grad(model_now, sample.input, sample.mask, objective(i))
                k = res.kld if res.kld is not None else divergence.kld(
                    global_logp[i], divergence.log_softmax(res.logits), opts.kld_reduction)
                klds.append(k)
                grad_sum += res.grad
                if opts.strict_u_at_round_start:
                    client.U += nn.backward(g_global_prev, sample.input, sample.mask, objective(i))[1]
                client.O += k if weighting == WEIGHT_KLD else 1.0
                n += 1
            if not opts.strict_u_at_round_start:
                client.U += grad_sum
            client.W += grad_sum
            working = working - eta * (grad_sum / len(batch) + correction)
            if not np.all(np.isfinite(working)):
                raise NumericalError(round_index, client.client_id, "local training diverged")

    client.U = eta * (client.U + correction)
    if opts.local_update == "sgd":
        client.model = g_global_prev.with_params(working)
    else:
        client.model = g_global_prev.with_params(g_prev - client.U / n)
    if use_control:
        client.c_local = client.W / n
    if weighting == WEIGHT_NONE:
        T = client.c_local.copy()
    else:
        T = control_contribution(client.c_local, client.O, n)
    update = ClientUpdate(client.client_id, client.model.params.copy(), T, len(client.train), tuple(klds))
    client.last_update = update
    return update


def _check_updates(server: ServerState, updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise InvalidInputError("server update needs at least one client update")
    size = server.model.params.size
    for u in updates:
        if u.params.shape != (size,) or u.T.shape != (size,):
            raise InvalidInputError(f"client {u.client_id}: update length does not match the global model")
    return sorted(updates, key=lambda u: u.client_id)


def _advance(server: ServerState, model: nn.MlpModel, c_global: np.ndarray) -> ServerState:
    new_round = server.round + 1
    scale = server.lr_scale
    if new_round % server.lr_period == 0:
        scale *= server.lr_decay
    return dataclasses.replace(server, model=model, c_global=c_global, round=new_round, lr_scale=scale)


def server_update_feddwa(server: ServerState, updates: Sequence[ClientUpdate]) -> ServerState:
    """Control-variate and model aggregation shared by FedDWA and SCAFFOLD.

    With ``server.literal_eq9`` the model step uses ``G_g^- - G_m`` in place
    of ``G_m - G_g^-``, which pushes the global model away from the clients.
    """
    updates = _check_updates(server, updates)
    M = len(updates)
    g_prev = server.model.params
    t_sum = np.zeros_like(g_prev)
    delta_sum = np.zeros_like(g_prev)
    for u in updates:
        t_sum += u.T
        delta_sum += (g_prev - u.params) if server.literal_eq9 else (u.params - g_prev)
    c_global = server.c_global + t_sum / M
    params = g_prev + (server.eta_global / M) * delta_sum
    return _advance(server, server.model.with_params(params), c_global)


def server_update_fedavg(server: ServerState, updates: Sequence[ClientUpdate]) -> ServerState:
    """Average client models weighted by their training-set sizes."""
    updates = _check_updates(server, updates)
    total = sum(u.n_samples for u in updates)
    params = np.zeros_like(server.model.params)
    for u in updates:
        params += (u.n_samples / total) * u.params
    return _advance(server, server.model.with_params(params), server.c_global)


def _local_updates(server: ServerState, clients: Sequence[ClientState], loss_cfg, opts, weighting,
                   shuffle_seed, use_control) -> list[ClientUpdate]:
    broadcast(server, clients)
    updates = []
    for c in sorted(clients, key=lambda c: c.client_id):
        u = local_round(c, server.model, server.c_global, loss_cfg, opts, weighting,
                        round_index=server.round + 1, shuffle_seed=shuffle_seed, use_control=use_control)
        if u is None:
            continue
        if not (np.all(np.isfinite(u.params)) and np.all(np.isfinite(u.T))):
            raise NumericalError(server.round + 1, c.client_id)
        updates.append(u)
    if not updates:
        raise InvalidInputError(f"round {server.round + 1}: no client produced an update")
    return updates


def run_feddwa_round(server: ServerState, clients: Sequence[ClientState], loss_cfg: DALossConfig | None = None,
                     opts: LocalOptions = LocalOptions(), shuffle_seed: int = 0,
                     weighting: str = WEIGHT_KLD) -> ServerState:
    updates = _local_updates(server, clients, loss_cfg, opts, weighting, shuffle_seed, True)
    return server_update_feddwa(server, updates)


def run_scaffold_round(server: ServerState, clients: Sequence[ClientState], loss_cfg: DALossConfig | None = None,
                       opts: LocalOptions = LocalOptions(), shuffle_seed: int = 0) -> ServerState:
    return run_feddwa_round(server, clients, loss_cfg, opts, shuffle_seed, weighting=WEIGHT_NONE)


def run_fedavg_round(server: ServerState, clients: Sequence[ClientState], loss_cfg: DALossConfig | None = None,
                     opts: LocalOptions = LocalOptions(), shuffle_seed: int = 0) -> ServerState:
    updates = _local_updates(server, clients, loss_cfg, opts, WEIGHT_NONE, shuffle_seed, False)
    return server_update_fedavg(server, updates)


ROUND_RUNNERS: dict[str, Callable[..., ServerState]] = {
    "fedavg": run_fedavg_round,
    "scaffold": run_scaffold_round,
    "feddwa": run_feddwa_round,
}


def build_federation(cfg) -> tuple[ServerState, list[ClientState]]:
    """Generate client datasets and the initial server/client states for ``cfg``."""
    model = nn.init_model(cfg.layer_sizes, cfg.seed_init)
    server = ServerState.create(model, eta_global=cfg.eta_global, lr_decay=cfg.lr_decay,
                                lr_period=cfg.lr_period, literal_eq9=cfg.literal_eq9)
    clients = []
    for profile in cfg.clients:
        train, test = generate_client_dataset(profile, cfg.geometry)
        clients.append(ClientState.create(profile.client_id, train, test, model, cfg.eta_local))
    return server, clients


def _reports_for(round_index: int, client: ClientState, server: ServerState, K: int) -> list[RoundReport]:
    out = []
    for scope, model in ((SCOPE_GLOBAL, server.model), (SCOPE_LOCAL, client.model)):
        loss, counts = evaluate(model, client.test, K)
        per_class, mean = iou(counts)
        out.append(RoundReport(round_index, client.client_id, scope, loss, tuple(float(v) for v in per_class), mean))
    return out


def run_experiment(cfg, on_round: Callable[[int, ServerState, list[ClientState], list[RoundReport]], None] | None = None
                   ) -> list[RoundReport]:
    """Run ``cfg.rounds`` communication rounds and evaluate after each.

    After every round both the global model and each client's local model
    are scored on that client's test split. ``on_round`` is called with
    ``(round, server, clients, reports_of_round)`` once the round's reports
    are ready.
    """
    if cfg.rounds < 1:
        raise InvalidInputError(f"rounds must be >= 1, got {cfg.rounds}")
    if cfg.algorithm not in ROUND_RUNNERS:
        raise InvalidInputError(f"unknown algorithm {cfg.algorithm!r}")
    server, clients = build_federation(cfg)
    opts = LocalOptions(cfg.local_epochs, cfg.batch_size, cfg.strict_u_at_round_start, cfg.kld_reduction,
                        cfg.local_update)
    loss_cfg = cfg.daloss if cfg.daloss.enabled else None
    runner = ROUND_RUNNERS[cfg.algorithm]
    reports: list[RoundReport] = []
    for r in range(1, cfg.rounds + 1):
        server = runner(server, clients, loss_cfg, opts, cfg.seed_shuffle)
        if not np.all(np.isfinite(server.model.params)) or not np.all(np.isfinite(server.c_global)):
            raise NumericalError(r, None, "non-finite global state")
        round_reports = []
        for c in clients:
            round_reports.extend(_reports_for(r, c, server, cfg.geometry.K))
        reports.extend(round_reports)
        if on_round is not None:
            on_round(r, server, clients, round_reports)
    return reports
