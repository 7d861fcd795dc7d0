"""Experiment configuration: YAML schema, defaults and validation.

Schema (every key optional except ``algorithm``)::

    algorithm: feddwa            # fedavg | scaffold | feddwa
    rounds: 50
    geometry: {H: 16, W: 16, F: 6, K: 4}
    model:
      hidden: [16]               # or layer_sizes: [F, ..., K]
    daloss: {C: 0.1, kld_detached: true, enabled: true}
    optim:
      eta_local: 1.0
      eta_global: 1.0
      lr_decay: 0.5              # multiply every client's step size ...
      lr_period: 20              # ... every this many rounds
    seeds: {data: 0, init: 0, shuffle: 0}
    flags:
      literal_eq9: false         # reversed server step, moves away from clients (diverges)
      strict_u_at_round_start: false
      kld_reduction: mean        # mean | sum over pixels
      local_epochs: 1
      batch_size: 1
      local_update: accumulated  # accumulated | sgd (see fedcore.LocalOptions)
    clients:                     # either a preset ...
      preset: vehicles           # bus, truck, car_a, car_b
      alpha: 0.1                 # Dirichlet concentration of the class priors
      n_samples: 40
      noise_sigma: 0.5
    # ... or an explicit list:
    # clients:
    #   - {id: 0, n_samples: 40, class_prior: [0.7, 0.1, 0.1, 0.1],
    #      pose: {angle: 0.3, shift: [0.1, 0.0]}, noise_sigma: 0.5, seed: 7}
    output: {dir: runs/default, checkpoint_period: 0}

Unknown keys are rejected; every error names the field path.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .divergence import KLD_REDUCTIONS
from .errors import ConfigError
from .fedcore import LOCAL_UPDATES
from .losses import DALossConfig
from .synthdata import ClientProfile, Geometry, dirichlet_priors

ALGORITHMS = ("fedavg", "scaffold", "feddwa")

# Pose (angle in radians, shift) and relative noise of the four vehicle sensors.
VEHICLE_PROFILES = (
    ("bus", 0.0, (0.0, 0.25), 1.0),
    ("truck", math.pi / 6, (0.2, -0.1), 1.0),
    ("car_a", math.pi / 2, (-0.15, 0.0), 1.2),
    ("car_b", -math.pi / 3, (0.1, 0.15), 1.2),
)


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    clients: tuple[ClientProfile, ...]
    rounds: int = 50
    geometry: Geometry = Geometry(16, 16, 6, 4)
    layer_sizes: tuple[int, ...] = (6, 16, 4)
    daloss: DALossConfig = DALossConfig()
    eta_local: float = 1.0
    eta_global: float = 1.0
    lr_decay: float = 0.5
    lr_period: int = 20
    seed_data: int = 0
    seed_init: int = 0
    seed_shuffle: int = 0
    literal_eq9: bool = False
    strict_u_at_round_start: bool = False
    kld_reduction: str = "mean"
    local_epochs: int = 1
    batch_size: int = 1
    local_update: str = "accumulated"
    output_dir: str = "runs/default"
    checkpoint_period: int = 0
    client_names: tuple[str, ...] = field(default=())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        """Plain-data echo, suitable for JSON."""
        return {
            "algorithm": self.algorithm,
            "rounds": self.rounds,
            "geometry": dataclasses.asdict(self.geometry),
            "layer_sizes": list(self.layer_sizes),
            "daloss": dataclasses.asdict(self.daloss),
            "optim": {"eta_local": self.eta_local, "eta_global": self.eta_global,
                      "lr_decay": self.lr_decay, "lr_period": self.lr_period},
            "seeds": {"data": self.seed_data, "init": self.seed_init, "shuffle": self.seed_shuffle},
            "flags": {"literal_eq9": self.literal_eq9,
                      "strict_u_at_round_start": self.strict_u_at_round_start,
                      "kld_reduction": self.kld_reduction, "local_epochs": self.local_epochs,
                      "batch_size": self.batch_size, "local_update": self.local_update},
            "clients": [
                {"id": p.client_id, "name": name, "n_samples": p.n_samples,
                 "class_prior": list(p.class_prior),
                 "pose": {"angle": p.pose_angle, "shift": list(p.pose_shift)},
                 "noise_sigma": p.noise_sigma, "seed": p.seed}
                for p, name in zip(self.clients, self.names())
            ],
            "output": {"dir": self.output_dir, "checkpoint_period": self.checkpoint_period},
        }

    def names(self) -> tuple[str, ...]:
        if self.client_names:
            return self.client_names
        return tuple(f"client_{p.client_id}" for p in self.clients)


class _Section:
    """Reads typed keys out of one mapping and remembers which were used."""

    def __init__(self, data: Any, path: str):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def _p(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind: type, default: Any = None, required: bool = False) -> Any:
        self.used.add(key)
        if key not in self.data or self.data[key] is None:
            if required:
                raise ConfigError(self._p(key), "is required")
            return default
        value = self.data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, bool) or not isinstance(value, kind):
            raise ConfigError(self._p(key), f"expected {kind.__name__}, got {type(value).__name__}")
        if kind is float and not math.isfinite(value):
            raise ConfigError(self._p(key), "must be finite")
        return value

    def section(self, key: str) -> "_Section":
        self.used.add(key)
        return _Section(self.data.get(key), self._p(key))

    def finish(self) -> None:
        unknown = sorted(set(map(str, self.data)) - self.used)
        if unknown:
            raise ConfigError(self._p(unknown[0]), "unknown key")


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _derived_seed(*words: int) -> int:
    return int(np.random.SeedSequence([w & 0xFFFFFFFF for w in words]).generate_state(1)[0])


def _float_list(value: Any, path: str) -> list[float]:
    _require(isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value),
             path, "expected a list of numbers")
    return [float(v) for v in value]


def _parse_clients(raw: Any, geometry: Geometry, seed_data: int) -> tuple[tuple[ClientProfile, ...], tuple[str, ...]]:
    if raw is None:
        raw = {"preset": "vehicles"}
    if isinstance(raw, dict):
        sec = _Section(raw, "clients")
        preset = sec.get("preset", str, required=True)
        _require(preset == "vehicles", "clients.preset", f"unknown preset {preset!r}; expected 'vehicles'")
        alpha = sec.get("alpha", float, 0.1)
        n_samples = sec.get("n_samples", int, 40)
        noise = sec.get("noise_sigma", float, 0.5)
        sec.finish()
        _require(alpha > 0, "clients.alpha", "must be > 0")
        _require(n_samples >= 1, "clients.n_samples", "must be >= 1")
        _require(noise >= 0, "clients.noise_sigma", "must be >= 0")
        priors = dirichlet_priors(alpha, geometry.K, len(VEHICLE_PROFILES), seed_data)
        profiles, names = [], []
        for cid, ((name, angle, shift, rel_noise), prior) in enumerate(zip(VEHICLE_PROFILES, priors)):
            profiles.append(ClientProfile(cid, n_samples, tuple(prior), angle, shift, noise * rel_noise,
                                          _derived_seed(seed_data, cid)))
            names.append(name)
        return tuple(profiles), tuple(names)

    _require(isinstance(raw, list) and raw, "clients", "expected a preset mapping or a non-empty list")
    profiles, names, seen = [], [], set()
    for i, item in enumerate(raw):
        path = f"clients[{i}]"
        sec = _Section(item, path)
        cid = sec.get("id", int, i)
        _require(cid not in seen, f"{path}.id", f"duplicate client id {cid}")
        seen.add(cid)
        name = sec.get("name", str, f"client_{cid}")
        n_samples = sec.get("n_samples", int, 40)
        prior = sec.get("class_prior", list, None)
        prior = _float_list(prior, f"{path}.class_prior") if prior is not None else [1.0 / geometry.K] * geometry.K
        pose = sec.section("pose")
        angle = pose.get("angle", float, 0.0)
        shift = pose.get("shift", list, [0.0, 0.0])
        pose.finish()
        shift = _float_list(shift, f"{path}.pose.shift")
        _require(len(shift) == 2, f"{path}.pose.shift", "expected two numbers")
        noise = sec.get("noise_sigma", float, 0.0)
        seed = sec.get("seed", int, _derived_seed(seed_data, cid))
        sec.finish()
        _require(n_samples >= 1, f"{path}.n_samples", "must be >= 1")
        _require(len(prior) == geometry.K, f"{path}.class_prior", f"expected {geometry.K} entries")
        _require(all(p >= 0 for p in prior) and abs(sum(prior) - 1.0) <= 1e-9,
                 f"{path}.class_prior", "must be non-negative and sum to 1")
        _require(noise >= 0, f"{path}.noise_sigma", "must be >= 0")
        profiles.append(ClientProfile(cid, n_samples, tuple(prior), angle, tuple(shift), noise, seed))
        names.append(name)
    order = np.argsort([p.client_id for p in profiles], kind="stable")
    return tuple(profiles[i] for i in order), tuple(names[i] for i in order)


def config_from_dict(data: Any) -> ExperimentConfig:
    root = _Section(data, "")
    algorithm = root.get("algorithm", str, required=True)
    _require(algorithm in ALGORITHMS, "algorithm", f"expected one of {', '.join(ALGORITHMS)}, got {algorithm!r}")
    rounds = root.get("rounds", int, 50)
    _require(rounds >= 1, "rounds", f"must be >= 1, got {rounds}")

    g = root.section("geometry")
    dims = {k: g.get(k, int, d) for k, d in (("H", 16), ("W", 16), ("F", 6), ("K", 4))}
    g.finish()
    for k, v in dims.items():
        _require(v >= 1, f"geometry.{k}", "must be >= 1")
    geometry = Geometry(**dims)

    m = root.section("model")
    layer_sizes = m.get("layer_sizes", list, None)
    hidden = m.get("hidden", list, None)
    m.finish()
    _require(layer_sizes is None or hidden is None, "model", "give either layer_sizes or hidden, not both")
    if layer_sizes is None:
        hidden = [16] if hidden is None else hidden
        _require(all(isinstance(h, int) and not isinstance(h, bool) and h >= 1 for h in hidden),
                 "model.hidden", "expected a list of positive integers")
        layer_sizes = [geometry.F, *hidden, geometry.K]
    _require(len(layer_sizes) >= 2 and all(isinstance(s, int) and not isinstance(s, bool) and s >= 1
                                           for s in layer_sizes),
             "model.layer_sizes", "expected >= 2 positive integers")
    _require(layer_sizes[0] == geometry.F, "model.layer_sizes", f"first entry must equal geometry.F={geometry.F}")
    _require(layer_sizes[-1] == geometry.K, "model.layer_sizes", f"last entry must equal geometry.K={geometry.K}")

    d = root.section("daloss")
    C = d.get("C", float, 0.1)
    _require(C >= 0, "daloss.C", f"must be >= 0, got {C}")
    daloss = DALossConfig(C=C, kld_detached=d.get("kld_detached", bool, True), enabled=d.get("enabled", bool, True))
    d.finish()

    o = root.section("optim")
    eta_local = o.get("eta_local", float, 1.0)
    eta_global = o.get("eta_global", float, 1.0)
    lr_decay = o.get("lr_decay", float, 0.5)
    lr_period = o.get("lr_period", int, 20)
    o.finish()
    _require(eta_local > 0, "optim.eta_local", "must be > 0")
    _require(eta_global > 0, "optim.eta_global", "must be > 0")
    _require(0 < lr_decay <= 1, "optim.lr_decay", "must be in (0, 1]")
    _require(lr_period >= 1, "optim.lr_period", "must be >= 1")

    s = root.section("seeds")
    seeds = {k: s.get(k, int, 0) for k in ("data", "init", "shuffle")}
    s.finish()

    f = root.section("flags")
    literal_eq9 = f.get("literal_eq9", bool, False)
    strict_u = f.get("strict_u_at_round_start", bool, False)
    kld_reduction = f.get("kld_reduction", str, "mean")
    local_epochs = f.get("local_epochs", int, 1)
    batch_size = f.get("batch_size", int, 1)
    local_update = f.get("local_update", str, "accumulated")
    f.finish()
    _require(local_update in LOCAL_UPDATES, "flags.local_update", f"expected one of {LOCAL_UPDATES}")
    _require(kld_reduction in KLD_REDUCTIONS, "flags.kld_reduction", f"expected one of {KLD_REDUCTIONS}")
    _require(local_epochs >= 1, "flags.local_epochs", "must be >= 1")
    _require(batch_size >= 1, "flags.batch_size", "must be >= 1")

    root.used.add("clients")
    clients, names = _parse_clients(root.data.get("clients"), geometry, seeds["data"])

    out = root.section("output")
    output_dir = out.get("dir", str, "runs/default")
    checkpoint_period = out.get("checkpoint_period", int, 0)
    out.finish()
    _require(checkpoint_period >= 0, "output.checkpoint_period", "must be >= 0")

    root.finish()
    return ExperimentConfig(
        algorithm=algorithm, clients=clients, rounds=rounds, geometry=geometry,
        layer_sizes=tuple(layer_sizes), daloss=daloss, eta_local=eta_local, eta_global=eta_global,
        lr_decay=lr_decay, lr_period=lr_period, seed_data=seeds["data"], seed_init=seeds["init"],
        seed_shuffle=seeds["shuffle"], literal_eq9=literal_eq9, strict_u_at_round_start=strict_u,
        kld_reduction=kld_reduction, local_epochs=local_epochs, batch_size=batch_size, local_update=local_update,
        output_dir=output_dir, checkpoint_period=checkpoint_period, client_names=names,
    )


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("", f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(data)
