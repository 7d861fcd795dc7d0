"""Run orchestration and result files.

A run directory holds:

``metrics.csv``
    one row per (round, client, scope), appended and flushed every round:
    ``round,client_id,scope,loss,mean_iou,iou_class_0..iou_class_{K-1}``.
    Classes absent from a client's test split have IoU ``nan``.
``summary.json``
    peak IoU and its round per client and scope, final losses, the config
    echo and the build's ``git describe``. Byte-identical across reruns.
``run_info.json``
    wall-clock time; kept apart from the summary so the summary stays
    deterministic.
``checkpoints/global_rNNNN.bin``
    optional flat parameter dumps, see :func:`write_checkpoint`.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import subprocess
import time
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fedcore
from .config import ExperimentConfig
from .errors import InvalidInputError
from .metrics import SCOPE_GLOBAL, SCOPE_LOCAL, RoundReport, rounds_to_peak

OUTPUT_ENV = "FEDDWA_OUTPUT_DIR"

# Checkpoint: "<8sIQ" = magic, version, length; then `length` little-endian float64.
CHECKPOINT_MAGIC = b"FDWACKPT"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIQ")

TABLE3_VARIANTS = ("scaffold-daloss", "scaffold+daloss", "feddwa-daloss", "feddwa+daloss")
TABLE3_NOTE = ("scaffold-style baseline stands in for FedBEVT, which is not reproduced; "
               "rows mirror the DALoss ablation grid")


def write_checkpoint(path: str | Path, params: np.ndarray) -> None:
    params = np.ascontiguousarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.size))
        fh.write(params.tobytes())


def read_checkpoint(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise InvalidInputError(f"{path}: truncated checkpoint")
    magic, version, length = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: not a checkpoint file")
    if len(raw) != _CKPT_HEADER.size + 8 * length:
        raise InvalidInputError(f"{path}: expected {length} values")
    return np.frombuffer(raw, dtype="<f8", offset=_CKPT_HEADER.size).astype(np.float64)


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--tags"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def _json_num(x: float):
    return None if math.isnan(x) else float(x)


def metrics_header(K: int) -> list[str]:
    return ["round", "client_id", "scope", "loss", "mean_iou"] + [f"iou_class_{k}" for k in range(K)]


def _row(r: RoundReport) -> list[str]:
    return [str(r.round), str(r.client_id), r.scope, _fmt(r.loss), _fmt(r.mean_iou)] + [_fmt(v) for v in r.iou_per_class]


def summarize(cfg: ExperimentConfig, reports: Sequence[RoundReport], label: str | None = None) -> dict:
    series: dict[tuple[int, str], list[RoundReport]] = defaultdict(list)
    for r in reports:
        series[(r.client_id, r.scope)].append(r)
    names = dict(zip((p.client_id for p in cfg.clients), cfg.names()))
    clients = {}
    for p in cfg.clients:
        entry = {"name": names[p.client_id]}
        for scope in (SCOPE_GLOBAL, SCOPE_LOCAL):
            rows = series.get((p.client_id, scope), [])
            if not rows:
                continue
            peak, rnd = rounds_to_peak(rows)
            entry[scope] = {"peak_iou": _json_num(peak), "peak_round": rnd,
                            "final_loss": _json_num(rows[-1].loss), "final_mean_iou": _json_num(rows[-1].mean_iou)}
        clients[str(p.client_id)] = entry
    final = [r.mean_iou for r in reports if r.round == cfg.rounds and r.scope == SCOPE_GLOBAL]
    final = [v for v in final if not math.isnan(v)]
    return {
        "label": label or cfg.algorithm,
        "algorithm": cfg.algorithm,
        "rounds": cfg.rounds,
        "mean_final_global_iou": _json_num(float(np.mean(final))) if final else None,
        "clients": clients,
        "config": cfg.to_dict(),
        "build": git_describe(),
    }


def resolve_output_dir(cfg: ExperimentConfig, override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else Path(cfg.output_dir)


def run(cfg: ExperimentConfig, out_dir: str | Path, label: str | None = None) -> dict:
    """Run one experiment and write its files into ``out_dir``; returns the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    if cfg.checkpoint_period:
        ckpt_dir.mkdir(exist_ok=True)
    start = time.perf_counter()
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(cfg.geometry.K))
        fh.flush()

        def on_round(r, server, clients, round_reports):
            writer.writerows(_row(rep) for rep in round_reports)
            fh.flush()
            if cfg.checkpoint_period and r % cfg.checkpoint_period == 0:
                write_checkpoint(ckpt_dir / f"global_r{r:04d}.bin", server.model.params)

        reports = fedcore.run_experiment(cfg, on_round)
    summary = summarize(cfg, reports, label)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out_dir / "run_info.json").write_text(
        json.dumps({"wall_time_s": round(time.perf_counter() - start, 3)}, indent=2) + "\n")
    return summary


def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """``name`` keeps the configured DALoss setting; ``name+daloss`` / ``name-daloss`` force it."""
    name, enabled = variant, None
    if variant.endswith("+daloss"):
        name, enabled = variant[:-len("+daloss")], True
    elif variant.endswith("-daloss"):
        name, enabled = variant[:-len("-daloss")], False
    if name not in fedcore.ROUND_RUNNERS:
        raise InvalidInputError(f"unknown algorithm variant {variant!r}")
    daloss = cfg.daloss if enabled is None else type(cfg.daloss)(cfg.daloss.C, cfg.daloss.kld_detached, enabled)
    return cfg.replace(algorithm=name, daloss=daloss)


def compare(cfg: ExperimentConfig, variants: Sequence[str], out_dir: str | Path, note: str | None = None) -> dict:
    """Run each variant into its own subdirectory and merge the summaries."""
    out_dir = Path(out_dir)
    configs = [(v, variant_config(cfg, v)) for v in variants]
    rows = {}
    for label, vcfg in configs:
        summary = run(vcfg, out_dir / label.replace("+", "_plus_").replace("-", "_minus_"), label)
        rows[label] = {"mean_final_global_iou": summary["mean_final_global_iou"],
                       "daloss": vcfg.daloss.enabled,
                       "clients": {cid: {"name": c["name"], **({"global": c["global"]} if "global" in c else {})}
                                   for cid, c in summary["clients"].items()}}
    merged = {"variants": list(variants), "results": rows}
    if note:
        merged["note"] = note
    (out_dir / "comparison.json").write_text(json.dumps(merged, indent=2, sort_keys=True) + "\n")
    return merged


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"round", "client_id", "scope", "mean_iou"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise InvalidInputError(f"{path}: missing metrics columns {sorted(need)}")
        rows = []
        for i, row in enumerate(reader, start=2):
            try:
                rows.append({"round": int(row["round"]), "client_id": int(row["client_id"]),
                             "scope": row["scope"], "mean_iou": row["mean_iou"]})
                float(row["mean_iou"])
            except (TypeError, ValueError) as exc:
                raise InvalidInputError(f"{path}:{i}: malformed row ({exc})") from exc
    return rows


def emit_plotdata(metrics_path: str | Path, out_dir: str | Path, scope: str = SCOPE_GLOBAL) -> list[Path]:
    """Write one ``round,mean_iou`` series per client; values are copied verbatim."""
    rows = [r for r in read_metrics(metrics_path) if r["scope"] == scope]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_client: dict[int, list[dict]] = defaultdict(list)
    for r in rows:
        by_client[r["client_id"]].append(r)
    paths = []
    for cid in sorted(by_client):
        path = out_dir / f"iou_{scope}_client_{cid}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "mean_iou"])
            writer.writerows([r["round"], r["mean_iou"]] for r in sorted(by_client[cid], key=lambda r: r["round"]))
        paths.append(path)
    return paths
