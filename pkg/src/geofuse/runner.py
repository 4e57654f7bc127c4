"""Experiment runner: single runs, the scheme pilot, ablations, reports."""
from __future__ import annotations

import concurrent.futures
import decimal
import json
import time
from dataclasses import dataclass, field

from .backbones import DiTConfig, GeoEncoderConfig, ToyMLLMConfig
from .bench import (
    CorruptionMode,
    TrainConfig,
    dataset_hash,
    evaluate_policy,
    make_dataset,
    train_policy,
)
from .config import ExperimentConfig
from .errors import ConfigError, ProtocolError
from .flow import FlowConfig
from .policy import FusionPolicy
from .rng import RngStream
from .schemes import SCHEME_IDS

TASK_NAME = "reach"

# rng stream ids, fixed so every path draws the same sequences
_STREAM_INIT = 1
_STREAM_DATA = 2
_STREAM_TRAIN = 3
_STREAM_EVAL = 4


def build_policy(cfg: ExperimentConfig) -> FusionPolicy:
    mcfg = ToyMLLMConfig(d=cfg.d, n_layers=cfg.n_layers, heads=cfg.heads,
                         l_max=cfg.l_max, vocab_size=cfg.vocab_size)
    gcfg = GeoEncoderConfig(n_patches=cfg.n_patches, d_vggt=cfg.d_vggt,
                            frozen=cfg.freeze_geo)
    dcfg = DiTConfig(n_dit_layers=cfg.n_dit_layers, d=cfg.d, heads=cfg.heads,
                     horizon=cfg.horizon, d_action=cfg.d_action)
    fcfg = FlowConfig(alpha=cfg.tau_alpha, beta=cfg.tau_beta,
                      n_euler_steps=cfg.euler_steps, noise_std=cfg.noise_std)
    opts = {"align_weight": cfg.align_weight, "forcing_weight": cfg.forcing_weight}
    if cfg.midlayer_k >= 0:
        opts["midlayer_k"] = cfg.midlayer_k
    return FusionPolicy(
        cfg.scheme, cfg.arch, mcfg, gcfg, dcfg, fcfg,
        rng=RngStream(cfg.seed, _STREAM_INIT),
        sparse_k=cfg.sparse_k, sparse_phase=cfg.sparse_phase,
        scheme_opts=opts,
    )


def build_datasets(cfg: ExperimentConfig):
    data_rng = RngStream(cfg.seed, _STREAM_DATA)
    train = make_dataset(data_rng.derive(0), cfg.dataset_size, cfg.n_objects,
                         cfg.n_patches, cfg.horizon, cfg.d_action, split="train")
    evals = make_dataset(data_rng.derive(1), cfg.eval_episodes, cfg.n_objects,
                         cfg.n_patches, cfg.horizon, cfg.d_action, split="eval")
    return train, evals


@dataclass
class RunRecord:
    config: dict
    metrics: dict  # task name -> {variant -> {success_rate, mean_l2_error, n_episodes}}
    loss_curve: list
    dataset_hash: str
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {"config": self.config, "metrics": self.metrics,
             "loss_curve": self.loss_curve, "dataset_hash": self.dataset_hash,
             "wall_time": self.wall_time},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        return cls(d["config"], d["metrics"], d["loss_curve"],
                   d["dataset_hash"], d["wall_time"])


def run_single(cfg: ExperimentConfig, return_policy: bool = False):
    """Train and evaluate one configuration."""
    t0 = time.perf_counter()
    policy = build_policy(cfg)
    train_eps, eval_eps = build_datasets(cfg)
    tcfg = TrainConfig(steps=cfg.train_steps, batch_size=cfg.batch_size,
                       lr_backbone=cfg.lr_backbone, lr_fusion=cfg.lr_fusion,
                       warmup_frac=cfg.warmup_frac, beta1=cfg.beta1)
    curve = train_policy(policy, train_eps, tcfg, RngStream(cfg.seed, _STREAM_TRAIN))
    corruption = CorruptionMode(cfg.corruption, cfg.corruption_sigma)
    metrics = evaluate_policy(policy, eval_eps, RngStream(cfg.seed, _STREAM_EVAL),
                              corruption)
    record = RunRecord(
        config=cfg.to_dict(),
        metrics={TASK_NAME: {"success_rate": metrics.success_rate,
                             "mean_l2_error": metrics.mean_l2_error,
                             "n_episodes": metrics.n_episodes}},
        loss_curve=curve,
        dataset_hash=dataset_hash(train_eps),
        wall_time=time.perf_counter() - t0,
    )
    return (record, policy) if return_policy else record


def run_pilot(configs, jobs: int = 1):
    """One run per scheme under an otherwise identical protocol."""
    if not configs:
        raise ProtocolError("pilot needs at least one config")
    shared = configs[0].shared_fields()
    for cfg in configs[1:]:
        if cfg.shared_fields() != shared:
            diff = [k for k, v in cfg.shared_fields().items() if shared[k] != v]
            raise ProtocolError(f"pilot configs diverge in shared fields: {diff}")
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_single, configs))
    return [run_single(cfg) for cfg in configs]


def pilot_configs(base: ExperimentConfig):
    return [base.replace(scheme=s) for s in SCHEME_IDS]


ABLATION_KINDS = ("frozen_vs_trainable", "corruption", "sparse_depth")


def run_ablation(kind: str, base: ExperimentConfig, jobs: int = 1):
    if kind == "frozen_vs_trainable":
        configs = [base.replace(freeze_geo=f) for f in (True, False)]
    elif kind == "corruption":
        configs = [base.replace(corruption=c) for c in ("none", "zeros", "gaussian")]
    elif kind == "sparse_depth":
        configs = [base.replace(arch="pi", sparse_k=k) for k in (0, 1, 2, 3)]
    else:
        raise ConfigError(f"unknown ablation kind {kind!r}; valid: {ABLATION_KINDS}")
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_single, configs))
    return [run_single(cfg) for cfg in configs]


# ------------------------------------------------------------------ tables

@dataclass
class TableRow:
    method: str
    scores: dict  # task name -> score (percent scale)
    group: str = ""
    is_base: bool = False


def records_to_rows(records) -> list[TableRow]:
    rows = []
    for rec in records:
        scores = {task: 100.0 * m["success_rate"] for task, m in rec.metrics.items()}
        label = _record_label(rec)
        rows.append(TableRow(label, scores, is_base=(rec.config["scheme"] == "none")))
    return rows


def _record_label(rec: RunRecord) -> str:
    cfg = rec.config
    bits = [cfg["scheme"], cfg["arch"]]
    if cfg["corruption"] != "none":
        bits.append(f"corrupt={cfg['corruption']}")
    if not cfg["freeze_geo"]:
        bits.append("geo-trainable")
    if cfg["arch"] == "pi" and cfg["sparse_k"]:
        bits.append(f"k={cfg['sparse_k']}")
    return " ".join(bits)


def _round2(x: float) -> float:
    """Round half away from zero at 2 decimals, the convention the printed
    tables follow (printf half-even would turn 65.625 into 65.62)."""
    return float(decimal.Decimal(repr(x)).quantize(decimal.Decimal("0.01"),
                                                   rounding=decimal.ROUND_HALF_UP))


def emit_table(rows: list[TableRow], fmt: str = "markdown") -> str:
    """Render rows as a benchmark report table: per-task columns, an average
    column shown to 2 decimals, and a gain column vs the base row of the
    same group; a mean-gain footer appears when several gains exist.

    Gains are differences of the *displayed* (2-decimal) averages, so the
    table is internally consistent to the reader."""
    if fmt not in ("markdown", "csv"):
        raise ConfigError(f"unknown table format {fmt!r}")
    if not rows:
        raise ConfigError("no rows to tabulate")
    tasks = list(rows[0].scores)
    for r in rows:
        if list(r.scores) != tasks:
            raise ConfigError(f"row {r.method!r} has a different task set")

    base_avg = {}
    for r in rows:
        if r.is_base:
            if r.group in base_avg:
                raise ConfigError(f"duplicate base row in group {r.group!r}")
            base_avg[r.group] = _round2(_avg(r.scores))
    has_gain = any(not r.is_base and r.group in base_avg for r in rows)

    gains = []
    body = []
    for r in rows:
        avg = _round2(_avg(r.scores))
        cells = [r.method] + [f"{r.scores[t]:.2f}" for t in tasks] + [f"{avg:.2f}"]
        if has_gain:
            if not r.is_base and r.group in base_avg:
                gain = _round2(avg - base_avg[r.group])
                gains.append(gain)
                cells.append(f"{gain:+.2f}")
            else:
                cells.append("")
        body.append(cells)

    header = ["Method"] + tasks + ["Avg"] + (["Gain"] if has_gain else [])
    lines = []
    if fmt == "markdown":
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join(["---"] * len(header)) + "|")
        for cells in body:
            lines.append("| " + " | ".join(cells) + " |")
        if len(gains) > 1:
            lines.append("")
            lines.append(f"Mean gain: {_round2(sum(gains) / len(gains)):.2f}")
    else:
        lines.append(",".join(header))
        for cells in body:
            lines.append(",".join(cells))
        if len(gains) > 1:
            lines.append(f"mean_gain,{_round2(sum(gains) / len(gains)):.2f}")
    return "\n".join(lines) + "\n"


def _avg(scores: dict) -> float:
    return sum(scores.values()) / len(scores)


def loss_curves_csv(records) -> str:
    """Per-step losses of every record, one column per run."""
    labels = [_record_label(r) for r in records]
    n = max(len(r.loss_curve) for r in records)
    lines = ["step," + ",".join(labels)]
    for i in range(n):
        row = [str(i)]
        for r in records:
            row.append(repr(r.loss_curve[i]) if i < len(r.loss_curve) else "")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
