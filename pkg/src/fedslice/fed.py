"""Federated orchestration: selection, dispatch, local SGD, coverage-average fusion.

One round = prioritize the global weights, sample a budget-compliant spec
per participant, slice out sub-models, train them locally, then fuse: every
global coordinate becomes the mean over the clients whose spec covers it,
and uncovered coordinates carry over unchanged. With full-width specs this
reduces exactly to FedAvg.

All randomness flows through named Philox streams derived from the master
seed, so runs are reproducible regardless of thread scheduling; the
``RAFFM_THREADS`` env var caps client-training parallelism (0 = serial).
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import AggregationError, ConfigError, NumericError, ValidationError
from .nn import (Batch, ModelConfig, ModelWeights, backward, evaluate, forward,
                 init_weights, sgd_step, softmax_cross_entropy)
from .scaling import (ResourceBudget, SubmodelSpec, extract_submodel, min_spec,
                      param_count, prioritize_model, sample_submodel_spec)
from .tensor import RngStream

BYTES_PER_PARAM = 8

# stream-id allocation: one namespace per randomized stage
STREAM_SELECT = 1 << 32
STREAM_SPEC = 2 << 32
STREAM_INIT_SEED = 0


@dataclass
class ClientProfile:
    client_id: int
    budget: ResourceBudget
    shard: list  # list of Batch
    local_epochs: int
    lr: float

    def __post_init__(self):
        if not self.shard:
            raise ValidationError(f"client {self.client_id} has an empty shard")
        if self.lr < 0:
            raise ValidationError(f"client {self.client_id} lr must be >= 0")


@dataclass
class FederationConfig:
    n_clients: int
    participation_rate: float
    rounds: int
    ratio_set: tuple
    master_seed: int
    aggregation: str = "coverage-average"
    eval_every: int = 1
    permute_qk: bool = True
    permute_vo: bool = True
    permute_ffn: bool = True

    def __post_init__(self):
        if not 0 < self.participation_rate <= 1:
            raise ConfigError("participation_rate must be in (0, 1]")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.aggregation != "coverage-average":
            raise ConfigError(f"unknown aggregation mode {self.aggregation!r}")


@dataclass
class FederationState:
    global_weights: ModelWeights
    round_index: int = 0
    profiles: list = field(default_factory=list)


@dataclass
class RoundRecord:
    round: int
    participants: list
    client_specs: list   # per participant: {"client_id", "spec", "param_count"}
    bytes_down: int
    bytes_up: int
    dropped: list = field(default_factory=list)
    accuracy: float | None = None
    loss: float | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "participants": list(self.participants),
            "client_specs": self.client_specs,
            "bytes_down": self.bytes_down,
            "bytes_up": self.bytes_up,
            "dropped": list(self.dropped),
            "accuracy": self.accuracy,
            "loss": self.loss,
            "wall_time": self.wall_time,
        }


def select_participants(n_clients: int, rate: float, rng: RngStream) -> list[int]:
    """ceil(rate * n_clients) distinct ids, uniform without replacement."""
    if not 0 < rate <= 1:
        raise ConfigError("participation rate must be in (0, 1]")
    k = int(np.ceil(rate * n_clients))
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def local_train(sub: ModelWeights, profile: ClientProfile) -> ModelWeights:
    """local_epochs full passes of SGD over the shard, fixed batch order."""
    w = sub
    for _ in range(profile.local_epochs):
        for batch in profile.shard:
            logits, cache = forward(w, batch)
            loss, _ = softmax_cross_entropy(logits, batch.labels)
            if not np.isfinite(loss):
                raise NumericError(f"client {profile.client_id}: non-finite loss")
            grads = backward(w, cache, batch.labels)
            w = sgd_step(w, grads, profile.lr)
    return w


def _coverage_indices(name: str, spec: SubmodelSpec, cfg: ModelConfig):
    """Index arrays selecting, inside the global tensor, the coordinates a
    sub-model covers; None means full coverage."""
    if name.startswith("layer"):
        layer = int(name.split(".")[0][len("layer"):])
        rest = name.split(".", 1)[1]
        if rest.startswith("head"):
            head = int(rest.split(".")[0][len("head"):])
            kind = rest.split(".")[1]
            qk = spec.qk_widths[layer][head]
            v = spec.v_widths[layer][head]
            if kind in ("wq", "wk"):
                return (slice(None), slice(0, qk))
            if kind in ("bq", "bk"):
                return (slice(0, qk),)
            if kind == "wv":
                return (slice(None), slice(0, v))
            if kind == "bv":
                return (slice(0, v),)
        elif rest == "wo":
            rows = []
            for h in range(cfg.n_heads):
                lo = h * cfg.d_v
                rows.extend(range(lo, lo + spec.v_widths[layer][h]))
            return (np.asarray(rows, dtype=np.intp), slice(None))
        elif rest == "w1":
            return (slice(None), slice(0, spec.ffn_widths[layer]))
        elif rest == "b1":
            return (slice(0, spec.ffn_widths[layer]),)
        elif rest == "w2":
            return (slice(0, spec.ffn_widths[layer]), slice(None))
    return None  # embed, classifier, norms, remaining biases: full coverage


def aggregate(global_w: ModelWeights,
              updates: list[tuple[SubmodelSpec, ModelWeights]]) -> ModelWeights:
    """Per-coordinate mean over covering clients; uncovered coordinates keep
    the previous global value."""
    cfg = global_w.config
    sums = {name: np.zeros_like(arr) for name, arr in global_w.tensors.items()}
    counts = {name: np.zeros(arr.shape, dtype=np.int64)
              for name, arr in global_w.tensors.items()}
    for spec, w in updates:
        spec.validate(cfg)
        for name, garr in global_w.tensors.items():
            idx = _coverage_indices(name, spec, cfg)
            sub = w.tensors[name]
            if idx is None:
                if sub.shape != garr.shape:
                    raise AggregationError(
                        f"update tensor {name} has shape {sub.shape}, expected {garr.shape}")
                sums[name] += sub
                counts[name] += 1
            else:
                if sub.shape != sums[name][idx].shape:
                    raise AggregationError(
                        f"update tensor {name} has shape {sub.shape}, "
                        f"spec expects {sums[name][idx].shape}")
                sums[name][idx] += sub
                counts[name][idx] += 1
    merged = {}
    for name, garr in global_w.tensors.items():
        c = counts[name]
        covered = c > 0
        new = garr.copy()
        new[covered] = sums[name][covered] / c[covered]
        merged[name] = new
    return ModelWeights(cfg, merged)


def _thread_count() -> int:
    try:
        return max(0, int(os.environ.get("RAFFM_THREADS", "0")))
    except ValueError:
        return 0


def run_round(state: FederationState, cfg: FederationConfig,
              eval_batches=None) -> tuple[FederationState, RoundRecord]:
    """One communication round: prioritize, sample specs, extract, local
    train, aggregate."""
    t0 = time.monotonic()
    t = state.round_index
    seed = cfg.master_seed

    prioritized, _ = prioritize_model(
        state.global_weights, permute_qk=cfg.permute_qk,
        permute_vo=cfg.permute_vo, permute_ffn=cfg.permute_ffn)

    select_rng = RngStream(seed, STREAM_SELECT + t)
    participants = select_participants(cfg.n_clients, cfg.participation_rate, select_rng)

    model_cfg = state.global_weights.config
    dispatches = []
    bytes_down = 0
    client_specs = []
    for cid in participants:
        profile = state.profiles[cid]
        spec_rng = RngStream(seed, STREAM_SPEC + (t << 20) + cid)
        spec = sample_submodel_spec(model_cfg, profile.budget, cfg.ratio_set, spec_rng)
        n_params = param_count(spec, model_cfg)
        if n_params > profile.budget.max_params:
            raise AggregationError(
                f"client {cid}: sampled spec exceeds budget ({n_params} params)")
        sub = extract_submodel(prioritized, spec)
        bytes_down += n_params * BYTES_PER_PARAM
        client_specs.append({"client_id": cid, "spec": spec.to_dict(),
                             "param_count": n_params})
        dispatches.append((cid, spec, sub, profile))

    def train_one(item):
        cid, spec, sub, profile = item
        try:
            return cid, spec, local_train(sub, profile), None
        except NumericError as exc:
            return cid, spec, None, str(exc)

    threads = _thread_count()
    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(train_one, dispatches))
    else:
        results = [train_one(item) for item in dispatches]

    updates = []
    dropped = []
    bytes_up = 0
    for cid, spec, trained, err in results:
        if err is not None:
            dropped.append({"client_id": cid, "reason": err})
            continue
        updates.append((spec, trained))
        bytes_up += param_count(spec, model_cfg) * BYTES_PER_PARAM

    new_global = aggregate(prioritized, updates) if updates else state.global_weights

    record = RoundRecord(round=t, participants=participants, client_specs=client_specs,
                         bytes_down=bytes_down, bytes_up=bytes_up, dropped=dropped)
    if eval_batches is not None and cfg.eval_every > 0 and (t + 1) % cfg.eval_every == 0:
        record.accuracy, record.loss = evaluate(new_global, eval_batches)
    record.wall_time = time.monotonic() - t0

    return FederationState(global_weights=new_global, round_index=t + 1,
                           profiles=state.profiles), record


def run_federation(cfg: FederationConfig, model_cfg: ModelConfig,
                   profiles: list[ClientProfile],
                   eval_batches=None) -> tuple[ModelWeights, list[RoundRecord]]:
    """Initialize from the master seed and execute all rounds."""
    if len(profiles) != cfg.n_clients:
        raise ConfigError(f"{len(profiles)} profiles for {cfg.n_clients} clients")
    floor = param_count(min_spec(model_cfg, cfg.ratio_set), model_cfg)
    for p in profiles:
        if p.budget.max_params < floor:
            raise ConfigError(
                f"client {p.client_id}: budget {p.budget.max_params} below "
                f"minimum spec size {floor}")
    state = FederationState(
        global_weights=init_weights(model_cfg, cfg.master_seed),
        profiles=profiles)
    log: list[RoundRecord] = []
    for _ in range(cfg.rounds):
        state, record = run_round(state, cfg, eval_batches=eval_batches)
        log.append(record)
    return state.global_weights, log


def measure_traffic(log: list[RoundRecord]) -> dict:
    """Aggregate the per-round byte fields of a federation log."""
    if not log:
        raise ValidationError("empty federation log")
    total = sum(r.bytes_down + r.bytes_up for r in log)
    slots = sum(len(r.participants) for r in log)
    return {
        "total_bytes": total,
        "per_client_mean_bytes_per_round": total / slots if slots else 0.0,
        "rounds": len(log),
    }
