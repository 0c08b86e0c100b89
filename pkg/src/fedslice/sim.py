"""End-to-end simulation harness: dataset -> partition -> profiles -> federation."""

from __future__ import annotations

import numpy as np

from . import data as data_mod
from .config import RunConfig
from .errors import ConfigError
from .fed import ClientProfile, measure_traffic, run_federation
from .nn import Batch
from .scaling import ResourceBudget, full_spec, min_spec, param_count


def build_profiles(cfg: RunConfig):
    """Generate the task, hold out an eval split, partition the rest across
    clients, and assign cyclic budget fractions."""
    tokens, labels = data_mod.generate(cfg.task)
    n_eval = int(round(cfg.eval_fraction * cfg.task.n_samples))
    if n_eval >= cfg.task.n_samples:
        raise ConfigError("eval_fraction leaves no training data")
    train_tokens, train_labels = tokens[:-n_eval] if n_eval else tokens, \
        labels[:-n_eval] if n_eval else labels
    eval_batches = [Batch(tokens=tokens[-n_eval:], labels=labels[-n_eval:])] if n_eval else None

    shards = data_mod.dirichlet_partition(train_labels, cfg.partition)
    full_params = param_count(full_spec(cfg.model), cfg.model)
    floor = param_count(min_spec(cfg.model, cfg.federation.ratio_set), cfg.model)

    profiles = []
    fractions = cfg.budget_fractions or [1.0]
    for cid, shard_idx in enumerate(shards):
        frac = fractions[cid % len(fractions)]
        budget = max(floor, int(frac * full_params))
        profiles.append(ClientProfile(
            client_id=cid,
            budget=ResourceBudget(max_params=budget),
            shard=data_mod.batches_from_indices(train_tokens, train_labels,
                                                shard_idx, cfg.batch_size),
            local_epochs=cfg.local_epochs,
            lr=cfg.lr,
        ))
    return profiles, eval_batches, full_params


def run_simulation(cfg: RunConfig):
    """Run the whole federation and produce a machine-readable summary."""
    profiles, eval_batches, full_params = build_profiles(cfg)
    final_weights, log = run_federation(cfg.federation, cfg.model, profiles,
                                        eval_batches=eval_batches)

    client_params = [cs["param_count"] for r in log for cs in r.client_specs]
    evaluated = [r for r in log if r.accuracy is not None]
    summary = {
        "rounds": len(log),
        "master_seed": cfg.federation.master_seed,
        "full_model_params": full_params,
        "mean_client_params": float(np.mean(client_params)) if client_params else None,
        "final_accuracy": evaluated[-1].accuracy if evaluated else None,
        "final_loss": evaluated[-1].loss if evaluated else None,
        "total_bytes": measure_traffic(log)["total_bytes"] if log else 0,
    }
    return final_weights, log, summary
