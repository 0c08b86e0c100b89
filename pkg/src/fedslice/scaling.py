"""Salience scoring, channel prioritization, and budget-constrained sub-model extraction.

A "channel" is an output column of a weight matrix (one hidden unit).
Prioritization reorders channels so the highest-L1-salience ones lead the
matrix; extraction then keeps the leading columns, so any width cut retains
the most salient units. Query/key columns of one attention head are always
permuted by the same ranking, which leaves the head's attention scores
unchanged; value/output and FFN permutations are mirrored on the consuming
matrix's rows, which preserves the full forward function exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .nn import ModelConfig, ModelWeights, attention_scores
from .tensor import RngStream, check_permutation, inverse_permutation


@dataclass(frozen=True)
class ResourceBudget:
    max_params: int


@dataclass(frozen=True)
class SubmodelSpec:
    """Per-layer widths of every prunable dimension: widths[layer] fields
    index heads for qk/v."""
    ffn_widths: tuple
    qk_widths: tuple  # tuple per layer, tuple per head
    v_widths: tuple

    def validate(self, cfg: ModelConfig) -> None:
        if len(self.ffn_widths) != cfg.n_layers or len(self.qk_widths) != cfg.n_layers \
                or len(self.v_widths) != cfg.n_layers:
            raise ValidationError("spec layer count does not match config")
        for i in range(cfg.n_layers):
            if not 1 <= self.ffn_widths[i] <= cfg.d_ff:
                raise ValidationError(f"ffn width {self.ffn_widths[i]} out of [1, {cfg.d_ff}]")
            if len(self.qk_widths[i]) != cfg.n_heads or len(self.v_widths[i]) != cfg.n_heads:
                raise ValidationError("spec head count does not match config")
            for h in range(cfg.n_heads):
                if not 1 <= self.qk_widths[i][h] <= cfg.d_k:
                    raise ValidationError(f"qk width {self.qk_widths[i][h]} out of [1, {cfg.d_k}]")
                if not 1 <= self.v_widths[i][h] <= cfg.d_v:
                    raise ValidationError(f"v width {self.v_widths[i][h]} out of [1, {cfg.d_v}]")

    def to_dict(self) -> dict:
        return {"ffn_widths": list(self.ffn_widths),
                "qk_widths": [list(x) for x in self.qk_widths],
                "v_widths": [list(x) for x in self.v_widths]}

    @classmethod
    def from_dict(cls, d: dict) -> "SubmodelSpec":
        return cls(ffn_widths=tuple(d["ffn_widths"]),
                   qk_widths=tuple(tuple(x) for x in d["qk_widths"]),
                   v_widths=tuple(tuple(x) for x in d["v_widths"]))


def full_spec(cfg: ModelConfig) -> SubmodelSpec:
    return uniform_spec(cfg, 1.0)


def uniform_spec(cfg: ModelConfig, ratio: float) -> SubmodelSpec:
    w = _scaled_width
    return SubmodelSpec(
        ffn_widths=tuple(w(ratio, cfg.d_ff) for _ in range(cfg.n_layers)),
        qk_widths=tuple(tuple(w(ratio, cfg.d_k) for _ in range(cfg.n_heads))
                        for _ in range(cfg.n_layers)),
        v_widths=tuple(tuple(w(ratio, cfg.d_v) for _ in range(cfg.n_heads))
                       for _ in range(cfg.n_layers)),
    )


def _scaled_width(ratio: float, maximum: int) -> int:
    return max(1, math.ceil(ratio * maximum))


@dataclass
class PrioritizationRecord:
    """Audit trail: the permutation applied to each channel family."""
    qk_perms: list = field(default_factory=list)   # [layer][head] -> ndarray
    vo_perms: list = field(default_factory=list)   # [layer][head] -> ndarray
    ffn_perms: list = field(default_factory=list)  # [layer] -> ndarray
    permuted_qk: bool = False
    permuted_vo: bool = False
    permuted_ffn: bool = False


def salience_l1(w: np.ndarray, channel_axis: str = "cols") -> np.ndarray:
    """L1 salience per channel: the sum of absolute weights in the channel."""
    if w.size == 0:
        raise ShapeError("cannot score an empty tensor")
    if channel_axis == "cols":
        return np.abs(w).sum(axis=0)
    if channel_axis == "rows":
        return np.abs(w).sum(axis=1)
    raise ValidationError(f"channel_axis must be 'rows' or 'cols', got {channel_axis!r}")


def rank_channels(s: np.ndarray) -> np.ndarray:
    """Channel order of non-increasing salience; ties keep lower index first."""
    s = np.asarray(s)
    if s.size == 0:
        raise ShapeError("cannot rank an empty salience vector")
    return np.argsort(-s, kind="stable")


def joint_qk_salience(wq_head: np.ndarray, wk_head: np.ndarray) -> np.ndarray:
    """Per-channel mean of the query and key column saliences."""
    if wq_head.shape[1] != wk_head.shape[1]:
        raise ShapeError(f"query/key channel mismatch: {wq_head.shape} vs {wk_head.shape}")
    return (salience_l1(wq_head, "cols") + salience_l1(wk_head, "cols")) / 2.0


def prioritize_model(w: ModelWeights, permute_qk: bool = True, permute_vo: bool = True,
                     permute_ffn: bool = True) -> tuple[ModelWeights, PrioritizationRecord]:
    """Reorder channels by salience, function-preservingly.

    Per head the SAME joint-salience permutation goes to W^q and W^k columns
    (and their biases). With permute_vo, a per-head W^v column permutation is
    mirrored on the matching W^o rows; with permute_ffn, the W^1 column
    permutation is mirrored on W^2 rows.
    """
    cfg = w.config
    out = w.copy()
    rec = PrioritizationRecord(permuted_qk=permute_qk, permuted_vo=permute_vo,
                               permuted_ffn=permute_ffn)
    for i in range(cfg.n_layers):
        qk_layer, vo_layer = [], []
        for h in range(cfg.n_heads):
            p = f"layer{i}.head{h}"
            dk = out[f"{p}.wq"].shape[1]
            dv = out[f"{p}.wv"].shape[1]
            if permute_qk:
                perm = rank_channels(joint_qk_salience(out[f"{p}.wq"], out[f"{p}.wk"]))
                out.tensors[f"{p}.wq"] = out[f"{p}.wq"][:, perm]
                out.tensors[f"{p}.wk"] = out[f"{p}.wk"][:, perm]
                out.tensors[f"{p}.bq"] = out[f"{p}.bq"][perm]
                out.tensors[f"{p}.bk"] = out[f"{p}.bk"][perm]
            else:
                perm = np.arange(dk)
            qk_layer.append(perm)
            if permute_vo:
                vperm = rank_channels(salience_l1(out[f"{p}.wv"], "cols"))
                out.tensors[f"{p}.wv"] = out[f"{p}.wv"][:, vperm]
                out.tensors[f"{p}.bv"] = out[f"{p}.bv"][vperm]
                lo = sum(out.v_width(i, g) for g in range(h))
                wo = out.tensors[f"layer{i}.wo"]
                wo[lo:lo + dv, :] = wo[lo:lo + dv, :][vperm, :]
            else:
                vperm = np.arange(dv)
            vo_layer.append(vperm)
        if permute_ffn:
            fperm = rank_channels(salience_l1(out[f"layer{i}.w1"], "cols"))
            out.tensors[f"layer{i}.w1"] = out[f"layer{i}.w1"][:, fperm]
            out.tensors[f"layer{i}.b1"] = out[f"layer{i}.b1"][fperm]
            out.tensors[f"layer{i}.w2"] = out[f"layer{i}.w2"][fperm, :]
        else:
            fperm = np.arange(out.ffn_width(i))
        rec.qk_perms.append(qk_layer)
        rec.vo_perms.append(vo_layer)
        rec.ffn_perms.append(fperm)
    return out, rec


def verify_theorem1(wq: np.ndarray, wk: np.ndarray, x: np.ndarray, p) -> float:
    """Max relative difference of attention scores after permuting the
    columns of BOTH wq and wk by p."""
    p = check_permutation(p, wq.shape[1])
    base = attention_scores(wq, wk, x)
    permuted = attention_scores(wq[:, p], wk[:, p], x)
    denom = np.maximum(np.maximum(np.abs(base), np.abs(permuted)), 1e-300)
    return float((np.abs(base - permuted) / denom).max())


def param_count(spec: SubmodelSpec, cfg: ModelConfig) -> int:
    """Exact trainable-parameter count of the sub-model the spec selects."""
    spec.validate(cfg)
    d = cfg.d_model
    total = cfg.vocab_size * d            # embedding
    total += d * cfg.n_classes + cfg.n_classes  # classifier
    for i in range(cfg.n_layers):
        total += 4 * d                    # two layer norms
        total += 2 * d                    # bo, b2
        v_sum = 0
        for h in range(cfg.n_heads):
            qk = spec.qk_widths[i][h]
            v = spec.v_widths[i][h]
            total += 2 * (d * qk + qk)    # wq+bq, wk+bk
            total += d * v + v            # wv+bv
            v_sum += v
        total += v_sum * d                # wo
        ffn = spec.ffn_widths[i]
        total += d * ffn + ffn            # w1+b1
        total += ffn * d                  # w2
    return total


def min_spec(cfg: ModelConfig, ratio_set) -> SubmodelSpec:
    return uniform_spec(cfg, min(ratio_set))


def sample_submodel_spec(cfg: ModelConfig, budget: ResourceBudget, ratio_set,
                         rng: RngStream, max_attempts: int = 100) -> SubmodelSpec:
    """Draw each prunable width independently from the ratio set, rejecting
    draws over budget; falls back to the all-minimum spec after
    ``max_attempts`` rejections."""
    ratios = sorted(ratio_set)
    if not ratios or ratios[0] <= 0 or ratios[-1] > 1:
        raise ConfigError(f"ratio set must lie in (0, 1]: {ratio_set}")
    floor = min_spec(cfg, ratios)
    if param_count(floor, cfg) > budget.max_params:
        raise ConfigError(
            f"budget {budget.max_params} below the minimum spec "
            f"({param_count(floor, cfg)} params)")
    for _ in range(max_attempts):
        spec = SubmodelSpec(
            ffn_widths=tuple(_scaled_width(ratios[rng.integers(0, len(ratios))], cfg.d_ff)
                             for _ in range(cfg.n_layers)),
            qk_widths=tuple(tuple(_scaled_width(ratios[rng.integers(0, len(ratios))], cfg.d_k)
                                  for _ in range(cfg.n_heads))
                            for _ in range(cfg.n_layers)),
            v_widths=tuple(tuple(_scaled_width(ratios[rng.integers(0, len(ratios))], cfg.d_v)
                                 for _ in range(cfg.n_heads))
                           for _ in range(cfg.n_layers)),
        )
        if param_count(spec, cfg) <= budget.max_params:
            return spec
    return floor


def extract_submodel(w_prioritized: ModelWeights, spec: SubmodelSpec) -> ModelWeights:
    """Slice the leading channels per the spec; W^o/W^2 rows follow their
    producers' columns."""
    cfg = w_prioritized.config
    spec.validate(cfg)
    src = w_prioritized.tensors
    out: dict[str, np.ndarray] = {}
    for name, arr in src.items():
        out[name] = arr.copy()
    for i in range(cfg.n_layers):
        keep_rows = []
        for h in range(cfg.n_heads):
            p = f"layer{i}.head{h}"
            qk = spec.qk_widths[i][h]
            v = spec.v_widths[i][h]
            if qk > src[f"{p}.wq"].shape[1] or v > src[f"{p}.wv"].shape[1]:
                raise ShapeError(f"spec width exceeds weights at layer {i} head {h}")
            out[f"{p}.wq"] = src[f"{p}.wq"][:, :qk].copy()
            out[f"{p}.bq"] = src[f"{p}.bq"][:qk].copy()
            out[f"{p}.wk"] = src[f"{p}.wk"][:, :qk].copy()
            out[f"{p}.bk"] = src[f"{p}.bk"][:qk].copy()
            out[f"{p}.wv"] = src[f"{p}.wv"][:, :v].copy()
            out[f"{p}.bv"] = src[f"{p}.bv"][:v].copy()
            lo = sum(w_prioritized.v_width(i, g) for g in range(h))
            keep_rows.extend(range(lo, lo + v))
        out[f"layer{i}.wo"] = src[f"layer{i}.wo"][keep_rows, :].copy()
        ffn = spec.ffn_widths[i]
        if ffn > src[f"layer{i}.w1"].shape[1]:
            raise ShapeError(f"spec FFN width exceeds weights at layer {i}")
        out[f"layer{i}.w1"] = src[f"layer{i}.w1"][:, :ffn].copy()
        out[f"layer{i}.b1"] = src[f"layer{i}.b1"][:ffn].copy()
        out[f"layer{i}.w2"] = src[f"layer{i}.w2"][:ffn, :].copy()
    return ModelWeights(cfg, out)


__all__ = [
    "ResourceBudget", "SubmodelSpec", "PrioritizationRecord",
    "salience_l1", "rank_channels", "joint_qk_salience", "prioritize_model",
    "verify_theorem1", "param_count", "sample_submodel_spec", "extract_submodel",
    "full_spec", "uniform_spec", "min_spec", "inverse_permutation",
]
