"""Miniature pre-norm multi-head transformer classifier with exact manual backprop.

The model is a standard encoder stack: token embedding, per-layer
(layer-norm -> multi-head attention -> residual, layer-norm -> ReLU FFN ->
residual), mean pooling over positions, and a linear classifier head.
Weights live in a flat name->array map so that slicing, aggregation and
serialization can treat every parameter uniformly. Per-head widths may be
narrower than the config maxima: forward/backward read actual shapes from
the arrays, which is what makes extracted sub-models runnable as-is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, ValidationError
from .tensor import RngStream, matmul, softmax_rows

LN_EPS = 1e-5
_INIT_STREAM_BASE = 100


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_k: int
    d_v: int
    d_ff: int
    vocab_size: int
    n_classes: int
    max_seq: int

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_k", "d_v", "d_ff",
                     "vocab_size", "n_classes", "max_seq"):
            if getattr(self, name) < 1:
                raise ValidationError(f"ModelConfig.{name} must be >= 1")


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray  # (batch, seq_len) integer token ids
    labels: np.ndarray  # (batch,) integer class labels

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.intp))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.intp))
        if self.tokens.ndim != 2 or self.labels.ndim != 1:
            raise ValidationError("Batch needs 2-D tokens and 1-D labels")
        if self.tokens.shape[0] != self.labels.shape[0]:
            raise ValidationError("tokens/labels batch size mismatch")

    def __len__(self):
        return self.tokens.shape[0]


def tensor_names(cfg: ModelConfig) -> list[str]:
    """Canonical enumeration order of every trainable tensor."""
    names = ["embed"]
    for i in range(cfg.n_layers):
        names += [f"layer{i}.ln1.scale", f"layer{i}.ln1.shift"]
        for h in range(cfg.n_heads):
            p = f"layer{i}.head{h}"
            names += [f"{p}.wq", f"{p}.bq", f"{p}.wk", f"{p}.bk", f"{p}.wv", f"{p}.bv"]
        names += [f"layer{i}.wo", f"layer{i}.bo",
                  f"layer{i}.ln2.scale", f"layer{i}.ln2.shift",
                  f"layer{i}.w1", f"layer{i}.b1", f"layer{i}.w2", f"layer{i}.b2"]
    names += ["cls.w", "cls.b"]
    return names


def full_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dk, dv, dff = cfg.d_model, cfg.d_k, cfg.d_v, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        shapes[f"layer{i}.ln1.scale"] = (d,)
        shapes[f"layer{i}.ln1.shift"] = (d,)
        for h in range(cfg.n_heads):
            p = f"layer{i}.head{h}"
            shapes[f"{p}.wq"] = (d, dk)
            shapes[f"{p}.bq"] = (dk,)
            shapes[f"{p}.wk"] = (d, dk)
            shapes[f"{p}.bk"] = (dk,)
            shapes[f"{p}.wv"] = (d, dv)
            shapes[f"{p}.bv"] = (dv,)
        shapes[f"layer{i}.wo"] = (cfg.n_heads * dv, d)
        shapes[f"layer{i}.bo"] = (d,)
        shapes[f"layer{i}.ln2.scale"] = (d,)
        shapes[f"layer{i}.ln2.shift"] = (d,)
        shapes[f"layer{i}.w1"] = (d, dff)
        shapes[f"layer{i}.b1"] = (dff,)
        shapes[f"layer{i}.w2"] = (dff, d)
        shapes[f"layer{i}.b2"] = (d,)
    shapes["cls.w"] = (d, cfg.n_classes)
    shapes["cls.b"] = (cfg.n_classes,)
    return shapes


class ModelWeights:
    """Complete parameter set; the per-tensor shapes are the source of truth
    for actual (possibly sliced) widths."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def param_total(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())

    def qk_width(self, layer: int, head: int) -> int:
        return self.tensors[f"layer{layer}.head{head}.wq"].shape[1]

    def v_width(self, layer: int, head: int) -> int:
        return self.tensors[f"layer{layer}.head{head}.wv"].shape[1]

    def ffn_width(self, layer: int) -> int:
        return self.tensors[f"layer{layer}.w1"].shape[1]

    def allclose(self, other: "ModelWeights", rtol=0.0, atol=0.0) -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.allclose(self.tensors[k], other.tensors[k], rtol=rtol, atol=atol)
                   for k in self.tensors)


def init_weights(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrices from per-tensor
    streams; biases zero, layer-norm scale one / shift zero."""
    shapes = full_shapes(cfg)
    tensors: dict[str, np.ndarray] = {}
    for idx, name in enumerate(tensor_names(cfg)):
        shape = shapes[name]
        if name.endswith(".scale"):
            tensors[name] = np.ones(shape)
        elif name.endswith((".shift", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", "cls.b")):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            stream = RngStream(seed, _INIT_STREAM_BASE + idx)
            tensors[name] = stream.uniform(-bound, bound, shape)
    return ModelWeights(cfg, tensors)


GradientSet = dict


def attention_scores(wq: np.ndarray, wk: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-stochastic score matrix softmax(x wq (x wk)^T / sqrt(d_k))."""
    if wq.shape != wk.shape:
        raise ShapeError(f"wq/wk shape mismatch: {wq.shape} vs {wk.shape}")
    q = matmul(x, wq)
    k = matmul(x, wk)
    return softmax_rows(q @ k.T / np.sqrt(wq.shape[1]))


def _layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return scale * xhat + shift, (xhat, inv_std)


def _layer_norm_backward(dy: np.ndarray, scale: np.ndarray, ln_cache):
    xhat, inv_std = ln_cache
    dscale = (dy * xhat).sum(axis=(0, 1))
    dshift = dy.sum(axis=(0, 1))
    dxhat = dy * scale
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dscale, dshift


@dataclass
class _LayerCache:
    a1: np.ndarray
    ln1: tuple
    q: list = field(default_factory=list)
    k: list = field(default_factory=list)
    v: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    o_cat: np.ndarray | None = None
    x2: np.ndarray | None = None
    a2: np.ndarray | None = None
    ln2: tuple | None = None
    h1: np.ndarray | None = None
    relu: np.ndarray | None = None


@dataclass
class ForwardCache:
    weights: ModelWeights
    batch: Batch
    layers: list
    pooled: np.ndarray
    logits: np.ndarray


def forward(w: ModelWeights, batch: Batch) -> tuple[np.ndarray, ForwardCache]:
    cfg = w.config
    tokens = batch.tokens
    if tokens.shape[1] > cfg.max_seq:
        raise ValidationError(f"sequence length {tokens.shape[1]} exceeds max_seq {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValidationError("token id out of vocabulary range")
    if len(batch.labels) and (batch.labels.min() < 0 or batch.labels.max() >= cfg.n_classes):
        raise ValidationError("label out of class range")

    x = w["embed"][tokens]  # (B, l, d)
    layer_caches = []
    for i in range(cfg.n_layers):
        a1, ln1 = _layer_norm(x, w[f"layer{i}.ln1.scale"], w[f"layer{i}.ln1.shift"])
        cache = _LayerCache(a1=a1, ln1=ln1)
        heads = []
        for h in range(cfg.n_heads):
            p = f"layer{i}.head{h}"
            q = a1 @ w[f"{p}.wq"] + w[f"{p}.bq"]
            k = a1 @ w[f"{p}.wk"] + w[f"{p}.bk"]
            v = a1 @ w[f"{p}.wv"] + w[f"{p}.bv"]
            scores = q @ k.transpose(0, 2, 1) / np.sqrt(q.shape[-1])
            probs = np.exp(scores - scores.max(axis=-1, keepdims=True))
            probs /= probs.sum(axis=-1, keepdims=True)
            heads.append(probs @ v)
            cache.q.append(q)
            cache.k.append(k)
            cache.v.append(v)
            cache.probs.append(probs)
        o_cat = np.concatenate(heads, axis=-1)
        x2 = x + o_cat @ w[f"layer{i}.wo"] + w[f"layer{i}.bo"]
        a2, ln2 = _layer_norm(x2, w[f"layer{i}.ln2.scale"], w[f"layer{i}.ln2.shift"])
        h1 = a2 @ w[f"layer{i}.w1"] + w[f"layer{i}.b1"]
        relu = np.maximum(h1, 0.0)
        x = x2 + relu @ w[f"layer{i}.w2"] + w[f"layer{i}.b2"]
        cache.o_cat, cache.x2, cache.a2, cache.ln2 = o_cat, x2, a2, ln2
        cache.h1, cache.relu = h1, relu
        layer_caches.append(cache)

    pooled = x.mean(axis=1)
    logits = pooled @ w["cls.w"] + w["cls.b"]
    return logits, ForwardCache(weights=w, batch=batch, layers=layer_caches,
                                pooled=pooled, logits=logits)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch plus d(loss)/d(logits)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.log(probs[np.arange(n), labels]).mean()
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def backward(w: ModelWeights, cache: ForwardCache, labels: np.ndarray) -> GradientSet:
    if cache.weights is not w:
        raise ValidationError("cache does not belong to these weights")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (cache.logits.shape[0],):
        raise ValidationError("labels do not match the cached batch")

    cfg = w.config
    grads: GradientSet = {name: np.zeros_like(arr) for name, arr in w.tensors.items()}
    _, dlogits = softmax_cross_entropy(cache.logits, labels)

    grads["cls.w"] = cache.pooled.T @ dlogits
    grads["cls.b"] = dlogits.sum(axis=0)
    dpooled = dlogits @ w["cls.w"].T

    seq_len = cache.batch.tokens.shape[1]
    dx = np.repeat(dpooled[:, None, :], seq_len, axis=1) / seq_len

    for i in reversed(range(cfg.n_layers)):
        lc = cache.layers[i]
        # FFN block: x_out = x2 + relu(a2 w1 + b1) w2 + b2
        grads[f"layer{i}.b2"] = dx.sum(axis=(0, 1))
        grads[f"layer{i}.w2"] = np.einsum("blf,bld->fd", lc.relu, dx)
        drelu = dx @ w[f"layer{i}.w2"].T
        dh1 = drelu * (lc.h1 > 0)
        grads[f"layer{i}.w1"] = np.einsum("bld,blf->df", lc.a2, dh1)
        grads[f"layer{i}.b1"] = dh1.sum(axis=(0, 1))
        da2 = dh1 @ w[f"layer{i}.w1"].T
        dx2_ln, dsc2, dsh2 = _layer_norm_backward(da2, w[f"layer{i}.ln2.scale"], lc.ln2)
        grads[f"layer{i}.ln2.scale"] = dsc2
        grads[f"layer{i}.ln2.shift"] = dsh2
        dx2 = dx + dx2_ln

        # attention block: x2 = x_in + o_cat wo + bo
        grads[f"layer{i}.bo"] = dx2.sum(axis=(0, 1))
        grads[f"layer{i}.wo"] = np.einsum("blc,bld->cd", lc.o_cat, dx2)
        do_cat = dx2 @ w[f"layer{i}.wo"].T

        da1 = np.zeros_like(lc.a1)
        offset = 0
        for h in range(cfg.n_heads):
            p = f"layer{i}.head{h}"
            dv_h = lc.v[h].shape[-1]
            do_h = do_cat[..., offset:offset + dv_h]
            offset += dv_h
            probs = lc.probs[h]
            dprobs = do_h @ lc.v[h].transpose(0, 2, 1)
            dv = probs.transpose(0, 2, 1) @ do_h
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
            dscores /= np.sqrt(lc.q[h].shape[-1])
            dq = dscores @ lc.k[h]
            dk = dscores.transpose(0, 2, 1) @ lc.q[h]
            grads[f"{p}.wq"] = np.einsum("bld,blk->dk", lc.a1, dq)
            grads[f"{p}.bq"] = dq.sum(axis=(0, 1))
            grads[f"{p}.wk"] = np.einsum("bld,blk->dk", lc.a1, dk)
            grads[f"{p}.bk"] = dk.sum(axis=(0, 1))
            grads[f"{p}.wv"] = np.einsum("bld,blk->dk", lc.a1, dv)
            grads[f"{p}.bv"] = dv.sum(axis=(0, 1))
            da1 += dq @ w[f"{p}.wq"].T + dk @ w[f"{p}.wk"].T + dv @ w[f"{p}.wv"].T

        dx_ln, dsc1, dsh1 = _layer_norm_backward(da1, w[f"layer{i}.ln1.scale"], lc.ln1)
        grads[f"layer{i}.ln1.scale"] = dsc1
        grads[f"layer{i}.ln1.shift"] = dsh1
        dx = dx2 + dx_ln

    np.add.at(grads["embed"], cache.batch.tokens, dx)
    return grads


def sgd_step(w: ModelWeights, g: GradientSet, lr: float) -> ModelWeights:
    if lr < 0:
        raise ValidationError("learning rate must be >= 0")
    for name, grad in g.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient in {name}; step refused")
    return ModelWeights(w.config, {name: arr - lr * g[name]
                                   for name, arr in w.tensors.items()})


def evaluate(w: ModelWeights, batches) -> tuple[float, float]:
    """Accuracy and mean cross-entropy over all samples in the batches."""
    batches = list(batches)
    if not batches or all(len(b) == 0 for b in batches):
        raise ValidationError("evaluation set is empty")
    correct = 0
    total = 0
    loss_sum = 0.0
    for b in batches:
        logits, _ = forward(w, b)
        loss, _ = softmax_cross_entropy(logits, b.labels)
        loss_sum += loss * len(b)
        correct += int((logits.argmax(axis=1) == b.labels).sum())
        total += len(b)
    return correct / total, loss_sum / total
