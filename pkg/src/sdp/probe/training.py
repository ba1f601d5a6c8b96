"""Locked training procedure: AdamW, cosine annealing, seeded determinism.

One model is trained from scratch per task. All randomness (weight init and
the per-epoch shuffle) flows from the single seed in TrainConfig, the
optimizer and schedule are fixed, and there is no augmentation path, so two
runs with identical inputs and seed produce identical parameter bytes and an
identical loss log. Model selection keeps the epoch with the best validation
metric (highest top-1 for classification, lowest MAE for regression), earlier
epoch winning ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..canonical import CanonicalTensor
from .model import (ModelConfig, forward_pass, init_params, loss_and_grads,
                    param_layout, tokenize, _softmax)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class EmptySplit(ValueError):
    """Training requires nonempty train and validation splits."""


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_max: float = 2e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    seed: int = 992
    task: str = "classification"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must be <= lr_max")


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing: lr_min + 0.5*(lr_max - lr_min)*(1 + cos(pi*e/E))."""
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


def adamw_init(params: dict[str, np.ndarray]) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
               lr: float, weight_decay: float,
               beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
               eps: float = ADAM_EPS) -> None:
    """In-place AdamW update: decoupled decay, bias-corrected moments."""
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay != 0.0:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    log_rows: list[tuple[int, float, float, float]]   # (epoch, lr, train_loss, val_metric)
    best_epoch: int
    best_val: float
    label_names: list[str] = field(default_factory=list)


def _stack_tokens(tensors: list[CanonicalTensor], cfg: ModelConfig) -> np.ndarray:
    x = np.stack([tokenize(t) for t in tensors])
    if x.shape[2] != cfg.token_dim:
        raise ValueError(f"token width {x.shape[2]} != configured {cfg.token_dim}")
    return x


def _targets(tensors: list[CanonicalTensor], task: str) -> np.ndarray:
    labels = [t.label for t in tensors]
    if any(l is None for l in labels):
        raise ValueError("every training tensor needs a label")
    if task == "classification":
        return np.array([int(l) for l in labels], dtype=np.int64)
    return np.array([[float(l)] for l in labels], dtype=np.float64)


def predict_outputs(x: np.ndarray, params, cfg: ModelConfig, batch_size: int = 32) -> np.ndarray:
    outs = []
    for start in range(0, x.shape[0], batch_size):
        out, _ = forward_pass(x[start:start + batch_size], params, cfg, want_cache=False)
        outs.append(out)
    return np.concatenate(outs, axis=0)


def predict_probs(tensors: list[CanonicalTensor], params, cfg: ModelConfig) -> np.ndarray:
    """Per-sample class probabilities for a list of canonical tensors."""
    x = _stack_tokens(tensors, cfg)
    return _softmax(predict_outputs(x, params, cfg))


def predict_classes(tensors: list[CanonicalTensor], params, cfg: ModelConfig) -> np.ndarray:
    return np.argmax(predict_probs(tensors, params, cfg), axis=1)


def _val_metric(x_val, y_val, params, cfg: ModelConfig) -> float:
    out = predict_outputs(x_val, params, cfg)
    if cfg.task == "classification":
        return float(np.mean(np.argmax(out, axis=1) == y_val))
    return float(np.mean(np.abs(out - y_val)))


def train(train_tensors: list[CanonicalTensor], val_tensors: list[CanonicalTensor],
          model_cfg: ModelConfig, train_cfg: TrainConfig,
          label_names: list[str] | None = None) -> TrainResult:
    """Seeded end-to-end training; see the module docstring for the contract."""
    if not train_tensors:
        raise EmptySplit("train split is empty")
    if not val_tensors:
        raise EmptySplit("val split is empty")
    if model_cfg.task != train_cfg.task:
        raise ValueError("model and train configs disagree on the task")
    x_tr = _stack_tokens(train_tensors, model_cfg)
    y_tr = _targets(train_tensors, train_cfg.task)
    x_val = _stack_tokens(val_tensors, model_cfg)
    y_val = _targets(val_tensors, train_cfg.task)

    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, rng)
    state = adamw_init(params)
    classification = train_cfg.task == "classification"
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch, best_val = -1, -math.inf if classification else math.inf
    log_rows: list[tuple[int, float, float, float]] = []

    n = x_tr.shape[0]
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr_max, train_cfg.lr_min)
        perm = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = perm[start:start + train_cfg.batch_size]
            loss, grads = loss_and_grads(x_tr[idx], y_tr[idx], params, model_cfg)
            if not math.isfinite(loss):
                raise NonFiniteLoss(epoch, bi, loss)
            adamw_step(params, grads, state, lr, train_cfg.weight_decay)
            losses.append(loss)
        val = _val_metric(x_val, y_val, params, model_cfg)
        log_rows.append((epoch, lr, float(np.mean(losses)), val))
        improved = val > best_val if classification else val < best_val
        if improved:
            best_val = val
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
    return TrainResult(params=best_params, model_cfg=model_cfg, train_cfg=train_cfg,
                       log_rows=log_rows, best_epoch=best_epoch, best_val=best_val,
                       label_names=list(label_names or []))


# ---------------------------------------------------------------------------
# Gradient verification


def random_tiny_config(rng: np.random.Generator) -> tuple[ModelConfig, int, int]:
    """A small random model/batch/sequence setup for finite-difference checks."""
    heads = int(rng.integers(1, 3))
    cfg = ModelConfig(
        depth=int(rng.integers(1, 3)),
        embed_dim=heads * int(rng.integers(2, 5)),
        heads=heads,
        ffn_dim=int(rng.integers(4, 9)),
        token_dim=int(rng.integers(3, 8)),
        max_t=8,
        out_dim=int(rng.integers(2, 4)),
        task="classification" if rng.uniform() < 0.5 else "regression",
    )
    t = int(rng.integers(2, cfg.max_t + 1))
    b = int(rng.integers(1, 4))
    return cfg, t, b


def grad_check(cfg: ModelConfig | None = None, seed: int = 0, coords_per_param: int = 2,
               step: float = 1e-6, grad_fn=loss_and_grads) -> float:
    """Max relative error between analytic gradients and central differences.

    Samples a handful of coordinates from every parameter array of a tiny
    double-precision model and compares d(loss)/d(coord). `grad_fn` exists so
    tests can substitute a corrupted backward as a negative control.
    """
    rng = np.random.default_rng(seed)
    if cfg is None:
        cfg, t, b = random_tiny_config(rng)
    else:
        t = min(4, cfg.max_t)
        b = 2
    x = rng.standard_normal((b, t, cfg.token_dim))
    if cfg.task == "classification":
        y = rng.integers(0, cfg.out_dim, size=b)
    else:
        y = rng.standard_normal((b, cfg.out_dim))
    params = init_params(cfg, rng)
    _, grads = grad_fn(x, y, params, cfg)

    def loss_only() -> float:
        out, _ = forward_pass(x, params, cfg, want_cache=False)
        if cfg.task == "classification":
            from .model import cross_entropy
            return cross_entropy(out, y)[0]
        from .model import mse
        return mse(out, np.asarray(y, dtype=np.float64))[0]

    max_rel = 0.0
    for name, _ in param_layout(cfg):
        arr = params[name]
        flat = arr.reshape(-1)
        n_coords = min(coords_per_param, flat.size)
        picks = rng.choice(flat.size, size=n_coords, replace=False)
        for idx in picks:
            orig = flat[idx]
            h = step * max(1.0, abs(orig))
            flat[idx] = orig + h
            up = loss_only()
            flat[idx] = orig - h
            down = loss_only()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = grads[name].reshape(-1)[idx]
            denom = max(abs(analytic), abs(numeric), 1e-12)
            max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return max_rel
