"""Fixed Transformer probe: token embedding, pre-norm encoder stack, heads.

The probe is a plain pre-norm encoder: each layer applies multi-head
self-attention to the normalized input and adds the residual, then a GELU
feed-forward block the same way. A token is one time step of the canonical
tensor with real and imaginary parts stacked, so token_dim = 2 * A * K and
nothing of the complex sample is discarded. Global average pooling over time
produces the task-agnostic latent; a single affine head (with softmax for
classification) sits on top.

Everything runs in float64 numpy with hand-written backward passes so that
training is deterministic down to the bit for a given seed and gradients can
be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..canonical import CanonicalTensor

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

# Locked desk-scale defaults, recorded in every report so results stay comparable.
DEFAULT_DEPTH = 4
DEFAULT_EMBED_DIM = 64
DEFAULT_HEADS = 4
DEFAULT_FFN_DIM = 128

TASKS = ("classification", "regression")


class SequenceTooLong(ValueError):
    """Input has more time steps than the positional table covers."""


@dataclass(frozen=True)
class ModelConfig:
    depth: int = DEFAULT_DEPTH
    embed_dim: int = DEFAULT_EMBED_DIM
    heads: int = DEFAULT_HEADS
    ffn_dim: int = DEFAULT_FFN_DIM
    token_dim: int = 60          # 2 * A * K of the tensors this probe consumes
    max_t: int = 500
    out_dim: int = 2             # classes, or regression output width
    task: str = "classification"

    def __post_init__(self):
        for name in ("depth", "embed_dim", "heads", "ffn_dim", "token_dim", "max_t", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Documented fixed parameter order; checkpoints serialize exactly this."""
    d, f = cfg.embed_dim, cfg.token_dim
    layout: list[tuple[str, tuple[int, ...]]] = [
        ("proj_w", (f, d)), ("proj_b", (d,)), ("pos", (cfg.max_t, d))]
    for i in range(cfg.depth):
        p = f"layers.{i}."
        layout += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "attn_wq", (d, d)), (p + "attn_bq", (d,)),
            (p + "attn_wk", (d, d)), (p + "attn_bk", (d,)),
            (p + "attn_wv", (d, d)), (p + "attn_bv", (d,)),
            (p + "attn_wo", (d, d)), (p + "attn_bo", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "ffn_w1", (d, cfg.ffn_dim)), (p + "ffn_b1", (cfg.ffn_dim,)),
            (p + "ffn_w2", (cfg.ffn_dim, d)), (p + "ffn_b2", (d,)),
        ]
    layout += [("head_w", (d, cfg.out_dim)), ("head_b", (cfg.out_dim,))]
    return layout


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded init: weights uniform +-1/sqrt(fan_in), positional normal(0, 0.02),
    layer-norm scale 1 / offset 0, biases 0. Draws follow param_layout order."""
    params: dict[str, np.ndarray] = {}
    for name, shape in param_layout(cfg):
        base = name.rsplit(".", 1)[-1]
        if base == "pos":
            params[name] = 0.02 * rng.standard_normal(shape)
        elif base.startswith(("proj_w", "attn_w", "ffn_w", "head_w")):
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif base.endswith("_g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zero_grads(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_layout(cfg)}


class MacCounter:
    """Accumulates multiply-add counts at the forward pass's matmul sites."""

    def __init__(self):
        self.macs = 0

    def add(self, macs: int) -> None:
        self.macs += int(macs)

    @property
    def flops(self) -> int:
        return 2 * self.macs


# ---------------------------------------------------------------------------
# Tokenization and embedding


def tokenize(tensor: CanonicalTensor | np.ndarray) -> np.ndarray:
    """Flatten a canonical sample to a (T, 2*A*K) real sequence.

    Row t stacks the A*K complex values at time t (pairs-major, C order) as
    [all real parts, all imaginary parts].
    """
    values = tensor.values if isinstance(tensor, CanonicalTensor) else np.asarray(tensor)
    if values.ndim != 3:
        raise ValueError(f"expected (A, K, T) tensor, got shape {values.shape}")
    a, k, t = values.shape
    flat = values.reshape(a * k, t).T                      # (T, A*K) complex
    return np.concatenate([flat.real, flat.imag], axis=1)  # (T, 2*A*K)


def embed(x_seq: np.ndarray, params: dict[str, np.ndarray],
          cfg: ModelConfig) -> np.ndarray:
    """Affine projection plus positional rows 0..T-1."""
    x = np.asarray(x_seq, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    t = x.shape[1]
    if t > cfg.max_t:
        raise SequenceTooLong(f"sequence length {t} exceeds max_t {cfg.max_t}")
    if x.shape[2] != cfg.token_dim:
        raise ValueError(f"token width {x.shape[2]} != configured {cfg.token_dim}")
    out = x @ params["proj_w"] + params["proj_b"] + params["pos"][:t]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Layer pieces, each returning (output, cache) with a matching backward


def _layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xhat, axis=axes)
    db = np.sum(dy, axis=axes)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, cfg):
    b, t, _ = x.shape
    return x.reshape(b, t, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attention_forward(x, p, prefix, cfg, counter=None):
    b, t, d = x.shape
    wq, wk, wv, wo = (p[prefix + n] for n in ("attn_wq", "attn_wk", "attn_wv", "attn_wo"))
    q = x @ wq + p[prefix + "attn_bq"]
    k = x @ wk + p[prefix + "attn_bk"]
    v = x @ wv + p[prefix + "attn_bv"]
    qh, kh, vh = (_split_heads(a, cfg) for a in (q, k, v))
    scale = 1.0 / math.sqrt(cfg.head_dim)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    attn = _softmax(scores)
    ctx = attn @ vh
    merged = _merge_heads(ctx)
    out = merged @ wo + p[prefix + "attn_bo"]
    if counter is not None:
        counter.add(3 * b * t * d * d)        # q, k, v projections
        counter.add(2 * b * t * t * d)        # scores and attention-times-values
        counter.add(b * t * d * d)            # output projection
    cache = (x, qh, kh, vh, attn, merged, scale)
    return out, cache, attn


def _attention_backward(dout, cache, p, prefix, cfg):
    x, qh, kh, vh, attn, merged, scale = cache
    b, t, d = x.shape
    grads = {}
    merged2 = merged.reshape(b * t, d)
    dout2 = dout.reshape(b * t, d)
    grads[prefix + "attn_wo"] = merged2.T @ dout2
    grads[prefix + "attn_bo"] = dout2.sum(axis=0)
    dmerged = dout @ p[prefix + "attn_wo"].T
    dctx = _split_heads(dmerged, cfg)
    dattn = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dqh = (dscores @ kh) * scale
    dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
    x2 = x.reshape(b * t, d)
    dx = np.zeros_like(x)
    for name, dproj in (("attn_wq", dqh), ("attn_wk", dkh), ("attn_wv", dvh)):
        dflat = _merge_heads(dproj).reshape(b * t, d)
        grads[prefix + name] = x2.T @ dflat
        grads[prefix + name.replace("w", "b")] = dflat.sum(axis=0)
        dx += (dflat @ p[prefix + name].T).reshape(b, t, d)
    return dx, grads


def gelu(x):
    u = GELU_C * (x + GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x):
    u = GELU_C * (x + GELU_A * x ** 3)
    th = np.tanh(u)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x ** 2)


def _ffn_forward(x, p, prefix, cfg, counter=None):
    b, t, d = x.shape
    h1 = x @ p[prefix + "ffn_w1"] + p[prefix + "ffn_b1"]
    a = gelu(h1)
    out = a @ p[prefix + "ffn_w2"] + p[prefix + "ffn_b2"]
    if counter is not None:
        counter.add(b * t * d * cfg.ffn_dim)
        counter.add(b * t * cfg.ffn_dim * d)
    return out, (x, h1, a)


def _ffn_backward(dout, cache, p, prefix):
    x, h1, a = cache
    b, t, d = x.shape
    grads = {}
    a2 = a.reshape(b * t, -1)
    dout2 = dout.reshape(b * t, d)
    grads[prefix + "ffn_w2"] = a2.T @ dout2
    grads[prefix + "ffn_b2"] = dout2.sum(axis=0)
    da = dout @ p[prefix + "ffn_w2"].T
    dh1 = da * _gelu_grad(h1)
    dh12 = dh1.reshape(b * t, -1)
    grads[prefix + "ffn_w1"] = x.reshape(b * t, d).T @ dh12
    grads[prefix + "ffn_b1"] = dh12.sum(axis=0)
    dx = (dh12 @ p[prefix + "ffn_w1"].T).reshape(b, t, d)
    return dx, grads


def _encoder_layer_forward(x, p, i, cfg, counter=None):
    prefix = f"layers.{i}."
    n1, ln1_cache = _layer_norm_forward(x, p[prefix + "ln1_g"], p[prefix + "ln1_b"])
    attn_out, attn_cache, attn = _attention_forward(n1, p, prefix, cfg, counter)
    h = x + attn_out
    n2, ln2_cache = _layer_norm_forward(h, p[prefix + "ln2_g"], p[prefix + "ln2_b"])
    ffn_out, ffn_cache = _ffn_forward(n2, p, prefix, cfg, counter)
    out = h + ffn_out
    return out, (ln1_cache, attn_cache, ln2_cache, ffn_cache, prefix), attn


def _encoder_layer_backward(dout, cache, p, cfg):
    ln1_cache, attn_cache, ln2_cache, ffn_cache, prefix = cache
    grads = {}
    dn2, ffn_grads = _ffn_backward(dout, ffn_cache, p, prefix)
    grads.update(ffn_grads)
    dh_ln, dg2, db2 = _layer_norm_backward(dn2, ln2_cache)
    grads[prefix + "ln2_g"] = dg2
    grads[prefix + "ln2_b"] = db2
    dh = dout + dh_ln
    dn1, attn_grads = _attention_backward(dh, attn_cache, p, prefix, cfg)
    grads.update(attn_grads)
    dx_ln, dg1, db1 = _layer_norm_backward(dn1, ln1_cache)
    grads[prefix + "ln1_g"] = dg1
    grads[prefix + "ln1_b"] = db1
    dx = dh + dx_ln
    return dx, grads


def encoder_layer(z: np.ndarray, params: dict[str, np.ndarray], layer: int,
                  cfg: ModelConfig, return_attention: bool = False):
    """One pre-norm encoder block applied to a (T, D) or (B, T, D) sequence."""
    x = np.asarray(z, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    out, _, attn = _encoder_layer_forward(x, params, layer, cfg)
    if single:
        out, attn = out[0], attn[0]
    return (out, attn) if return_attention else out


# ---------------------------------------------------------------------------
# Full model


def forward_pass(x_batch: np.ndarray, params: dict[str, np.ndarray], cfg: ModelConfig,
                 counter: MacCounter | None = None, want_cache: bool = True):
    """Embed, run the encoder stack, pool, and apply the head.

    Returns (outputs, cache); outputs are logits for classification and raw
    values for regression.
    """
    x = np.asarray(x_batch, dtype=np.float64)
    b, t, f = x.shape
    if t > cfg.max_t:
        raise SequenceTooLong(f"sequence length {t} exceeds max_t {cfg.max_t}")
    if f != cfg.token_dim:
        raise ValueError(f"token width {f} != configured {cfg.token_dim}")
    e = x @ params["proj_w"] + params["proj_b"] + params["pos"][:t]
    if counter is not None:
        counter.add(b * t * f * cfg.embed_dim)
    z = e
    layer_caches = []
    for i in range(cfg.depth):
        z, cache, _ = _encoder_layer_forward(z, params, i, cfg, counter)
        layer_caches.append(cache)
    pooled = z.mean(axis=1)
    if counter is not None:
        counter.add(b * t * cfg.embed_dim)   # average pooling accumulation
    out = pooled @ params["head_w"] + params["head_b"]
    if counter is not None:
        counter.add(b * cfg.embed_dim * cfg.out_dim)
    cache = (x, t, layer_caches, pooled) if want_cache else None
    return out, cache


def backward_pass(dout: np.ndarray, cache, params: dict[str, np.ndarray],
                  cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Gradients of every parameter given d(loss)/d(head output)."""
    x, t, layer_caches, pooled = cache
    b = x.shape[0]
    grads = {}
    grads["head_w"] = pooled.T @ dout
    grads["head_b"] = dout.sum(axis=0)
    dpooled = dout @ params["head_w"].T
    dz = np.repeat(dpooled[:, None, :], t, axis=1) / t
    for i in range(cfg.depth - 1, -1, -1):
        dz, layer_grads = _encoder_layer_backward(dz, layer_caches[i], params, cfg)
        grads.update(layer_grads)
    de2 = dz.reshape(b * t, cfg.embed_dim)
    grads["proj_w"] = x.reshape(b * t, cfg.token_dim).T @ de2
    grads["proj_b"] = de2.sum(axis=0)
    dpos = np.zeros_like(params["pos"])
    dpos[:t] = dz.sum(axis=0)
    grads["pos"] = dpos
    return grads


def backbone_forward(tensor: CanonicalTensor | np.ndarray, params: dict[str, np.ndarray],
                     cfg: ModelConfig) -> np.ndarray:
    """Task-agnostic latent for one canonical sample: mean encoder output over time."""
    x = tokenize(tensor)[None]
    b, t, f = x.shape
    if t > cfg.max_t:
        raise SequenceTooLong(f"sequence length {t} exceeds max_t {cfg.max_t}")
    e = x @ params["proj_w"] + params["proj_b"] + params["pos"][:t]
    z = e
    for i in range(cfg.depth):
        z, _, _ = _encoder_layer_forward(z, params, i, cfg)
    return z.mean(axis=1)[0]


def head_forward(z: np.ndarray, params: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """Class probabilities (softmax) or raw regression outputs for a latent."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    logits = z @ params["head_w"] + params["head_b"]
    out = _softmax(logits) if cfg.task == "classification" else logits
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Losses


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-probability of the target class; returns (loss, dlogits)."""
    b = logits.shape[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    logp = shifted - lse
    loss = -np.mean(logp[np.arange(b), labels])
    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    return float(loss), dlogits / b


def mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over every element; returns (loss, dpred)."""
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def loss_value(pred: np.ndarray, target: np.ndarray, task: str) -> float:
    if task == "classification":
        return cross_entropy(pred, target)[0]
    return mse(pred, target)[0]


def loss_and_grads(x_batch: np.ndarray, targets: np.ndarray,
                   params: dict[str, np.ndarray], cfg: ModelConfig):
    """Forward, loss, and full backward in one call; returns (loss, grads)."""
    out, cache = forward_pass(x_batch, params, cfg)
    if cfg.task == "classification":
        loss, dout = cross_entropy(out, targets)
    else:
        loss, dout = mse(out, np.asarray(targets, dtype=np.float64))
    grads = backward_pass(dout, cache, params, cfg)
    return loss, grads


# ---------------------------------------------------------------------------
# Analytic cost accounting


def affine_flops(t: int, d_in: int, d_out: int) -> int:
    """FLOPs of one affine map applied to t rows, one multiply-add = 2 FLOPs."""
    return 2 * t * d_in * d_out


def flops_estimate(cfg: ModelConfig, t: int, itemized: bool = False):
    """Analytic per-sample forward cost; exactly matches the MacCounter totals."""
    d, ffn = cfg.embed_dim, cfg.ffn_dim
    embed_macs = t * cfg.token_dim * d
    per_layer = 3 * t * d * d + 2 * t * t * d + t * d * d + 2 * t * d * ffn
    layers_macs = cfg.depth * per_layer
    pool_macs = t * d
    head_macs = d * cfg.out_dim
    total = 2 * (embed_macs + layers_macs + pool_macs + head_macs)
    if not itemized:
        return total
    return {
        "embed": 2 * embed_macs,
        "layers": 2 * layers_macs,
        "pool": 2 * pool_macs,
        "head": 2 * head_macs,
        "total": total,
    }
