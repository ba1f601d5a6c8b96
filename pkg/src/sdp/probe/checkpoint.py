"""Checkpoint and training-log persistence.

Checkpoint layout, integers little-endian:
    magic `SDPW` | version u16 (=1) | depth u16 | embed_dim u16 | heads u16 |
    ffn_dim u16 | token_dim u32 | max_t u32 | out_dim u32 | task u8
    (0 classification, 1 regression) | raw f32 parameter payload, arrays in
    param_layout order, each C-contiguous.

Training log: tab-separated text, header `epoch\tlr\ttrain_loss\tval_metric`,
floats written with repr so files are byte-stable across runs.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..traceio import BadMagic, TruncatedFile, UnsupportedVersion
from .model import ModelConfig, param_layout

CHECKPOINT_MAGIC = b"SDPW"
CHECKPOINT_VERSION = 1
_TASK_CODES = {"classification": 0, "regression": 1}
_TASK_NAMES = {v: k for k, v in _TASK_CODES.items()}
TRAIN_LOG_HEADER = "epoch\tlr\ttrain_loss\tval_metric"


def checkpoint_bytes(cfg: ModelConfig, params: dict[str, np.ndarray]) -> bytes:
    header = CHECKPOINT_MAGIC + struct.pack(
        "<HHHHHIIIB", CHECKPOINT_VERSION, cfg.depth, cfg.embed_dim, cfg.heads,
        cfg.ffn_dim, cfg.token_dim, cfg.max_t, cfg.out_dim, _TASK_CODES[cfg.task])
    chunks = [header]
    for name, shape in param_layout(cfg):
        arr = params[name]
        if arr.shape != shape:
            raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(cfg, params))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    data = Path(path).read_bytes() if isinstance(path, (str, Path)) else bytes(path)
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, found {data[:4]!r}", 0)
    head_fmt = "<HHHHHIIIB"
    head_size = struct.calcsize(head_fmt)
    if len(data) < 4 + head_size:
        raise TruncatedFile("file ends inside checkpoint header", len(data))
    version, depth, embed, heads, ffn, token, max_t, out, task = struct.unpack(
        head_fmt, data[4:4 + head_size])
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version} not supported", 4)
    cfg = ModelConfig(depth=depth, embed_dim=embed, heads=heads, ffn_dim=ffn,
                      token_dim=token, max_t=max_t, out_dim=out, task=_TASK_NAMES[task])
    pos = 4 + head_size
    params: dict[str, np.ndarray] = {}
    for name, shape in param_layout(cfg):
        n = int(np.prod(shape))
        end = pos + 4 * n
        if end > len(data):
            raise TruncatedFile(f"file ends inside parameter {name}", pos)
        params[name] = np.frombuffer(data[pos:end], dtype="<f4").astype(np.float64).reshape(shape)
        pos = end
    return cfg, params


def write_train_log(path, rows: list[tuple[int, float, float, float]]) -> None:
    lines = [TRAIN_LOG_HEADER]
    for epoch, lr, train_loss, val_metric in rows:
        lines.append(f"{epoch}\t{lr!r}\t{train_loss!r}\t{val_metric!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_train_log(path) -> list[tuple[int, float, float, float]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != TRAIN_LOG_HEADER:
        raise ValueError(f"training log must start with {TRAIN_LOG_HEADER!r}")
    rows = []
    for line in lines[1:]:
        e, lr, tl, vm = line.split("\t")
        rows.append((int(e), float(lr), float(tl), float(vm)))
    return rows
