"""Projection of sanitized frames onto the canonical grid and tensor assembly.

Raw subcarrier offsets are mapped affinely onto [-1, +1] by the min/max of the
occupied band; the canonical grid is k points uniform on [-1, +1]. Values are
interpolated piecewise-linearly in the real and imaginary parts independently,
which keeps the projection linear in the data and exact at the band edges.
Frames are then segmented into fixed-length windows and stacked into the
device-agnostic sample of shape (antenna pairs) x (canonical subcarriers) x
(window length), pairs flattened rx-major then tx.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .csimodel import DeviceProfile, RawCsiFrame, RawCsiStream
from .sanitize import SanitizeConfig, sanitize_stream

DEFAULT_K = 30
DEFAULT_WINDOW_T = 500


class DegenerateBand(ValueError):
    """All raw offsets coincide; no band to normalize."""


class SampleRateMismatch(ValueError):
    """Streams with different sample rates are not comparable on the time axis."""


@dataclass(frozen=True)
class CanonicalGridSpec:
    k: int = DEFAULT_K

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("canonical grid needs k >= 2")

    @property
    def positions(self) -> np.ndarray:
        """k points uniform on [-1, +1], symmetric about 0."""
        return np.linspace(-1.0, 1.0, self.k)


@dataclass(frozen=True)
class WindowSpec:
    t: int = DEFAULT_WINDOW_T
    hop: int | None = None        # defaults to t (non-overlapping)
    pad_policy: str = "drop_tail"

    def __post_init__(self):
        hop = self.t if self.hop is None else self.hop
        object.__setattr__(self, "hop", hop)
        if self.t < 1:
            raise ValueError("window length must be >= 1")
        if not (1 <= hop <= self.t):
            raise ValueError("hop must satisfy 1 <= hop <= t")
        if self.pad_policy != "drop_tail":
            raise ValueError(f"unknown pad policy {self.pad_policy!r}")


@dataclass
class CanonicalTensor:
    """Device-agnostic sample: values[a][k][t], a = rx * n_tx + tx."""

    values: np.ndarray            # complex128 (A, K, T)
    label: int | float | None = None
    subject: int | None = None
    window_start_s: float = 0.0
    source: str = ""

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def normalized_band_positions(raw_offsets_hz: np.ndarray) -> np.ndarray:
    """Map offsets onto [-1, +1] by the occupied band's min/max."""
    f = np.asarray(raw_offsets_hz, dtype=np.float64)
    lo, hi = f[0], f[-1]
    if hi == lo:
        raise DegenerateBand("max offset equals min offset")
    return 2.0 * (f - lo) / (hi - lo) - 1.0


def _interp_weights(raw_offsets_hz: np.ndarray, grid: CanonicalGridSpec):
    """Precomputed segment indices and blend weights for the canonical points."""
    x = normalized_band_positions(raw_offsets_hz)
    xi = grid.positions
    # rightmost raw point <= xi, clipped so xi = +1 uses the last segment
    idx = np.clip(np.searchsorted(x, xi, side="right") - 1, 0, x.size - 2)
    u = (xi - x[idx]) / (x[idx + 1] - x[idx])
    return idx, u


def project_frequency(h_raw: np.ndarray, raw_offsets_hz: np.ndarray,
                      grid: CanonicalGridSpec = CanonicalGridSpec()) -> np.ndarray:
    """Interpolate one raw subcarrier vector onto the canonical grid."""
    values = np.asarray(h_raw, dtype=np.complex128)
    offsets = np.asarray(raw_offsets_hz, dtype=np.float64)
    if values.shape[-1] != offsets.size:
        raise ValueError("values and offsets must have the same length")
    if offsets.size < 2:
        raise ValueError("need at least 2 raw offsets")
    if offsets[-1] == offsets[0]:
        raise DegenerateBand("max offset equals min offset")
    if not np.all(np.diff(offsets) > 0):
        raise ValueError("raw offsets must be strictly increasing")
    idx, u = _interp_weights(offsets, grid)
    return values[..., idx] * (1.0 - u) + values[..., idx + 1] * u


def linear_interp_error_bound(max_abs_second_derivative: float,
                              raw_offsets_hz: np.ndarray) -> float:
    """Worst-case piecewise-linear interpolation error: max|h''| * spacing^2 / 8."""
    spacing = np.max(np.diff(np.asarray(raw_offsets_hz, dtype=np.float64)))
    return float(max_abs_second_derivative * spacing ** 2 / 8.0)


@dataclass
class FrameWindow:
    start_index: int
    start_time_s: float
    frames: list[RawCsiFrame]


def window_count(n_frames: int, spec: WindowSpec) -> int:
    if n_frames < spec.t:
        return 0
    return (n_frames - spec.t) // spec.hop + 1


def window_stream(stream: RawCsiStream, spec: WindowSpec) -> list[FrameWindow]:
    """Fixed-length windows at the configured hop; the tail is dropped."""
    n = len(stream.frames)
    windows = []
    for w in range(window_count(n, spec)):
        start = w * spec.hop
        frames = stream.frames[start:start + spec.t]
        windows.append(FrameWindow(start_index=start,
                                   start_time_s=frames[0].timestamp_s,
                                   frames=frames))
    return windows


def assert_same_sample_rate(a: DeviceProfile, b: DeviceProfile) -> None:
    if a.sample_rate_hz != b.sample_rate_hz:
        raise SampleRateMismatch(
            f"sample rates differ ({a.sample_rate_hz} Hz vs {b.sample_rate_hz} Hz); "
            f"streams are not comparable on the time axis")


def canonicalize(stream: RawCsiStream,
                 sanitize_cfg: SanitizeConfig | None = SanitizeConfig(),
                 grid: CanonicalGridSpec = CanonicalGridSpec(),
                 window_spec: WindowSpec = WindowSpec(),
                 label: int | float | None = None,
                 subject: int | None = None) -> list[CanonicalTensor]:
    """sanitize -> project -> window -> stack; pass sanitize_cfg=None to skip stage I.

    Emits one tensor per window, in window-start order, with label/subject
    copied onto every tensor. Deterministic end to end.
    """
    profile = stream.profile
    work = sanitize_stream(stream, sanitize_cfg) if sanitize_cfg is not None else stream
    n = len(work.frames)
    if n == 0:
        return []
    # (N, A, k_raw) then one vectorized projection for the whole stream
    flat = work.values_array().reshape(n, profile.n_pairs, profile.k_raw)
    idx, u = _interp_weights(profile.subcarrier_offsets_hz, grid)
    projected = flat[..., idx] * (1.0 - u) + flat[..., idx + 1] * u  # (N, A, K)
    san_tag = sanitize_cfg.mode if sanitize_cfg is not None else "none"
    base_tag = (f"{stream.provenance}|san={san_tag}|grid=norm{grid.k}"
                f"|T={window_spec.t}|hop={window_spec.hop}")
    timestamps = work.timestamps()
    tensors = []
    for w in range(window_count(n, window_spec)):
        start = w * window_spec.hop
        block = projected[start:start + window_spec.t]          # (T, A, K)
        values = np.ascontiguousarray(block.transpose(1, 2, 0))  # (A, K, T)
        tensors.append(CanonicalTensor(values=values, label=label, subject=subject,
                                       window_start_s=float(timestamps[start]),
                                       source=f"{base_tag}|w{w}"))
    return tensors
