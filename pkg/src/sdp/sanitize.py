"""Deterministic phase sanitization of raw CSI frames.

Two modes:

* ``slope_intercept`` fits the unwrapped per-pair phase against subcarrier
  offset with ordinary least squares and removes both the fitted slope (the
  sampling-time-offset tilt) and the intercept (the frame-common phase from
  CFO accumulation and the PLL offset). Magnitudes are untouched.
* ``conjugate_reference`` multiplies every antenna pair by the conjugate of a
  reference pair, cancelling oscillator phase shared across pairs while
  keeping relative motion phase; this is what the Doppler spectrogram uses.

Both are pure and deterministic; frames can be processed in parallel and
reassembled in order without changing the numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .csimodel import DeviceProfile, RawCsiFrame, RawCsiStream

DEFAULT_MAGNITUDE_FLOOR = 1e-12


class ZeroMagnitudeSubcarrier(ValueError):
    """A subcarrier magnitude sits below the floor; its phase is undefined."""


@dataclass(frozen=True)
class PhaseFit:
    """OLS line through unwrapped phase vs. subcarrier offset."""

    slope_rad_per_hz: float
    intercept_rad: float   # phase at offset 0
    residual_rms_rad: float


@dataclass(frozen=True)
class SanitizeConfig:
    mode: str = "slope_intercept"   # or "conjugate_reference"
    reference_antenna: int = 0      # flattened pair index, conjugate_reference only
    magnitude_floor: float = DEFAULT_MAGNITUDE_FLOOR

    def __post_init__(self):
        if self.mode not in ("slope_intercept", "conjugate_reference"):
            raise ValueError(f"unknown sanitize mode {self.mode!r}")
        if self.reference_antenna < 0:
            raise ValueError("reference_antenna must be >= 0")


def unwrap_phase(phases: np.ndarray) -> np.ndarray:
    """Unwrap so successive differences land in (-pi, pi].

    Output starts at the input's first element and equals the input modulo
    2*pi elementwise.
    """
    p = np.asarray(phases, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("phases must be a nonempty 1-d vector")
    if p.size == 1:
        return p.copy()
    d = np.diff(p)
    # shift each difference by the unique 2*pi multiple putting it in (-pi, pi]
    adjusted = d - 2 * math.pi * np.ceil((d - math.pi) / (2 * math.pi))
    out = np.empty_like(p)
    out[0] = p[0]
    out[1:] = p[0] + np.cumsum(adjusted)
    return out


def _unwrap_rows(phases: np.ndarray) -> np.ndarray:
    d = np.diff(phases, axis=-1)
    adjusted = d - 2 * math.pi * np.ceil((d - math.pi) / (2 * math.pi))
    out = np.empty_like(phases)
    out[..., 0] = phases[..., 0]
    out[..., 1:] = phases[..., :1] + np.cumsum(adjusted, axis=-1)
    return out


def _fit_rows(phases: np.ndarray, offsets_hz: np.ndarray):
    """Row-wise OLS of phase against offset; returns (slope, intercept, residual)."""
    f = np.asarray(offsets_hz, dtype=np.float64)
    f_mean = f.mean()
    fc = f - f_mean
    denom = np.dot(fc, fc)
    p_mean = phases.mean(axis=-1)
    slope = (phases - p_mean[..., None]) @ fc / denom
    intercept = p_mean - slope * f_mean
    residual = phases - (slope[..., None] * f + intercept[..., None])
    return slope, intercept, residual


def fit_linear_phase(frame_values: np.ndarray, subcarrier_offsets_hz: np.ndarray,
                     magnitude_floor: float = DEFAULT_MAGNITUDE_FLOOR) -> PhaseFit:
    """Least-squares line through the unwrapped phase of one subcarrier vector."""
    values = np.asarray(frame_values, dtype=np.complex128)
    offsets = np.asarray(subcarrier_offsets_hz, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise ValueError("need at least 2 subcarriers")
    if values.size != offsets.size:
        raise ValueError("values and offsets must have the same length")
    low = np.abs(values) < magnitude_floor
    if np.any(low):
        k = int(np.argmax(low))
        raise ZeroMagnitudeSubcarrier(
            f"|value| < {magnitude_floor:g} at subcarrier {k}; phase undefined")
    phases = unwrap_phase(np.angle(values))
    slope, intercept, residual = _fit_rows(phases[None, :], offsets)
    rms = float(np.sqrt(np.mean(residual[0] ** 2)))
    return PhaseFit(slope_rad_per_hz=float(slope[0]), intercept_rad=float(intercept[0]),
                    residual_rms_rad=rms)


def sanitize_frame(frame: RawCsiFrame, profile: DeviceProfile,
                   cfg: SanitizeConfig = SanitizeConfig()) -> RawCsiFrame:
    """Remove hardware phase distortion from one frame (see module docstring)."""
    values = np.asarray(frame.values, dtype=np.complex128)
    expected = (profile.n_rx, profile.n_tx, profile.k_raw)
    if values.shape != expected:
        raise ValueError(f"frame shape {values.shape} does not match profile {expected}")
    flat = values.reshape(profile.n_pairs, profile.k_raw)
    out = _sanitize_pairs(flat, profile, cfg)
    return RawCsiFrame(timestamp_s=frame.timestamp_s, values=out.reshape(expected))


def _sanitize_pairs(flat: np.ndarray, profile: DeviceProfile, cfg: SanitizeConfig) -> np.ndarray:
    if cfg.mode == "conjugate_reference":
        if cfg.reference_antenna >= flat.shape[0]:
            raise ValueError(f"reference_antenna {cfg.reference_antenna} out of range "
                             f"for {flat.shape[0]} pairs")
        ref = flat[cfg.reference_antenna]
        return flat * np.conj(ref)[None, :]
    low = np.abs(flat) < cfg.magnitude_floor
    if np.any(low):
        pair, k = np.argwhere(low)[0]
        raise ZeroMagnitudeSubcarrier(
            f"|value| < {cfg.magnitude_floor:g} at pair {pair}, subcarrier {k}; "
            f"phase undefined")
    f = profile.subcarrier_offsets_hz
    phases = _unwrap_rows(np.angle(flat))
    slope, intercept, _ = _fit_rows(phases, f)
    correction = slope[:, None] * f[None, :] + intercept[:, None]
    return flat * np.exp(-1j * correction)


def sanitize_stream(stream: RawCsiStream,
                    cfg: SanitizeConfig = SanitizeConfig()) -> RawCsiStream:
    """Per-frame sanitization; timestamps and provenance are preserved."""
    frames = [sanitize_frame(fr, stream.profile, cfg) for fr in stream.frames]
    return RawCsiStream(profile=stream.profile, frames=frames, provenance=stream.provenance)
