"""Forward simulator for OFDM channel soundings with hardware impairments.

Produces per-subcarrier complex frequency responses for a multipath scene,
then distorts them the way commodity frontends do: a per-frame sampling-time
offset that tilts the phase linearly across subcarriers, a carrier-frequency
offset that rotates the whole frame over time, a constant PLL phase, and
circularly-symmetric complex Gaussian noise. Everything is a pure function of
its inputs plus an explicit seed, so repeated calls are bit-identical.

Subcarrier frequencies are offsets relative to the carrier; the static phase
contributed by the carrier itself is absorbed into the path amplitudes.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True, eq=False)
class DeviceProfile:
    """Frequency grid and antenna geometry of one capture frontend."""

    carrier_hz: float
    subcarrier_offsets_hz: np.ndarray  # (k_raw,) Hz relative to carrier, strictly increasing
    n_tx: int
    n_rx: int
    sample_rate_hz: float

    def __eq__(self, other):
        if not isinstance(other, DeviceProfile):
            return NotImplemented
        return (self.carrier_hz == other.carrier_hz
                and self.n_tx == other.n_tx and self.n_rx == other.n_rx
                and self.sample_rate_hz == other.sample_rate_hz
                and np.array_equal(self.subcarrier_offsets_hz, other.subcarrier_offsets_hz))

    def __post_init__(self):
        offsets = np.asarray(self.subcarrier_offsets_hz, dtype=np.float64)
        object.__setattr__(self, "subcarrier_offsets_hz", offsets)
        if offsets.ndim != 1 or offsets.size < 2:
            raise ValueError("need at least 2 subcarrier offsets")
        if not np.all(np.diff(offsets) > 0):
            raise ValueError("subcarrier offsets must be strictly increasing")
        if self.n_tx < 1 or self.n_rx < 1:
            raise ValueError("antenna counts must be >= 1")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")

    @property
    def k_raw(self) -> int:
        return int(self.subcarrier_offsets_hz.size)

    @property
    def n_pairs(self) -> int:
        return self.n_rx * self.n_tx

    def pair_index(self, rx: int, tx: int) -> int:
        """Flattened antenna-pair index, rx-major then tx."""
        return rx * self.n_tx + tx


@dataclass(frozen=True)
class PathParams:
    """One propagation path; parameters drift affinely in time."""

    amplitude: complex
    delay_s: float
    doppler_hz: float
    amplitude_drift: complex = 0.0  # per second
    delay_drift: float = 0.0        # seconds per second
    doppler_drift: float = 0.0      # Hz per second

    def __post_init__(self):
        if self.delay_s < 0:
            raise ValueError("path delay must be >= 0")
        if not math.isfinite(abs(complex(self.amplitude))):
            raise ValueError("path amplitude must be finite")


@dataclass(frozen=True)
class ImpairmentSet:
    """Per-stream hardware distortion parameters.

    sto_s is the mean sampling-time offset (plus packet-detection delay);
    when sto_jitter_s > 0 each frame draws its own offset from
    N(sto_s, sto_jitter_s). cfo_hz and pll_phase are per-stream constants.
    pll_phase enters the rotation as exp(-j*2*pi*pll_phase), matching the
    channel model's exponent. noise_std is the standard deviation of the
    complex noise sample (each quadrature gets noise_std/sqrt(2)).
    """

    sto_s: float = 0.0
    sto_jitter_s: float = 0.0
    cfo_hz: float = 0.0
    pll_phase: float = 0.0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.sto_jitter_s < 0:
            raise ValueError("sto_jitter_s must be >= 0")


@dataclass
class RawCsiFrame:
    """One timestamped measurement, values indexed [rx][tx][subcarrier]."""

    timestamp_s: float
    values: np.ndarray  # complex128 (n_rx, n_tx, k_raw)


@dataclass
class RawCsiStream:
    profile: DeviceProfile
    frames: list[RawCsiFrame]
    provenance: str = ""

    def validate(self) -> None:
        shape = (self.profile.n_rx, self.profile.n_tx, self.profile.k_raw)
        for i, fr in enumerate(self.frames):
            if fr.values.shape != shape:
                raise ValueError(f"frame {i} has shape {fr.values.shape}, expected {shape}")
        ts = self.timestamps()
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("frame timestamps must be strictly increasing")

    def timestamps(self) -> np.ndarray:
        return np.array([fr.timestamp_s for fr in self.frames], dtype=np.float64)

    def values_array(self) -> np.ndarray:
        """Stacked frame values, shape (n_frames, n_rx, n_tx, k_raw)."""
        if not self.frames:
            shape = (0, self.profile.n_rx, self.profile.n_tx, self.profile.k_raw)
            return np.zeros(shape, dtype=np.complex128)
        return np.stack([fr.values for fr in self.frames])


PathsLike = Sequence[PathParams] | Mapping[int, Sequence[PathParams]]


def _paths_for_pair(paths: PathsLike, pair: int) -> Sequence[PathParams]:
    if isinstance(paths, Mapping):
        return paths.get(pair, ())
    return paths


def synth_channel(paths: Sequence[PathParams], profile: DeviceProfile, t: float) -> np.ndarray:
    """Noiseless physical response at time t for every subcarrier of the profile.

    Sums alpha_l(t) * exp(-j*2*pi*f_k*tau_l(t)) * exp(+j*2*pi*nu_l(t)*t) over
    paths, with f_k the subcarrier offsets.
    """
    if len(paths) == 0:
        raise ValueError("paths must be nonempty")
    if t < 0:
        raise ValueError("t must be >= 0")
    f = profile.subcarrier_offsets_hz
    h = np.zeros(profile.k_raw, dtype=np.complex128)
    for p in paths:
        amp = complex(p.amplitude) + complex(p.amplitude_drift) * t
        tau = p.delay_s + p.delay_drift * t
        nu = p.doppler_hz + p.doppler_drift * t
        h += amp * np.exp(-1j * TWO_PI * f * tau) * np.exp(1j * TWO_PI * nu * t)
    return h


def impairment_phase(impairments: ImpairmentSet, profile: DeviceProfile, t: float,
                     sto_s: float | None = None) -> np.ndarray:
    """Phase of the multiplicative distortion, -2*pi*(f_k*sto + cfo*t + pll), per subcarrier."""
    sto = impairments.sto_s if sto_s is None else sto_s
    f = profile.subcarrier_offsets_hz
    return -TWO_PI * (f * sto + impairments.cfo_hz * t + impairments.pll_phase)


def apply_impairments(h_phys: np.ndarray, impairments: ImpairmentSet,
                      profile: DeviceProfile, t: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Rotate by the hardware phase distortion and add seeded complex noise."""
    h_phys = np.asarray(h_phys, dtype=np.complex128)
    if h_phys.shape[-1] != profile.k_raw:
        raise ValueError(f"expected {profile.k_raw} subcarriers, got {h_phys.shape[-1]}")
    out = h_phys * np.exp(1j * impairment_phase(impairments, profile, t))
    if impairments.noise_std > 0:
        scale = impairments.noise_std / math.sqrt(2.0)
        noise = rng.standard_normal(h_phys.shape) + 1j * rng.standard_normal(h_phys.shape)
        out = out + scale * noise
    return out


def _frame_count(duration_s: float, sample_rate_hz: float) -> int:
    # floor() of the real-valued product; the epsilon undoes binary-float
    # artifacts like 0.29*100 == 28.999999999999996.
    return int(math.floor(duration_s * sample_rate_hz + 1e-9))


def generate_stream(paths: PathsLike, profile: DeviceProfile,
                    impairments: ImpairmentSet | Sequence[ImpairmentSet],
                    duration_s: float, seed: int,
                    provenance: str = "") -> RawCsiStream:
    """Simulate floor(duration * sample_rate) frames at the profile's rate.

    `paths` is either one path list shared by every antenna pair or a mapping
    from flattened pair index (rx-major) to that pair's paths. `impairments`
    is likewise shared or a per-pair sequence. Per frame, the sampling-time
    offset is drawn first (when jittered), then the noise for the whole frame;
    this draw order is part of the determinism contract.
    """
    if not duration_s > 0:
        raise ValueError("duration_s must be positive")
    per_pair_imp = _impairments_per_pair(impairments, profile)
    rng = np.random.default_rng(seed)
    n_frames = _frame_count(duration_s, profile.sample_rate_hz)
    frames = []
    for i in range(n_frames):
        t = i / profile.sample_rate_hz
        frames.append(_simulate_frame(paths, profile, per_pair_imp, t, rng))
    return RawCsiStream(profile=profile, frames=frames, provenance=provenance)


def make_event_stream(background: PathsLike, event: PathsLike, profile: DeviceProfile,
                      impairments: ImpairmentSet | Sequence[ImpairmentSet],
                      duration_s: float, event_start_s: float, event_duration_s: float,
                      seed: int, provenance: str = "") -> RawCsiStream:
    """Continuous stream where the event paths are active only in a time window.

    Outside [event_start, event_start + event_duration) only the background
    paths contribute; inside, both sets do. Noise and offset draws share one
    generator across the whole stream, so the event gate does not perturb the
    background samples.
    """
    if not duration_s > 0:
        raise ValueError("duration_s must be positive")
    per_pair_imp = _impairments_per_pair(impairments, profile)
    rng = np.random.default_rng(seed)
    n_frames = _frame_count(duration_s, profile.sample_rate_hz)
    t_end = event_start_s + event_duration_s
    frames = []
    for i in range(n_frames):
        t = i / profile.sample_rate_hz
        if event_start_s <= t < t_end:
            paths = _merge_paths(background, event, profile)
        else:
            paths = background
        frames.append(_simulate_frame(paths, profile, per_pair_imp, t, rng))
    return RawCsiStream(profile=profile, frames=frames, provenance=provenance)


def _merge_paths(a: PathsLike, b: PathsLike, profile: DeviceProfile) -> PathsLike:
    if not isinstance(a, Mapping) and not isinstance(b, Mapping):
        return list(a) + list(b)
    merged = {}
    for pair in range(profile.n_pairs):
        merged[pair] = list(_paths_for_pair(a, pair)) + list(_paths_for_pair(b, pair))
    return merged


def _impairments_per_pair(impairments, profile: DeviceProfile) -> list[ImpairmentSet]:
    if isinstance(impairments, ImpairmentSet):
        return [impairments] * profile.n_pairs
    per_pair = list(impairments)
    if len(per_pair) != profile.n_pairs:
        raise ValueError(f"need {profile.n_pairs} impairment sets, got {len(per_pair)}")
    return per_pair


def _simulate_frame(paths: PathsLike, profile: DeviceProfile,
                    per_pair_imp: list[ImpairmentSet], t: float,
                    rng: np.random.Generator) -> RawCsiFrame:
    values = np.zeros((profile.n_rx, profile.n_tx, profile.k_raw), dtype=np.complex128)
    # Draw order per frame: one sto sample per distinct jittering impairment
    # set (first-occurrence pair order), then one noise block for the frame.
    # Pairs sharing an ImpairmentSet share the draw, so shared offsets cancel
    # exactly under conjugate referencing.
    sto_by_id: dict[int, float] = {}
    stos = []
    for imp in per_pair_imp:
        if id(imp) not in sto_by_id:
            if imp.sto_jitter_s > 0:
                sto_by_id[id(imp)] = imp.sto_s + imp.sto_jitter_s * rng.standard_normal()
            else:
                sto_by_id[id(imp)] = imp.sto_s
        stos.append(sto_by_id[id(imp)])
    for rx in range(profile.n_rx):
        for tx in range(profile.n_tx):
            pair = profile.pair_index(rx, tx)
            imp = per_pair_imp[pair]
            pair_paths = _paths_for_pair(paths, pair)
            if len(pair_paths) == 0:
                h = np.zeros(profile.k_raw, dtype=np.complex128)
            else:
                h = synth_channel(pair_paths, profile, t)
            phase = impairment_phase(imp, profile, t, sto_s=stos[pair])
            values[rx, tx] = h * np.exp(1j * phase)
    noise_std = per_pair_imp[0].noise_std
    mixed = len({imp.noise_std for imp in per_pair_imp}) > 1
    if mixed:
        for rx in range(profile.n_rx):
            for tx in range(profile.n_tx):
                imp = per_pair_imp[profile.pair_index(rx, tx)]
                if imp.noise_std > 0:
                    scale = imp.noise_std / math.sqrt(2.0)
                    values[rx, tx] += scale * (rng.standard_normal(profile.k_raw)
                                               + 1j * rng.standard_normal(profile.k_raw))
    elif noise_std > 0:
        scale = noise_std / math.sqrt(2.0)
        noise = rng.standard_normal(values.shape) + 1j * rng.standard_normal(values.shape)
        values += scale * noise
    return RawCsiFrame(timestamp_s=t, values=values)


# ---------------------------------------------------------------------------
# Synthetic labeled tasks


class IdenticalClassSignatures(ValueError):
    """Two classes share the same path signature; the task would be unlearnable."""


@dataclass(frozen=True)
class ClassSignature:
    """Path-parameter family that defines one motion class."""

    name: str
    doppler_hz: float
    delay_s: float
    amplitude: complex = 0.7 + 0j

    def key(self):
        return (self.doppler_hz, self.delay_s, complex(self.amplitude))


@dataclass(frozen=True)
class TaskSpec:
    """Desk-scale stand-in for a labeled capture campaign.

    Each class is one moving-path signature riding on a shared static anchor
    path; each subject is a distinct amplitude/impairment regime drawn from
    the configured ranges.
    """

    classes: tuple[ClassSignature, ...]
    n_subjects: int
    n_trials: int
    profile: DeviceProfile
    duration_s: float
    static_path: PathParams = PathParams(amplitude=1.0 + 0j, delay_s=20e-9, doppler_hz=0.0)
    sto_range_s: tuple[float, float] = (20e-9, 120e-9)
    sto_jitter_s: float = 0.0
    cfo_range_hz: tuple[float, float] = (0.0, 0.0)
    pll_range: tuple[float, float] = (0.0, 0.0)
    noise_std: float = 0.0
    subject_gain_spread: float = 0.3   # subject gains span [1 - spread, 1]
    doppler_jitter_hz: float = 0.0     # per-trial wobble on the class Doppler
    environment: str = "synthetic"

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need >= 2 classes")
        if self.n_subjects < 2:
            raise ValueError("need >= 2 subjects")
        if self.n_trials < 1:
            raise ValueError("need >= 1 trial")
        keys = [c.key() for c in self.classes]
        if len(set(keys)) != len(keys):
            raise IdenticalClassSignatures("class signatures must be pairwise distinct")


def _subject_regime(spec: TaskSpec, seed: int, subject: int):
    """Deterministic per-subject gain and impairment base values."""
    rng = np.random.default_rng([seed, 7001, subject])
    gain = 1.0 - spec.subject_gain_spread * rng.uniform()
    sto = rng.uniform(*spec.sto_range_s)
    cfo = rng.uniform(*spec.cfo_range_hz)
    pll = rng.uniform(*spec.pll_range)
    return gain, ImpairmentSet(sto_s=sto, sto_jitter_s=spec.sto_jitter_s,
                               cfo_hz=cfo, pll_phase=pll, noise_std=spec.noise_std)


def make_synthetic_task(spec: TaskSpec, seed: int):
    """Generate balanced labeled streams plus their dataset manifest.

    Returns (streams, manifest); streams[i] corresponds to manifest.entries[i].
    The ordering (class-major, then subject, then trial) and every random draw
    derive from the seed, so reruns are bit-identical.
    """
    from .traceio import DatasetManifest, ManifestEntry  # avoid import cycle at module load

    streams: list[RawCsiStream] = []
    entries: list[ManifestEntry] = []
    for ci, cls in enumerate(spec.classes):
        for s in range(spec.n_subjects):
            gain, base_imp = _subject_regime(spec, seed, s)
            for r in range(spec.n_trials):
                trial_rng = np.random.default_rng([seed, ci, s, r])
                nu = cls.doppler_hz
                if spec.doppler_jitter_hz > 0:
                    nu = nu + spec.doppler_jitter_hz * trial_rng.uniform(-1.0, 1.0)
                moving = PathParams(amplitude=complex(cls.amplitude) * gain,
                                    delay_s=cls.delay_s, doppler_hz=nu)
                static = replace(spec.static_path,
                                 amplitude=complex(spec.static_path.amplitude) * gain)
                stream_seed = int(trial_rng.integers(0, 2**63 - 1))
                tag = f"task:{cls.name}/subj{s}/trial{r}"
                stream = generate_stream([static, moving], spec.profile, base_imp,
                                         spec.duration_s, stream_seed, provenance=tag)
                streams.append(stream)
                safe = re.sub(r"[^A-Za-z0-9_-]", "-", cls.name)
                entries.append(ManifestEntry(
                    path=f"{safe}_s{s}_t{r:02d}.sdpr",
                    label_id=ci, label_name=cls.name, subject=s,
                    env=spec.environment, split="unassigned"))
    manifest = DatasetManifest(entries=entries, task_kind="classification")
    manifest.validate()
    return streams, manifest


# ---------------------------------------------------------------------------
# Scene / task configuration files (documented key-value text)
#
# Lines are `key = value`; `#` starts a comment. Scene keys:
#   carrier_hz, subcarriers, n_tx, n_rx, sample_rate_hz, sto_s, sto_jitter_s,
#   cfo_hz, pll_rad, noise_std, duration_s, seed, and one `path = ...` line
#   per propagation path with space-separated fields
#   amp=<complex> delay_s=<s> doppler_hz=<Hz> [pair=<idx>]
#   [amp_drift=<per s>] [delay_drift=<s/s>] [doppler_drift=<Hz/s>].
# `subcarriers` is either a comma list of Hz offsets or `lo:hi:count` for
# count evenly spaced offsets spanning [lo, hi].
#
# Task keys (for `sdp gen --task`):
#   classes (comma list of names), class_doppler_hz, class_delay_s
#   (comma lists, one entry per class), moving_amp, static_amp,
#   static_delay_s, subjects, trials, duration_s, sto_s (`lo:hi` range or
#   scalar), sto_jitter_s, cfo_hz (range or scalar), pll_rad (range or
#   scalar), noise_std, subject_gain_spread, doppler_jitter_hz, env,
#   plus the profile keys above.


@dataclass
class SceneConfig:
    profile: DeviceProfile
    paths: PathsLike
    impairments: ImpairmentSet
    duration_s: float
    seed: int | None


def _parse_kv_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _parse_subcarriers(value: str) -> np.ndarray:
    if ":" in value:
        lo, hi, count = value.split(":")
        return np.linspace(float(lo), float(hi), int(count))
    return np.array([float(v) for v in value.split(",")], dtype=np.float64)


def _parse_range(value: str) -> tuple[float, float]:
    if ":" in value:
        lo, hi = value.split(":")
        return float(lo), float(hi)
    v = float(value)
    return v, v


def _parse_path_line(value: str):
    fields = {}
    for token in value.split():
        if "=" not in token:
            raise ValueError(f"bad path field {token!r}")
        k, v = token.split("=", 1)
        fields[k] = v
    pair = fields.pop("pair", None)
    path = PathParams(
        amplitude=complex(fields.pop("amp", "1")),
        delay_s=float(fields.pop("delay_s", "0")),
        doppler_hz=float(fields.pop("doppler_hz", "0")),
        amplitude_drift=complex(fields.pop("amp_drift", "0")),
        delay_drift=float(fields.pop("delay_drift", "0")),
        doppler_drift=float(fields.pop("doppler_drift", "0")),
    )
    if fields:
        raise ValueError(f"unknown path fields: {sorted(fields)}")
    return path, (None if pair is None else int(pair))


def parse_scene_config(text: str) -> SceneConfig:
    """Parse a scene description; see the key list above."""
    values: dict[str, str] = {}
    path_lines: list[str] = []
    for key, value in _parse_kv_lines(text):
        if key == "path":
            path_lines.append(value)
        else:
            values[key] = value

    def need(key):
        if key not in values:
            raise ValueError(f"scene config missing required key {key!r}")
        return values[key]

    profile = DeviceProfile(
        carrier_hz=float(need("carrier_hz")),
        subcarrier_offsets_hz=_parse_subcarriers(need("subcarriers")),
        n_tx=int(values.get("n_tx", "1")),
        n_rx=int(values.get("n_rx", "1")),
        sample_rate_hz=float(need("sample_rate_hz")),
    )
    if not path_lines:
        raise ValueError("scene config needs at least one `path = ...` line")
    shared: list[PathParams] = []
    per_pair: dict[int, list[PathParams]] = {}
    for line in path_lines:
        path, pair = _parse_path_line(line)
        if pair is None:
            shared.append(path)
        else:
            per_pair.setdefault(pair, []).append(path)
    paths: PathsLike
    if per_pair:
        paths = {p: list(shared) + per_pair.get(p, []) for p in range(profile.n_pairs)}
    else:
        paths = shared
    impairments = ImpairmentSet(
        sto_s=float(values.get("sto_s", "0")),
        sto_jitter_s=float(values.get("sto_jitter_s", "0")),
        cfo_hz=float(values.get("cfo_hz", "0")),
        pll_phase=float(values.get("pll_rad", "0")),
        noise_std=float(values.get("noise_std", "0")),
    )
    seed = int(values["seed"]) if "seed" in values else None
    return SceneConfig(profile=profile, paths=paths, impairments=impairments,
                       duration_s=float(need("duration_s")), seed=seed)


def parse_task_config(text: str) -> tuple[TaskSpec, int | None]:
    """Parse a labeled-task description into a TaskSpec (plus optional seed)."""
    values = dict(_parse_kv_lines(text))

    def need(key):
        if key not in values:
            raise ValueError(f"task config missing required key {key!r}")
        return values[key]

    profile = DeviceProfile(
        carrier_hz=float(need("carrier_hz")),
        subcarrier_offsets_hz=_parse_subcarriers(need("subcarriers")),
        n_tx=int(values.get("n_tx", "1")),
        n_rx=int(values.get("n_rx", "1")),
        sample_rate_hz=float(need("sample_rate_hz")),
    )
    names = [n.strip() for n in need("classes").split(",")]
    dopplers = [float(v) for v in need("class_doppler_hz").split(",")]
    delays = [float(v) for v in need("class_delay_s").split(",")]
    if not (len(names) == len(dopplers) == len(delays)):
        raise ValueError("classes, class_doppler_hz and class_delay_s must have equal length")
    moving_amp = complex(values.get("moving_amp", "0.7"))
    classes = tuple(ClassSignature(name=n, doppler_hz=d, delay_s=tau, amplitude=moving_amp)
                    for n, d, tau in zip(names, dopplers, delays))
    static = PathParams(amplitude=complex(values.get("static_amp", "1")),
                        delay_s=float(values.get("static_delay_s", "20e-9")),
                        doppler_hz=0.0)
    spec = TaskSpec(
        classes=classes,
        n_subjects=int(need("subjects")),
        n_trials=int(need("trials")),
        profile=profile,
        duration_s=float(need("duration_s")),
        static_path=static,
        sto_range_s=_parse_range(values.get("sto_s", "0")),
        sto_jitter_s=float(values.get("sto_jitter_s", "0")),
        cfo_range_hz=_parse_range(values.get("cfo_hz", "0")),
        pll_range=_parse_range(values.get("pll_rad", "0")),
        noise_std=float(values.get("noise_std", "0")),
        subject_gain_spread=float(values.get("subject_gain_spread", "0.3")),
        doppler_jitter_hz=float(values.get("doppler_jitter_hz", "0")),
        environment=values.get("env", "synthetic"),
    )
    seed = int(values["seed"]) if "seed" in values else None
    return spec, seed
