"""Evaluation protocol: metrics, seed statistics, spectrograms, reports.

Every experiment is repeated over a fixed seed list and reported as mean,
sample standard deviation, and a 95% confidence interval from the Student-t
distribution (quantiles embedded as constants, so there is no special-function
dependency). Doppler spectrograms use conjugate-referenced CSI so oscillator
phase cancels while motion phase survives. Report bundles are deterministic
bytes and carry a fingerprint of every configuration that produced them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from pathlib import Path

import numpy as np

from .canonical import CanonicalGridSpec, CanonicalTensor, WindowSpec, canonicalize
from .csimodel import RawCsiStream
from .probe import ModelConfig, TrainConfig, TrainResult, predict_probs, train
from .sanitize import SanitizeConfig, sanitize_stream

BENCHMARK_SEEDS = (992, 863, 702, 443, 542)

# Two-sided 97.5% Student-t quantiles for n = 2..6 runs (dof = n - 1),
# documented to 6 decimals.
STUDENT_T_975 = {
    1: 12.706205,
    2: 4.302653,
    3: 3.182446,
    4: 2.776445,
    5: 2.570582,
}

DEFAULT_TAU = 0.5
STFT_WINDOW = 128
STFT_HOP = 16


class EventClassMissing(ValueError):
    """The designated event class is not among the model's labels."""


# ---------------------------------------------------------------------------
# Metrics


def top1(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0:
        raise ValueError("no predictions")
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """Counts indexed [true][predicted]."""
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for y, p in zip(np.asarray(labels), np.asarray(preds)):
        m[int(y), int(p)] += 1
    return m


def normalized_confusion(m: np.ndarray) -> np.ndarray:
    """Row-normalized view of a confusion matrix; zero-support rows stay zero."""
    m = np.asarray(m, dtype=np.float64)
    sums = m.sum(axis=1, keepdims=True)
    out = np.zeros_like(m)
    np.divide(m, sums, out=out, where=sums > 0)
    return out


def macro_f1(preds, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support and no
    predictions contributes 0."""
    m = confusion_matrix(preds, labels, n_classes)
    f1s = []
    for c in range(n_classes):
        tp = m[c, c]
        fn = m[c].sum() - tp
        fp = m[:, c].sum() - tp
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(f1s))


def mae(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return float(np.mean(np.abs(preds - targets)))


@dataclass(frozen=True)
class SeedAggregate:
    mean: float
    std: float            # sample standard deviation (ddof=1)
    ci95_halfwidth: float


def aggregate_seeds(values) -> SeedAggregate:
    """mean, sample std, and t_{0.975, n-1} * std / sqrt(n) for 2..6 runs."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < 2 or n - 1 not in STUDENT_T_975:
        raise ValueError(f"aggregate_seeds supports 2..6 values, got {n}")
    mean = float(v.mean())
    std = float(v.std(ddof=1))
    ci = STUDENT_T_975[n - 1] * std / math.sqrt(n)
    return SeedAggregate(mean=mean, std=std, ci95_halfwidth=ci)


# ---------------------------------------------------------------------------
# Rank consistency across seeds


@dataclass
class RankTable:
    variants: list[str]
    seeds: list[int]
    ranks: np.ndarray          # (n_variants, n_seeds), rank 1 = best
    rank_variance: np.ndarray  # per variant, sample variance of its ranks


def rank_consistency(accuracy_by_variant: dict[str, list[float]],
                     seeds: list[int] | None = None) -> RankTable:
    """Per-seed competition ranks (ties share the minimum rank) plus variance."""
    variants = list(accuracy_by_variant)
    acc = np.asarray([accuracy_by_variant[v] for v in variants], dtype=np.float64)
    n_variants, n_seeds = acc.shape
    ranks = np.zeros((n_variants, n_seeds), dtype=np.int64)
    for s in range(n_seeds):
        col = acc[:, s]
        for i in range(n_variants):
            ranks[i, s] = 1 + int(np.sum(col > col[i]))
    if n_seeds > 1:
        variance = ranks.var(axis=1, ddof=1)
    else:
        variance = np.zeros(n_variants)
    return RankTable(variants=variants, seeds=list(seeds or range(n_seeds)),
                     ranks=ranks, rank_variance=variance)


# ---------------------------------------------------------------------------
# Doppler spectrograms


@dataclass
class DfsSpectrogram:
    times_s: np.ndarray       # (n_slices,) window-center times
    freqs_hz: np.ndarray      # (n_bins,) fftshifted, spans +-sample_rate/2
    power: np.ndarray         # (n_slices, n_bins) magnitude, >= 0
    full_overlap: np.ndarray  # (n_slices,) bool, window fully inside the stream
    # Edge slices mix the signal with the zero padding and carry transient
    # energy by construction; concentration properties apply where
    # full_overlap is set.


def _hann(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(2.0 * math.pi * np.arange(n) / n))


def dfs_spectrogram(stream: RawCsiStream, pair: int = 0, mode: str = "conjugate_reference",
                    reference: int = 0, window: int = STFT_WINDOW,
                    hop: int = STFT_HOP) -> DfsSpectrogram:
    """Doppler-over-time magnitude for one antenna pair.

    The stream is conjugate-referenced (or left raw with mode="raw"), the
    chosen pair's per-subcarrier series is averaged over subcarriers, and a
    Hann-windowed short-time Fourier magnitude with zero-padded edges is
    computed. Bins are fftshifted so zero Doppler sits at index window//2.
    """
    if mode == "conjugate_reference":
        work = sanitize_stream(stream, SanitizeConfig(mode="conjugate_reference",
                                                      reference_antenna=reference))
    elif mode == "raw":
        work = stream
    else:
        raise ValueError(f"unknown spectrogram mode {mode!r}")
    profile = stream.profile
    n = len(work.frames)
    if n < 1:
        raise ValueError("stream is empty")
    flat = work.values_array().reshape(n, profile.n_pairs, profile.k_raw)
    if not 0 <= pair < profile.n_pairs:
        raise ValueError(f"pair {pair} out of range for {profile.n_pairs} pairs")
    series = flat[:, pair, :].mean(axis=1)   # (n,) complex, mean over subcarriers
    half = window // 2
    padded = np.concatenate([np.zeros(half, dtype=series.dtype), series,
                             np.zeros(half, dtype=series.dtype)])
    taper = _hann(window)
    centers = np.arange(0, n, hop)
    power = np.empty((centers.size, window))
    for i, c in enumerate(centers):
        segment = padded[c:c + window]
        spectrum = np.fft.fftshift(np.fft.fft(segment * taper))
        power[i] = np.abs(spectrum)
    freqs = np.fft.fftshift(np.fft.fftfreq(window, d=1.0 / profile.sample_rate_hz))
    times = centers / profile.sample_rate_hz
    full = (centers >= half) & (centers + half <= n)
    return DfsSpectrogram(times_s=times, freqs_hz=freqs, power=power, full_overlap=full)


def zero_doppler_fraction(spec: DfsSpectrogram, halfwidth_bins: int = 1) -> np.ndarray:
    """Per time slice, energy fraction inside the zero-Doppler mainlobe.

    The Hann window spreads a DC tone over the center bin and its two
    neighbours, so the zero-Doppler band is the center bin +- halfwidth_bins.
    """
    energy = spec.power ** 2
    total = energy.sum(axis=1)
    dc = int(np.argmin(np.abs(spec.freqs_hz)))
    lo, hi = dc - halfwidth_bins, dc + halfwidth_bins + 1
    frac = np.zeros_like(total)
    nonzero = total > 0
    frac[nonzero] = energy[nonzero, lo:hi].sum(axis=1) / total[nonzero]
    return frac


def peak_doppler_hz(spec: DfsSpectrogram, slice_index: int | None = None) -> float:
    """Frequency of the strongest bin, over one slice or the whole grid."""
    if slice_index is None:
        col = spec.power.sum(axis=0)
    else:
        col = spec.power[slice_index]
    return float(spec.freqs_hz[int(np.argmax(col))])


# ---------------------------------------------------------------------------
# Continuous-stream inference


@dataclass
class StreamDecision:
    p_trace: np.ndarray        # per-window event-class probability
    window_starts_s: np.ndarray
    p_max: float
    triggered: bool
    peak_time_s: float
    tau: float


def decide_from_trace(trace, window_starts_s, tau: float) -> StreamDecision:
    trace = np.asarray(trace, dtype=np.float64)
    starts = np.asarray(window_starts_s, dtype=np.float64)
    if trace.size == 0:
        raise ValueError("empty probability trace")
    peak = int(np.argmax(trace))   # first occurrence wins ties
    p_max = float(trace[peak])
    return StreamDecision(p_trace=trace, window_starts_s=starts, p_max=p_max,
                          triggered=bool(p_max > tau), peak_time_s=float(starts[peak]),
                          tau=tau)


def stream_infer(stream: RawCsiStream, result: TrainResult,
                 sanitize_cfg: SanitizeConfig | None, grid: CanonicalGridSpec,
                 window_spec: WindowSpec, tau: float = DEFAULT_TAU,
                 event_class: str = "Fall",
                 event_class_id: int | None = None) -> StreamDecision:
    """Slide canonical windows over the stream and threshold the event trace.

    triggered is p_max > tau; peak_time is the start of the first window
    attaining the maximum.
    """
    if event_class_id is None:
        if event_class not in result.label_names:
            raise EventClassMissing(
                f"class {event_class!r} not among model labels {result.label_names}")
        event_class_id = result.label_names.index(event_class)
    if not 0 <= event_class_id < result.model_cfg.out_dim:
        raise EventClassMissing(f"event class id {event_class_id} out of range")
    tensors = canonicalize(stream, sanitize_cfg, grid, window_spec)
    if not tensors:
        raise ValueError("stream is shorter than one canonical window")
    probs = predict_probs(tensors, result.params, result.model_cfg)
    starts = np.array([t.window_start_s for t in tensors])
    return decide_from_trace(probs[:, event_class_id], starts, tau)


# ---------------------------------------------------------------------------
# Seeded benchmark runs


@dataclass
class SeedRunResult:
    seed: int
    top1: float
    macro_f1: float
    mae: float | None
    confusion: np.ndarray

    def validate(self) -> None:
        if not (0.0 <= self.top1 <= 1.0 and 0.0 <= self.macro_f1 <= 1.0):
            raise ValueError("metrics must lie in [0, 1]")


@dataclass
class EvalReport:
    seeds: list[int]
    per_seed: list[SeedRunResult]
    aggregates: dict[str, SeedAggregate]
    fingerprint: str
    label_names: list[str] = field(default_factory=list)


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, (frozenset, set)):
        return sorted(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def config_fingerprint(**configs) -> str:
    """sha256 over a canonical JSON dump of every configuration object."""
    payload = json.dumps(_jsonable(configs), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def run_seeded_benchmark(train_tensors: list[CanonicalTensor],
                         val_tensors: list[CanonicalTensor],
                         test_tensors: list[CanonicalTensor],
                         model_cfg: ModelConfig, base_train_cfg: TrainConfig,
                         seeds=BENCHMARK_SEEDS,
                         label_names: list[str] | None = None,
                         fingerprint_extra: dict | None = None) -> EvalReport:
    """Train and evaluate once per seed; aggregate with Student-t intervals."""
    names = list(label_names or [])
    n_classes = model_cfg.out_dim
    per_seed = []
    for seed in seeds:
        cfg = replace(base_train_cfg, seed=seed)
        result = train(train_tensors, val_tensors, model_cfg, cfg, label_names=names)
        labels = np.array([int(t.label) for t in test_tensors])
        preds = np.argmax(predict_probs(test_tensors, result.params, model_cfg), axis=1)
        run = SeedRunResult(seed=seed,
                            top1=top1(preds, labels),
                            macro_f1=macro_f1(preds, labels, n_classes),
                            mae=None,
                            confusion=confusion_matrix(preds, labels, n_classes))
        run.validate()
        per_seed.append(run)
    aggregates = {
        "top1": aggregate_seeds([r.top1 for r in per_seed]),
        "macro_f1": aggregate_seeds([r.macro_f1 for r in per_seed]),
    }
    fp = config_fingerprint(model=model_cfg, train=base_train_cfg, seeds=list(seeds),
                            **(fingerprint_extra or {}))
    return EvalReport(seeds=list(seeds), per_seed=per_seed, aggregates=aggregates,
                      fingerprint=fp, label_names=names)


# ---------------------------------------------------------------------------
# Report bundles


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(report: EvalReport, destination,
                rank_table: RankTable | None = None,
                spectrograms: dict[str, DfsSpectrogram] | None = None) -> Path:
    """Write the bundle: metrics.tsv, confusion_<seed>.tsv, ranks.tsv,
    spectrogram_<tag>.tsv, summary.txt, fingerprint.txt. Bytes are a pure
    function of the inputs."""
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)

    has_mae = any(r.mae is not None for r in report.per_seed)
    cols = ["seed", "top1", "macro_f1"] + (["mae"] if has_mae else [])
    lines = ["\t".join(cols)]
    for r in report.per_seed:
        row = [str(r.seed), _fmt(r.top1), _fmt(r.macro_f1)]
        if has_mae:
            row.append("" if r.mae is None else _fmt(r.mae))
        lines.append("\t".join(row))
    for stat in ("mean", "std", "ci95_halfwidth"):
        row = [stat]
        for metric in ("top1", "macro_f1"):
            row.append(_fmt(getattr(report.aggregates[metric], stat)))
        if has_mae:
            row.append("")
        lines.append("\t".join(row))
    (dest / "metrics.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    names = report.label_names or [str(i) for i in range(report.per_seed[0].confusion.shape[0])]
    for r in report.per_seed:
        rows = ["\t".join(["true\\pred"] + names)]
        for ci, name in enumerate(names):
            rows.append("\t".join([name] + [str(int(v)) for v in r.confusion[ci]]))
        (dest / f"confusion_{r.seed}.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    if rank_table is not None:
        header = ["variant"] + [f"seed{s}" for s in rank_table.seeds] + ["rank_variance"]
        rows = ["\t".join(header)]
        for i, v in enumerate(rank_table.variants):
            rows.append("\t".join([v] + [str(int(r)) for r in rank_table.ranks[i]]
                                  + [_fmt(rank_table.rank_variance[i])]))
        (dest / "ranks.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    for tag, spec in (spectrograms or {}).items():
        rows = ["\t".join(["time_s"] + [_fmt(f) for f in spec.freqs_hz])]
        for i, t in enumerate(spec.times_s):
            rows.append("\t".join([_fmt(t)] + [_fmt(v) for v in spec.power[i]]))
        (dest / f"spectrogram_{tag}.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    summary = [
        f"fingerprint: {report.fingerprint}",
        f"seeds: {','.join(str(s) for s in report.seeds)}",
        f"runs: {len(report.per_seed)}",
    ]
    for metric, agg in report.aggregates.items():
        summary.append(f"{metric}: mean={_fmt(agg.mean)} std={_fmt(agg.std)} "
                       f"ci95_halfwidth={_fmt(agg.ci95_halfwidth)}")
    (dest / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    (dest / "fingerprint.txt").write_text(report.fingerprint + "\n", encoding="utf-8")
    return dest
