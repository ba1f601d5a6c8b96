"""Deterministic CSI middleware and seeded sensing benchmark harness.

Pipeline stages: simulate impaired channel measurements (csimodel), strip
hardware phase distortion (sanitize), project onto the canonical grid and
window into device-agnostic tensors (canonical), persist everything bit-exactly
(traceio), train the fixed Transformer probe under the locked procedure
(probe), and evaluate over fixed seeds with Student-t intervals (benchkit).
"""

__version__ = "0.1.0"

from .canonical import (CanonicalGridSpec, CanonicalTensor, DegenerateBand,
                        FrameWindow, SampleRateMismatch, WindowSpec,
                        canonicalize, linear_interp_error_bound,
                        project_frequency, window_stream)
from .csimodel import (ClassSignature, DeviceProfile, IdenticalClassSignatures,
                       ImpairmentSet, PathParams, RawCsiFrame, RawCsiStream,
                       SceneConfig, TaskSpec, apply_impairments,
                       generate_stream, make_event_stream, make_synthetic_task,
                       parse_scene_config, parse_task_config, synth_channel)
from .sanitize import (PhaseFit, SanitizeConfig, ZeroMagnitudeSubcarrier,
                       fit_linear_phase, sanitize_frame, sanitize_stream,
                       unwrap_phase)
from .traceio import (BadMagic, DatasetManifest, EmptyTrain, ManifestEntry,
                      ShapeMismatch, SplitAssignment, TruncatedFile,
                      UnsupportedVersion, cross_user_split, read_manifest,
                      read_raw_trace, read_tensor, write_manifest,
                      write_raw_trace, write_tensor)
