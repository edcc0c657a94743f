"""Programmatic dance metrics: kinetic-energy peaks, beat alignment, diversity, drift, tempo response."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from scipy.signal import find_peaks

from .data import AudioTrack, MotionClip, resample_track
from .numerics import make_rng

if TYPE_CHECKING:
    from .model import Model, SamplerSettings

BEAT_TOLERANCE_S = 0.1
PEAK_PROMINENCE = 0.1


class MetricError(ValueError):
    pass


def kinetic_energy(poses: np.ndarray) -> np.ndarray:
    """E_t = sum_j |p_{t+1,j} - p_{t,j}|^2, one value per frame interval."""
    poses = np.asarray(poses, dtype=np.float64)
    step = np.diff(poses, axis=0)
    return (step * step).reshape(len(step), -1).sum(axis=1)


def kinematic_peaks(clip: MotionClip | np.ndarray, fps: float | None = None) -> np.ndarray:
    """Times (s) of kinetic-energy peaks with prominence >= 10% of the maximum energy.

    ``E_t`` measures the interval between frames t and t+1, so a peak at
    index t sits at (t + 0.5) / fps, refined by a parabolic fit through
    its two neighbours.
    """
    if isinstance(clip, MotionClip):
        poses, fps = clip.poses, clip.fps
    else:
        poses = clip
        if fps is None:
            raise MetricError("fps is required for raw pose arrays")
    if len(poses) < 3:
        return np.zeros(0)
    energy = kinetic_energy(poses)
    top = energy.max()
    if top <= 1e-12:
        return np.zeros(0)
    idx, _ = find_peaks(energy, prominence=PEAK_PROMINENCE * top)
    if len(idx) == 0:
        return np.zeros(0)
    left, mid, right = energy[idx - 1], energy[idx], energy[idx + 1]
    curv = left - 2 * mid + right
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(curv < 0, 0.5 * (left - right) / curv, 0.0)
    delta = np.clip(delta, -0.5, 0.5)
    return (idx + 0.5 + delta) / fps


def _beat_grid(track: AudioTrack) -> np.ndarray:
    beats = np.asarray(track.beat_times, dtype=np.float64)
    if len(beats) == 0:
        return beats
    # the grid continues past the clip edges; peaks near an edge may belong to those beats
    return np.concatenate([[beats[0] - track.period], beats, [beats[-1] + track.period]])


def alignment_from_peaks(peaks: np.ndarray, beats: np.ndarray, tau: float = BEAT_TOLERANCE_S) -> float:
    if len(peaks) == 0 or len(beats) == 0:
        return 0.0
    dist = np.abs(np.asarray(peaks)[:, None] - np.asarray(beats)[None, :]).min(axis=1)
    return float(np.mean(np.exp(-dist**2 / (2 * tau * tau))))


def beat_alignment_score(clip: MotionClip, track: AudioTrack, tau: float = BEAT_TOLERANCE_S) -> float:
    """Mean Gaussian agreement exp(-d^2 / 2 tau^2) between motion peaks and their nearest beats."""
    if not np.isclose(clip.fps, track.fps):
        raise MetricError(f"clip fps {clip.fps} differs from track fps {track.fps}")
    return alignment_from_peaks(kinematic_peaks(clip), _beat_grid(track), tau)


def rms_distance(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def diversity_score(clips: Sequence[MotionClip | np.ndarray]) -> float:
    """Mean pairwise RMS pose distance."""
    poses = [c.poses if isinstance(c, MotionClip) else np.asarray(c) for c in clips]
    if len(poses) < 2:
        raise MetricError("diversity needs at least two clips")
    return float(np.mean([rms_distance(a, b) for a, b in itertools.combinations(poses, 2)]))


def peak_rate(clip: MotionClip) -> float:
    """Kinetic-energy peaks per second."""
    return len(kinematic_peaks(clip)) / (clip.frames / clip.fps)


def prior_drift(base: "Model", adapted: "Model", conditions, n: int, seed: int,
                settings: "SamplerSettings | None" = None) -> float:
    """Mean per-clip RMS distance between audio-free generations of two models.

    Both models sample from the same noise, conditions and sigma grid, so at
    adapter initialisation the drift is zero up to float roundoff.
    """
    from .model import SamplerSettings, generate

    if base.cfg.base_key() != adapted.cfg.base_key():
        raise MetricError("models do not share a base configuration")
    if n < 1:
        raise MetricError("prior drift needs at least one clip")
    settings = settings or SamplerSettings()
    cond = np.asarray(conditions)
    if cond.ndim == 1:
        cond = np.tile(cond, (n, 1))
    cond = cond[np.arange(n) % len(cond)]
    a = generate(base, cond, None, make_rng(seed, 53), settings=settings)
    b = generate(adapted, cond, None, make_rng(seed, 53), settings=settings)
    return float(np.mean([rms_distance(x, y) for x, y in zip(a, b)]))


Generator = Callable[[AudioTrack, int, int], Sequence[MotionClip]]


def tempo_response(generate: Generator, base_track: AudioTrack, factors: Sequence[float],
                   n: int, seed: int) -> dict[float, float]:
    """Ratio of mean peak rate at each speed factor to the rate at factor 1.

    ``generate(track, n, seed)`` returns ``n`` clips conditioned on ``track``.
    """
    if any(not f > 0 for f in factors):
        raise MetricError("speed factors must be positive")

    def rate(factor):
        track = base_track if factor == 1.0 else resample_track(base_track, factor)
        return float(np.mean([peak_rate(c) for c in generate(track, n, seed)]))

    ref = rate(1.0)
    if ref == 0:
        raise MetricError("reference generation has no kinetic peaks")
    return {float(f): (1.0 if f == 1.0 else rate(f) / ref) for f in factors}


@dataclass
class ClipMetrics:
    clip: int
    tempo: float
    beat_alignment: float
    peaks: int
    peak_rate: float


@dataclass
class MetricsReport:
    beat_alignment: float
    diversity: float
    prior_drift: float = 0.0
    tempo_response: dict[str, float] = field(default_factory=dict)
    clips: list[ClipMetrics] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        if not 0.0 <= self.beat_alignment <= 1.0:
            raise MetricError(f"beat alignment {self.beat_alignment} outside [0, 1]")
        values = [self.beat_alignment, self.diversity, self.prior_drift, *self.tempo_response.values()]
        if not np.all(np.isfinite(values)):
            raise MetricError("metrics must be finite")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def breakdown_csv(self) -> str:
        rows = ["clip,tempo,beat_alignment,peaks,peak_rate"]
        rows += [f"{c.clip},{c.tempo:g},{c.beat_alignment:.6f},{c.peaks},{c.peak_rate:.6f}" for c in self.clips]
        return "\n".join(rows) + "\n"


def evaluate_clips(clips: Sequence[MotionClip], tracks: Sequence[AudioTrack], label: str = "",
                   prior_drift: float = 0.0, tempo: dict | None = None) -> MetricsReport:
    if len(clips) != len(tracks):
        raise MetricError("need one track per clip")
    rows = []
    for i, (c, t) in enumerate(zip(clips, tracks)):
        rows.append(ClipMetrics(i, t.tempo_bpm, beat_alignment_score(c, t), len(kinematic_peaks(c)), peak_rate(c)))
    div = diversity_score(clips) if len(clips) >= 2 else 0.0
    score = float(np.mean([r.beat_alignment for r in rows])) if rows else 0.0
    return MetricsReport(score, div, prior_drift, {str(k): v for k, v in (tempo or {}).items()}, rows, label)


def energy_series_csv(clip: MotionClip, track: AudioTrack) -> str:
    """Plot-ready energy-vs-time series with beat markers."""
    energy = kinetic_energy(clip.poses)
    t = (np.arange(len(energy)) + 0.5) / clip.fps
    rows = ["time,energy,beat"]
    beat_frames = set(np.floor(np.asarray(track.beat_times) * clip.fps).astype(int).tolist())
    rows += [f"{ti:.6f},{e:.8f},{int(i in beat_frames)}" for i, (ti, e) in enumerate(zip(t, energy))]
    return "\n".join(rows) + "\n"
