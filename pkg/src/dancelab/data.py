"""Synthetic beat-structured music and dance.

Tracks are constant-tempo beat grids summarised as four per-frame features
(beat-proximity envelope, sin/cos of beat phase, loudness). Dances are 2D
skeletons in a hit-and-hold vocabulary: joints hold a position between beats
and snap to the other of two positions on a beat, so the summed kinetic
energy peaks on the beat grid by construction.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import erf

from .numerics import make_rng

FPS = 12.0
FRAMES = 32
JOINTS = 8
D_AUDIO = 4
TEMPO_RANGE = (80.0, 160.0)
TEMPO_STEP = 4.0
P_BASE = 0.1

JOINT_NAMES = ("pelvis", "neck", "l_hand", "r_hand", "l_knee", "r_knee", "l_foot", "r_foot")
PARENTS = (-1, 0, 1, 1, 0, 0, 4, 5)
REST_POSE = np.array(
    [[0.0, 0.0], [0.0, 0.45], [-0.35, 0.2], [0.35, 0.2],
     [-0.15, -0.35], [0.15, -0.35], [-0.18, -0.7], [0.18, -0.7]]
)

# std (seconds) of the Gaussian velocity burst of a snap; ~0.5 frame at 12 fps
SNAP_WIDTH_S = 0.045


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# condition tokens

class Vocab:
    NULL = 0
    BASE = 1
    TEMPLATE = 2
    STYLE0 = 3
    STYLES = ("hiphop", "house", "popping", "krump", "jazz", "locking")
    SETTINGS = ("studio", "street", "stage", "gallery")
    CAMERAS = ("front", "left", "mirror")
    SETTING0 = STYLE0 + len(STYLES)
    CAMERA0 = SETTING0 + len(SETTINGS)
    SIZE = CAMERA0 + len(CAMERAS)
    SLOTS = 4


@dataclass(frozen=True)
class ConditionTokens:
    """Caption as token slots: (template, style, setting, camera)."""

    ids: tuple[int, ...]
    detailed: bool = True

    def __post_init__(self):
        if len(self.ids) != Vocab.SLOTS:
            raise DataError(f"condition needs {Vocab.SLOTS} slots, got {len(self.ids)}")
        if any(not 0 <= i < Vocab.SIZE for i in self.ids):
            raise DataError(f"token ids {self.ids} outside vocabulary of size {Vocab.SIZE}")

    @classmethod
    def detailed_caption(cls, style: int, setting: int = 0, camera: int = 0) -> "ConditionTokens":
        return cls((Vocab.TEMPLATE, Vocab.STYLE0 + style, Vocab.SETTING0 + setting, Vocab.CAMERA0 + camera), True)

    @classmethod
    def base(cls) -> "ConditionTokens":
        return cls((Vocab.BASE, Vocab.NULL, Vocab.NULL, Vocab.NULL), False)

    @classmethod
    def null(cls) -> "ConditionTokens":
        return cls((Vocab.NULL,) * Vocab.SLOTS, False)

    @property
    def is_null(self) -> bool:
        return all(i == Vocab.NULL for i in self.ids)

    @property
    def setting(self) -> int:
        return self.ids[2] - Vocab.SETTING0 if self.detailed else 0

    @property
    def camera(self) -> int:
        return self.ids[3] - Vocab.CAMERA0 if self.detailed else 0


def diversify_caption(c: ConditionTokens, p_base: float, rng: np.random.Generator) -> ConditionTokens:
    """With probability ``p_base`` swap a caption for the plain base caption."""
    if not 0.0 <= p_base <= 1.0:
        raise DataError(f"p_base must lie in [0, 1], got {p_base}")
    if rng.random() < p_base:
        return ConditionTokens.base()
    return c


# --------------------------------------------------------------------------
# audio

@dataclass
class AudioTrack:
    tempo_bpm: float
    duration_s: float
    beat_times: np.ndarray
    features: np.ndarray  # frames x D_AUDIO
    fps: float = FPS

    @property
    def period(self) -> float:
        return 60.0 / self.tempo_bpm

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def first_beat(self) -> float:
        return float(self.beat_times[0]) if len(self.beat_times) else 0.0

    def phase(self, times) -> np.ndarray:
        """Beat phase in radians (0 on every beat) at the given times."""
        return 2.0 * np.pi * (np.asarray(times) - self.first_beat) / self.period


def _beat_grid(tempo_bpm: float, duration_s: float, offset: float) -> np.ndarray:
    period = 60.0 / tempo_bpm
    n = int(math.floor((duration_s - offset) / period - 1e-12)) + 1
    beats = offset + period * np.arange(max(n, 0))
    return beats[beats < duration_s]


def track_features(tempo_bpm: float, beats: np.ndarray, frames: int, fps: float,
                   first_beat: float | None = None) -> np.ndarray:
    """Per-frame features (envelope, sin phase, cos phase, loudness)."""
    t = np.arange(frames) / fps
    period = 60.0 / tempo_bpm
    anchor = beats[0] if first_beat is None else first_beat
    phase = 2.0 * np.pi * (t - anchor) / period
    # distance to the nearest grid beat, extended past the clip edges
    k = np.round((t - anchor) / period)
    dist = np.abs(t - (anchor + k * period))
    width = 0.5 / fps
    envelope = np.exp(-0.5 * (dist / width) ** 2)
    loudness = 0.3 + 0.5 * (tempo_bpm - 60.0) / 140.0 + 0.2 * envelope
    return np.stack([envelope, np.sin(phase), np.cos(phase), loudness], axis=1)


def synth_track(tempo_bpm: float, duration_s: float, fps: float = FPS,
                rng: np.random.Generator | None = None, offset: float | None = None) -> AudioTrack:
    """Constant-tempo track. The first beat lands at ``offset`` (random within one period when ``rng`` is given)."""
    if not 60.0 <= tempo_bpm <= 200.0:
        raise DataError(f"tempo must lie in [60, 200] bpm, got {tempo_bpm}")
    if duration_s <= 0 or fps <= 0:
        raise DataError("duration and fps must be positive")
    period = 60.0 / tempo_bpm
    if offset is None:
        offset = float(rng.uniform(0.0, period)) if rng is not None else 0.0
    offset = float(offset) % period
    beats = _beat_grid(tempo_bpm, duration_s, offset)
    frames = int(round(duration_s * fps))
    feats = track_features(tempo_bpm, beats, frames, fps, first_beat=offset)
    return AudioTrack(float(tempo_bpm), float(duration_s), beats, feats, float(fps))


def resample_track(track: AudioTrack, factor: float) -> AudioTrack:
    """Same clip length and first beat, tempo scaled by ``factor``."""
    if not factor > 0:
        raise DataError(f"speed factor must be positive, got {factor}")
    return synth_track(track.tempo_bpm * factor, track.duration_s, track.fps, offset=track.first_beat)


# --------------------------------------------------------------------------
# motion

@dataclass(frozen=True)
class Style:
    name: str
    amplitude: np.ndarray  # per joint
    direction: np.ndarray  # per joint, unit 2D
    alternate: bool = False  # left/right joints take turns beat by beat
    phase_offset: np.ndarray | None = None  # per joint, fraction of a beat


def _unit(deg):
    rad = np.deg2rad(np.asarray(deg, dtype=float))
    return np.stack([np.cos(rad), np.sin(rad)], axis=-1)


STYLES: tuple[Style, ...] = (
    Style("hiphop", np.array([0.20, 0.12, 0.44, 0.44, 0.20, 0.20, 0.08, 0.08]),
          _unit([270, 270, 90, 90, 270, 270, 270, 270])),
    Style("house", np.array([0.12, 0.06, 0.16, 0.16, 0.24, 0.24, 0.40, 0.40]),
          _unit([0, 0, 0, 180, 30, 150, 90, 90]), alternate=True),
    Style("popping", np.array([0.08, 0.16, 0.44, 0.44, 0.06, 0.06, 0.04, 0.04]),
          _unit([90, 0, 180, 0, 90, 90, 90, 90]), alternate=True),
    Style("krump", np.array([0.24, 0.20, 0.48, 0.48, 0.24, 0.24, 0.16, 0.16]),
          _unit([270, 90, 135, 45, 225, 315, 270, 270])),
    Style("jazz", np.array([0.06, 0.10, 0.40, 0.40, 0.12, 0.12, 0.32, 0.32]),
          _unit([90, 90, 45, 135, 0, 180, 60, 120]),
          phase_offset=np.array([0.0, 0.0, 0.04, 0.04, 0.0, 0.0, -0.03, -0.03])),
    Style("locking", np.array([0.16, 0.08, 0.40, 0.40, 0.10, 0.10, 0.06, 0.06]),
          _unit([270, 270, 270, 270, 0, 180, 270, 270])),
)
SETTING_GAIN = (1.0, 1.1, 1.2, 0.9)
LEFT_JOINTS = (2, 4, 6)
RIGHT_JOINTS = (3, 5, 7)


def snap_profile(t: np.ndarray, beats: np.ndarray, width: float = None) -> np.ndarray:
    """Smooth unit steps centred on ``beats``: column k rises from 0 to 1 around beat k."""
    width = SNAP_WIDTH_S if width is None else width
    z = (np.asarray(t)[:, None] - np.asarray(beats)[None, :]) / (width * np.sqrt(2.0))
    return 0.5 * (1.0 + erf(z))


def _rest_pose(joints: int) -> np.ndarray:
    if joints == JOINTS:
        return REST_POSE.copy()
    ang = np.linspace(0.0, 2 * np.pi, joints, endpoint=False)
    return 0.5 * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def parents(joints: int) -> tuple[int, ...]:
    return PARENTS if joints == JOINTS else tuple(range(-1, joints - 1))


def _style_for(style, joints: int) -> Style:
    if isinstance(style, Style):
        return style
    if not 0 <= int(style) < len(STYLES):
        raise DataError(f"unknown style id {style}")
    st = STYLES[int(style)]
    if joints != JOINTS:
        reps = math.ceil(joints / JOINTS)
        st = Style(st.name, np.tile(st.amplitude, reps)[:joints], np.tile(st.direction, (reps, 1))[:joints],
                   st.alternate, None if st.phase_offset is None else np.tile(st.phase_offset, reps)[:joints])
    return st


@dataclass
class MotionClip:
    poses: np.ndarray  # frames x joints x 2, within [-1, 1]
    fps: float = FPS
    style_id: int = 0
    source: str = "structured"

    @property
    def frames(self) -> int:
        return self.poses.shape[0]


def synth_dance(track: AudioTrack, style, rng: np.random.Generator, joints: int = JOINTS,
                gain: float = 1.0, camera: int = 0, timing_jitter: float = 0.0) -> MotionClip:
    """Ground-truth dance: each moving joint toggles between two held positions, snapping on beats.

    Diversity comes from a per-clip rotation of each joint's snap direction,
    per-beat amplitude jitter of the held levels, and a small rest-pose
    offset. None of these add motion between beats, so energy peaks stay on
    the beat grid and a zero-amplitude style stays still.
    """
    st = _style_for(style, joints)
    if len(st.amplitude) != joints:
        raise DataError(f"style has {len(st.amplitude)} joints, expected {joints}")
    t = np.arange(track.frames) / track.fps
    period = track.period
    # beat grid extended two beats beyond both clip edges
    k_lo = int(np.floor((0.0 - track.first_beat) / period)) - 2
    k_hi = int(np.ceil((track.duration_s - track.first_beat) / period)) + 2
    ks = np.arange(k_lo, k_hi + 1)
    grid = track.first_beat + ks * period

    rest = _rest_pose(joints) + rng.normal(0.0, 0.02, (1, 2))
    angle = rng.normal(0.0, 0.15, joints)
    rot = np.stack([np.cos(angle), -np.sin(angle), np.sin(angle), np.cos(angle)], axis=1).reshape(joints, 2, 2)
    direction = np.einsum("jab,jb->ja", rot, st.direction)
    offsets = np.zeros(joints) if st.phase_offset is None else np.asarray(st.phase_offset, dtype=float)
    if timing_jitter:
        offsets = offsets + rng.normal(0.0, timing_jitter, joints)
    level_gain = np.clip(1.0 + 0.15 * rng.standard_normal((len(ks), joints)), 0.6, 1.4)

    active = np.ones((len(ks), joints), dtype=bool)
    if st.alternate:
        even = ks % 2 == 0
        for j in LEFT_JOINTS:
            if j < joints:
                active[:, j] = even
        for j in RIGHT_JOINTS:
            if j < joints:
                active[:, j] = ~even
    disp = np.zeros((len(t), joints))
    for j in range(joints):
        state = 0
        levels = np.zeros(len(ks) + 1)
        for i in range(len(ks)):
            if active[i, j]:
                state ^= 1
                levels[i + 1] = state * level_gain[i, j]
            else:
                levels[i + 1] = levels[i]
        steps = np.diff(levels)
        disp[:, j] = levels[0] + snap_profile(t, grid + offsets[j] * period) @ steps
    amp = st.amplitude * gain
    disp -= 0.5 * (disp.max(axis=0, keepdims=True) + disp.min(axis=0, keepdims=True)) * (amp > 0)
    poses = rest[None, :, :] + (amp[None, :] * disp)[:, :, None] * direction[None, :, :]
    poses = apply_camera(poses, camera)
    style_id = -1 if isinstance(style, Style) else int(style)
    return MotionClip(np.clip(poses, -1.0, 1.0), track.fps, style_id)


def apply_camera(poses: np.ndarray, camera: int) -> np.ndarray:
    if camera == 0:
        return poses
    out = poses.copy()
    if camera == 1:
        out[..., 0] *= 0.7
    elif camera == 2:
        out[..., 0] *= -1.0
    else:
        raise DataError(f"unknown camera id {camera}")
    return out


# --------------------------------------------------------------------------
# dataset

@dataclass
class DatasetSpec:
    n_structured: int = 320
    n_wild: int = 320
    styles: tuple[int, ...] = tuple(range(len(STYLES)))
    tempo_min: float = TEMPO_RANGE[0]
    tempo_max: float = TEMPO_RANGE[1]
    tempo_step: float = TEMPO_STEP
    seed: int = 0
    p_base: float = P_BASE
    frames: int = FRAMES
    fps: float = FPS
    joints: int = JOINTS
    holdout_every: int = 5
    wild_noise: float = 0.1
    wild_crop: float = 0.25
    caption_error: float = 0.2

    def validate(self) -> None:
        if self.n_structured < 0 or self.n_wild < 0 or self.n_structured + self.n_wild == 0:
            raise DataError("dataset needs at least one clip")
        if not 60.0 <= self.tempo_min <= self.tempo_max <= 200.0:
            raise DataError(f"invalid tempo range [{self.tempo_min}, {self.tempo_max}] (allowed 60-200 bpm)")
        if self.tempo_step <= 0:
            raise DataError("tempo_step must be positive")
        if not 0.0 <= self.p_base <= 1.0:
            raise DataError("p_base must lie in [0, 1]")
        if not self.styles or any(not 0 <= s < len(STYLES) for s in self.styles):
            raise DataError(f"styles must be ids in 0..{len(STYLES) - 1}")
        if self.frames < 3 or self.fps <= 0 or self.joints < 2:
            raise DataError("invalid clip geometry")

    def tempo_grid(self) -> np.ndarray:
        return np.arange(self.tempo_min, self.tempo_max + 1e-9, self.tempo_step)

    def test_tempos(self) -> np.ndarray:
        grid = self.tempo_grid()
        if len(grid) < 2 or self.holdout_every <= 0:
            return grid[:0]
        return grid[self.holdout_every // 2::self.holdout_every]


@dataclass
class Clip:
    motion: MotionClip
    track: AudioTrack
    tokens: ConditionTokens
    split: str = "train"

    @property
    def source(self) -> str:
        return self.motion.source


@dataclass
class Dataset:
    clips: list[Clip]
    spec: DatasetSpec = field(default_factory=DatasetSpec)

    def __len__(self) -> int:
        return len(self.clips)

    def indices(self, split: str = "train", source: str | None = None) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.clips)
                         if c.split == split and (source is None or c.source == source)], dtype=int)

    def split(self, split: str) -> list[Clip]:
        return [c for c in self.clips if c.split == split]

    def batch_sampler(self, batch_size: int, rng: np.random.Generator, split: str = "train") -> "BatchSampler":
        return BatchSampler(self.indices(split, "structured"), self.indices(split, "wild"), batch_size, rng)


class BatchSampler:
    """Draws training indices alternating structured and wild pools (1:1 overall)."""

    def __init__(self, structured: np.ndarray, wild: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(structured) == 0 and len(wild) == 0:
            raise DataError("both pools are empty")
        self.pools = [p for p in (np.asarray(structured), np.asarray(wild)) if len(p)]
        self.batch_size = batch_size
        self.rng = rng
        self.counter = 0

    def draw(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=int)
        for i in range(n):
            pool = self.pools[self.counter % len(self.pools)]
            out[i] = pool[self.rng.integers(len(pool))]
            self.counter += 1
        return out

    def __iter__(self) -> Iterator[np.ndarray]:
        while True:
            yield self.draw(self.batch_size)

    def next_batch(self) -> np.ndarray:
        return self.draw(self.batch_size)


def _make_clip(spec: DatasetSpec, index: int, source: str, test_tempos: set) -> Clip:
    rng = make_rng(spec.seed, index)
    grid = spec.tempo_grid()
    tempo = float(grid[rng.integers(len(grid))])
    style = int(spec.styles[rng.integers(len(spec.styles))])
    duration = spec.frames / spec.fps
    if source == "structured":
        setting, camera, label = 0, 0, style
        track = synth_track(tempo, duration, spec.fps, rng)
        motion = synth_dance(track, style, rng, spec.joints)
    else:
        setting = int(rng.integers(len(Vocab.SETTINGS)))
        camera = int(rng.integers(len(Vocab.CAMERAS)))
        # crop a window out of a longer track; the dancer picks up the phrase at the crop's first beat
        long = synth_track(tempo, duration * (1.0 + spec.wild_crop), spec.fps, rng)
        start = int(rng.integers(0, long.frames - spec.frames + 1))
        t0 = start / spec.fps
        beats = long.beat_times[(long.beat_times >= t0) & (long.beat_times < t0 + duration)] - t0
        feats = long.features[start:start + spec.frames].copy()
        clean = AudioTrack(tempo, duration, beats, feats.copy(), spec.fps)
        motion = synth_dance(clean, style, rng, spec.joints, gain=SETTING_GAIN[setting], camera=camera,
                             timing_jitter=0.02)
        noise = rng.normal(0.0, spec.wild_noise, (spec.frames, 2))
        feats[:, 0] += noise[:, 0]
        feats[:, 3] += noise[:, 1]
        track = AudioTrack(tempo, duration, beats, feats, spec.fps)
        # the auto-captioner sometimes names the wrong style
        label = style if rng.random() >= spec.caption_error else int(rng.integers(len(STYLES)))
    motion.style_id = style
    motion.source = source
    tokens = ConditionTokens.detailed_caption(label, setting, camera)
    split = "test" if tempo in test_tempos else "train"
    return Clip(motion, track, tokens, split)


def make_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    test_tempos = set(float(t) for t in spec.test_tempos())
    clips = []
    for i in range(spec.n_structured):
        clips.append(_make_clip(spec, i, "structured", test_tempos))
    for i in range(spec.n_wild):
        clips.append(_make_clip(spec, spec.n_structured + i, "wild", test_tempos))
    return Dataset(clips, spec)


def held_out_tracks(spec: DatasetSpec, n: int, seed: int) -> list[AudioTrack]:
    """Fresh tracks at the held-out tempos (random first-beat offsets)."""
    tempos = spec.test_tempos()
    if len(tempos) == 0:
        raise DataError("dataset spec holds out no tempos")
    rng = make_rng(seed, 7919)
    duration = spec.frames / spec.fps
    return [synth_track(float(tempos[i % len(tempos)]), duration, spec.fps, rng) for i in range(n)]


# --------------------------------------------------------------------------
# container format

DATASET_MAGIC = b"MIDS0001"
SOURCES = ("structured", "wild", "generated")


class FormatError(DataError):
    pass


def _detail_byte(tokens: ConditionTokens) -> int:
    # bit 0: detailed flag; bits 1-3 setting; bits 4-6 camera
    if not tokens.detailed:
        return 0
    return 1 | (tokens.setting << 1) | (tokens.camera << 4)


def _tokens_from(style: int, detail: int) -> ConditionTokens:
    if not detail & 1:
        return ConditionTokens.base()
    return ConditionTokens.detailed_caption(style, (detail >> 1) & 0b111, (detail >> 4) & 0b111)


def _stored_style(c: Clip) -> int:
    # the caption label is what conditioning sees; it can differ from the true style for wild clips
    if c.tokens.detailed:
        return c.tokens.ids[1] - Vocab.STYLE0
    return max(c.motion.style_id, 0)


def encode_clips(clips: Sequence[Clip]) -> bytes:
    if not clips:
        raise FormatError("cannot encode an empty clip list")
    frames, joints, _ = clips[0].motion.poses.shape
    d_audio = clips[0].track.features.shape[1]
    parts = [DATASET_MAGIC, struct.pack("<4I", len(clips), frames, joints, d_audio)]
    for c in clips:
        poses = np.asarray(c.motion.poses, dtype="<f4")
        feats = np.asarray(c.track.features, dtype="<f4")
        if poses.shape != (frames, joints, 2) or feats.shape != (frames, d_audio):
            raise FormatError("all clips in a container must share frames/joints/features")
        parts.append(struct.pack("<HBBf", _stored_style(c), SOURCES.index(c.source), _detail_byte(c.tokens),
                                 c.track.tempo_bpm))
        parts.append(poses.tobytes())
        parts.append(feats.tobytes())
        beats = np.asarray(c.track.beat_times, dtype="<f4")
        parts.append(struct.pack("<H", len(beats)))
        parts.append(beats.tobytes())
    return b"".join(parts)


def decode_clips(blob: bytes, fps: float = FPS) -> list[Clip]:
    if len(blob) < 24 or blob[:8] != DATASET_MAGIC:
        raise FormatError("not a dataset container (bad magic or version)")
    n, frames, joints, d_audio = struct.unpack_from("<4I", blob, 8)
    off = 24
    clips = []
    pose_bytes, feat_bytes = frames * joints * 2 * 4, frames * d_audio * 4
    try:
        for _ in range(n):
            style, source, detail, tempo = struct.unpack_from("<HBBf", blob, off)
            off += 8
            poses = np.frombuffer(blob, "<f4", frames * joints * 2, off).reshape(frames, joints, 2)
            off += pose_bytes
            feats = np.frombuffer(blob, "<f4", frames * d_audio, off).reshape(frames, d_audio)
            off += feat_bytes
            (nb,) = struct.unpack_from("<H", blob, off)
            off += 2
            beats = np.frombuffer(blob, "<f4", nb, off)
            off += 4 * nb
            if source >= len(SOURCES):
                raise FormatError(f"unknown source tag {source}")
            track = AudioTrack(float(tempo), frames / fps, beats.astype(np.float64), feats.astype(np.float64), fps)
            motion = MotionClip(poses.astype(np.float64), fps, int(style), SOURCES[source])
            clips.append(Clip(motion, track, _tokens_from(int(style), int(detail))))
    except (struct.error, ValueError) as err:
        if isinstance(err, FormatError):
            raise
        raise FormatError(f"truncated or corrupt container: {err}") from None
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after {n} clips")
    return clips


def manifest_lines(clips: Sequence[Clip]) -> list[str]:
    lines = []
    for i, c in enumerate(clips):
        sid = _stored_style(c)
        style = STYLES[sid].name if sid < len(STYLES) else str(sid)
        lines.append(f"{i},{style},{c.track.tempo_bpm:g},{c.source},{c.split}")
    return lines


def save_dataset(ds: Dataset | Sequence[Clip], path, manifest: bool = True) -> None:
    clips = ds.clips if isinstance(ds, Dataset) else list(ds)
    path = Path(path)
    path.write_bytes(encode_clips(clips))
    if manifest:
        manifest_path(path).write_text("\n".join(manifest_lines(clips)) + "\n", encoding="utf-8")


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.csv")


def load_dataset(path, fps: float = FPS) -> Dataset:
    path = Path(path)
    clips = decode_clips(path.read_bytes(), fps)
    mpath = manifest_path(path)
    if mpath.exists():
        rows = [ln.split(",") for ln in mpath.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if len(rows) != len(clips):
            raise FormatError(f"manifest lists {len(rows)} clips, container holds {len(clips)}")
        for clip, row in zip(clips, rows):
            clip.split = row[4]
    spec = replace(DatasetSpec(), frames=clips[0].motion.frames, joints=clips[0].motion.poses.shape[1], fps=fps)
    return Dataset(clips, spec)
