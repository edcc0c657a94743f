"""Layer adaptability: how gracefully does sampling degrade when one block is skipped?

Each block of a trained base is bypassed in turn during guided sampling and
the resulting clips are scored with a motion-quality proxy. Blocks whose
removal barely hurts quality are the ones we can modulate with audio
without dragging the model off its prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import AudioTrack, ConditionTokens, _rest_pose, parents
from .model import Model, SamplerSettings, generate
from .numerics import make_rng

UNTRAINED_LOSS = 10.0


class ProbeError(ValueError):
    pass


def default_k(n_layers: int) -> int:
    """A third of the layers, rounded."""
    return round(n_layers / 3)


def _bones(joints: int) -> list[tuple[int, int]]:
    return [(j, p) for j, p in enumerate(parents(joints)) if p >= 0]


def pose_validity(poses: np.ndarray, bound: float = 1.0) -> float:
    """Mean of the in-bounds coordinate fraction and the fraction of plausible bone lengths.

    A bone is plausible when its length stays within [0.5, 1.5] times its rest length.
    """
    poses = np.asarray(poses, dtype=np.float64)
    in_bounds = float(np.mean(np.abs(poses) <= bound))
    joints = poses.shape[-2]
    rest = _rest_pose(joints)
    ratios = []
    for j, p in _bones(joints):
        ref = np.linalg.norm(rest[j] - rest[p])
        ratios.append(np.linalg.norm(poses[..., j, :] - poses[..., p, :], axis=-1) / ref)
    ratios = np.stack(ratios, axis=-1) if ratios else np.ones(1)
    bones_ok = float(np.mean((ratios >= 0.5) & (ratios <= 1.5)))
    return 0.5 * (in_bounds + bones_ok)


def mean_sq_jerk(poses: np.ndarray) -> float:
    poses = np.asarray(poses, dtype=np.float64)
    axis = poses.ndim - 3  # frame axis of (F, J, 2) or (B, F, J, 2)
    if poses.shape[axis] < 4:
        return 0.0
    jerk = np.diff(poses, n=3, axis=axis)
    return float(np.mean(jerk * jerk))


def smoothness(poses: np.ndarray, reference_jerk: float) -> float:
    """``ref / (ref + jerk)``: 0.5 when as smooth as the reference, toward 1 when smoother."""
    j = mean_sq_jerk(poses)
    if reference_jerk <= 0:
        return 1.0 if j == 0 else 0.0
    return reference_jerk / (reference_jerk + j)


@dataclass
class AdaptabilityReport:
    scores: list[float]
    validity: list[float]
    smoothness: list[float]
    k: int
    reference_score: float = float("nan")
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise ProbeError("adaptability scores must be finite")
        if not 0 <= self.k <= len(self.scores):
            raise ProbeError(f"k={self.k} outside [0, {len(self.scores)}]")

    @property
    def n_layers(self) -> int:
        return len(self.scores)

    @property
    def ranking(self) -> list[int]:
        """Layers from most to least adaptable; ties go to the lower index."""
        return sorted(range(self.n_layers), key=lambda l: (-self.scores[l], l))

    @property
    def selected(self) -> tuple[int, ...]:
        return select_layers(self, self.k)

    def to_csv(self) -> str:
        rank = {l: r for r, l in enumerate(self.ranking)}
        chosen = set(self.selected)
        rows = ["layer,score,rank,selected"]
        rows += [f"{l},{s:.8f},{rank[l]},{int(l in chosen)}" for l, s in enumerate(self.scores)]
        return "\n".join(rows) + "\n"

    def series_csv(self) -> str:
        rows = ["layer,score,validity,smoothness"]
        rows += [f"{l},{s:.8f},{v:.8f},{m:.8f}"
                 for l, (s, v, m) in enumerate(zip(self.scores, self.validity, self.smoothness))]
        return "\n".join(rows) + "\n"


def select_layers(report: AdaptabilityReport | Sequence[float], k: int) -> tuple[int, ...]:
    """Indices of the ``k`` highest-scoring layers, sorted ascending."""
    scores = report.scores if isinstance(report, AdaptabilityReport) else list(report)
    if not 0 <= k <= len(scores):
        raise ProbeError(f"k={k} outside [0, {len(scores)}]")
    ranking = sorted(range(len(scores)), key=lambda l: (-scores[l], l))
    return tuple(sorted(ranking[:k]))


def default_eval_set(tracks: Sequence[AudioTrack], n_styles: int = 6) -> list[tuple[ConditionTokens, AudioTrack]]:
    return [(ConditionTokens.detailed_caption(i % n_styles), t) for i, t in enumerate(tracks)]


def probe_layers(
    model: Model,
    eval_set: Sequence[tuple[ConditionTokens, AudioTrack]],
    n_samples: int,
    seed: int,
    k: int | None = None,
    w_validity: float = 0.5,
    w_smooth: float = 0.5,
    settings: SamplerSettings = SamplerSettings(steps=20),
    final_loss: float | None = None,
) -> AdaptabilityReport:
    """Score every block by the quality of clips sampled with that block skipped.

    All layers share the same initial noise so differences come from the
    skip alone. ``final_loss`` (from the base checkpoint) triggers a warning
    when it suggests the base is untrained.
    """
    if n_samples < 1 or not eval_set:
        raise ProbeError("probe needs at least one sample and one evaluation pair")
    L = model.cfg.layers
    k = default_k(L) if k is None else k
    warnings = []
    if final_loss is None or final_loss > UNTRAINED_LOSS:
        warnings.append(f"base checkpoint looks untrained (final loss {final_loss}); scores are not meaningful")
    pairs = [eval_set[i % len(eval_set)] for i in range(n_samples)]
    cond = np.array([c.ids for c, _ in pairs], dtype=np.int64)
    audio = np.stack([t.features for _, t in pairs])

    def run(skip):
        return generate(model, cond, audio, make_rng(seed, 31), settings=settings, skip_layer=skip)

    ref = run(None)
    ref_jerk = mean_sq_jerk(ref)
    ref_q = w_validity * pose_validity(ref) + w_smooth * smoothness(ref, ref_jerk)
    scores, valid, smooth = [], [], []
    for layer in range(L):
        clips = run(layer)
        v, s = pose_validity(clips), smoothness(clips, ref_jerk)
        valid.append(v)
        smooth.append(s)
        scores.append(w_validity * v + w_smooth * s)
    return AdaptabilityReport(scores, valid, smooth, k, ref_q, warnings)
