"""End-to-end orchestration shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import (AudioTrack, Clip, ConditionTokens, Dataset, DatasetSpec, MotionClip, held_out_tracks, make_dataset,
                   synth_track)
from .metrics import MetricError, beat_alignment_score, diversity_score, prior_drift, tempo_response
from .model import Model, ModelConfig, SamplerSettings, attach_adapters, build_model, generate
from .numerics import make_rng
from .probe import AdaptabilityReport, default_eval_set, default_k, probe_layers
from .training import Checkpoint, LossCurve, TrainArrays, TrainConfig, train_adapters, train_base

log = logging.getLogger(__name__)

DESK_STEPS = 2000
# at desk scale 2000 steps at 1e-4 barely move the adapters, and per-frame
# windows let the cross-attention lock onto the local beat
DESK_LR = 1e-3
DESK_ATTENTION = "windowed"
DESK_BATCH = 32
TEMPO_FACTORS = (0.75, 1.0, 1.25)
TEMPO_REFERENCE_BPM = 120.0
LOW_RANK = 4


def generate_clips(model: Model, tracks: Sequence[AudioTrack], caption: ConditionTokens, seed: int,
                   settings: SamplerSettings = SamplerSettings(), use_audio: bool = True) -> list[MotionClip]:
    """One clip per track, all with the same caption; each clip gets its own noise."""
    cond = np.tile(np.asarray(caption.ids, dtype=np.int64), (len(tracks), 1))
    audio = np.stack([t.features for t in tracks]) if use_audio else None
    x = generate(model, cond, audio, make_rng(seed, 101), settings=settings)
    return [MotionClip(p, t.fps, -1, "generated") for p, t in zip(x, tracks)]


def as_clips(motions: Sequence[MotionClip], tracks: Sequence[AudioTrack], caption: ConditionTokens) -> list[Clip]:
    return [Clip(m, t, caption, "test") for m, t in zip(motions, tracks)]


def tempo_ratios(model: Model, base_track: AudioTrack, n: int, seed: int, caption: ConditionTokens,
                 factors: Sequence[float] = TEMPO_FACTORS,
                 settings: SamplerSettings = SamplerSettings()) -> dict[float, float]:
    """Peak-rate ratio per speed factor, averaged over ``n`` independently seeded clips."""
    def gen(track, count, s):
        return generate_clips(model, [track] * count, caption, s, settings)

    try:
        return tempo_response(gen, base_track, factors, n, seed)
    except MetricError:
        return {f: float("nan") for f in factors}


@dataclass
class ModelScores:
    beat_alignment: float
    diversity: float
    prior_drift: float
    tempo: dict[float, float]

    def row(self) -> dict[str, float]:
        out = {"beat_alignment": self.beat_alignment, "diversity": self.diversity, "prior_drift": self.prior_drift}
        out.update({f"tempo_{f:g}": r for f, r in self.tempo.items() if f != 1.0})
        return out


def score_model(model: Model, base: Model, tracks: Sequence[AudioTrack], seed: int, n_tempo: int = 10,
                settings: SamplerSettings = SamplerSettings()) -> ModelScores:
    """Beat alignment on ``tracks`` under the fixed base caption, plus drift and tempo response."""
    caption = ConditionTokens.base()
    clips = generate_clips(model, tracks, caption, seed, settings)
    align = float(np.mean([beat_alignment_score(c, t) for c, t in zip(clips, tracks)]))
    div = diversity_score(clips)
    drift = prior_drift(base, model, caption.ids, len(tracks), seed, settings)
    ref = synth_track(TEMPO_REFERENCE_BPM, tracks[0].duration_s, tracks[0].fps, offset=0.25)
    tempo = tempo_ratios(model, ref, n_tempo, seed, caption, settings=settings)
    return ModelScores(align, div, drift, tempo)


def run_probe(ckpt: Checkpoint, spec: DatasetSpec, seed: int, n_samples: int = 12, k: int | None = None,
              **kw) -> AdaptabilityReport:
    tracks = held_out_tracks(spec, n_samples, seed)
    return probe_layers(ckpt.model, default_eval_set(tracks, len(spec.styles)), n_samples, seed, k=k,
                        final_loss=ckpt.final_loss, **kw)


VARIANTS = ("full", "no-zica-selection", "low-rank", "no-lora", "uniform-schedule", "feature-addition")


def variant_setup(name: str, base_cfg: ModelConfig, selected: Sequence[int], train: TrainConfig,
                  low_rank: int = LOW_RANK) -> tuple[ModelConfig, TrainConfig]:
    """Adapter model config and training config for one ablation variant."""
    cfg = replace(base_cfg, zica_layers=tuple(selected))
    if name == "full":
        pass
    elif name == "no-zica-selection":
        cfg = replace(cfg, zica_layers=tuple(range(base_cfg.layers)))
    elif name == "low-rank":
        cfg = replace(cfg, lora_rank=low_rank, lora_alpha=None)
    elif name == "no-lora":
        cfg = replace(cfg, lora_rank=0)
    elif name == "uniform-schedule":
        train = replace(train, beta0=1.0)
    elif name == "feature-addition":
        cfg = replace(cfg, adapter_kind="feature_addition")
    else:
        raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return cfg, train


@dataclass
class DeskRun:
    dataset: Dataset
    base: Checkpoint
    base_curve: LossCurve
    probe: AdaptabilityReport
    adapted: Checkpoint
    adapter_curve: LossCurve


def desk_run(seed: int = 0, base_steps: int = DESK_STEPS, adapter_steps: int = DESK_STEPS,
             spec: DatasetSpec | None = None, cfg: ModelConfig | None = None, lr: float = DESK_LR,
             batch_size: int = DESK_BATCH) -> DeskRun:
    """Dataset, base pre-training, layer probe, then adapter training on the selected layers."""
    spec = spec or DatasetSpec(seed=seed)
    cfg = cfg or ModelConfig(attention=DESK_ATTENTION)
    ds = make_dataset(spec)
    arrays = TrainArrays.from_dataset(ds)
    model = build_model(cfg, make_rng(seed, 1))
    bcfg = TrainConfig(stage="base", steps=base_steps, batch_size=batch_size, lr=lr, seed=seed)
    base, base_curve = train_base(model, arrays, bcfg)
    report = run_probe(base, spec, seed)
    acfg = replace(cfg, zica_layers=report.selected)
    tcfg = TrainConfig(stage="adapter", steps=adapter_steps, batch_size=batch_size, lr=lr, seed=seed)
    adapted, curve = train_adapters(base, arrays, tcfg, acfg)
    return DeskRun(ds, base, base_curve, report, adapted, curve)


def untrained(base: Checkpoint, cfg: ModelConfig, seed: int) -> Model:
    return attach_adapters(base.model, make_rng(seed, 4243), cfg)


__all__ = [
    "DESK_ATTENTION", "DESK_BATCH", "DESK_LR", "DESK_STEPS", "DeskRun", "LOW_RANK", "ModelScores", "TEMPO_FACTORS", "VARIANTS", "as_clips", "default_k",
    "desk_run", "generate_clips", "run_probe", "score_model", "tempo_ratios", "untrained", "variant_setup",
]
