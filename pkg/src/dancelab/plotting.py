"""File-only figures (Agg backend) for training curves, probes and energy traces."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import AudioTrack, MotionClip  # noqa: E402
from .metrics import kinetic_energy  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(curve, path, window: int = 50) -> Path:
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    steps = np.asarray(curve.step)
    loss = np.asarray(curve.loss)
    ax1.plot(steps, loss, lw=0.5, alpha=0.4, label="per step")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax1.plot(steps[window - 1:], smooth, lw=1.5, label=f"{window}-step mean")
    ax1.set_yscale("log")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(steps, curve.beta)
    ax2.set_ylabel("beta")
    ax2.set_xlabel("step")
    return _save(fig, path)


def plot_adaptability(report, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    layers = np.arange(report.n_layers)
    chosen = set(report.selected)
    colors = ["tab:orange" if l in chosen else "tab:blue" for l in layers]
    ax.bar(layers, report.scores, color=colors)
    if np.isfinite(report.reference_score):
        ax.axhline(report.reference_score, color="k", ls="--", lw=1, label="no skip")
        ax.legend()
    ax.set_xlabel("skipped layer")
    ax.set_ylabel("quality")
    ax.set_xticks(layers)
    return _save(fig, path)


def plot_energy(clip: MotionClip, track: AudioTrack, path, peaks: Sequence[float] = ()) -> Path:
    energy = kinetic_energy(clip.poses)
    t = (np.arange(len(energy)) + 0.5) / clip.fps
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(t, energy, marker=".")
    for b in track.beat_times:
        ax.axvline(b, color="tab:red", lw=0.8, alpha=0.6)
    if len(peaks):
        ax.plot(peaks, np.interp(peaks, t, energy), "kx")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("kinetic energy")
    return _save(fig, path)


def plot_comparison(rows: Mapping[str, Mapping[str, float]], metric: str, path) -> Path:
    names = list(rows)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.barh(names, [rows[n][metric] for n in names])
    ax.set_xlabel(metric.replace("_", " "))
    ax.invert_yaxis()
    return _save(fig, path)
