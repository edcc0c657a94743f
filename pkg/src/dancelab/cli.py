"""``dancelab`` command line: datagen, train, probe, sample, eval, report.

Each subcommand resolves its settings from built-in defaults, an optional
``--config`` key=value file and explicit flags (flags win), then writes the
resolved configuration next to its outputs. Exit codes: 0 success, 2 usage
or configuration error, 3 runtime or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import config as rc
from . import plotting
from .data import (STYLES, ConditionTokens, DataError, DatasetSpec, held_out_tracks, load_dataset,
                   make_dataset, resample_track, save_dataset, synth_track)
from .metrics import MetricError, energy_series_csv, evaluate_clips, kinematic_peaks
from .model import ModelConfig, ModelError, SamplerSettings, build_model
from .numerics import make_rng
from .pipeline import (LOW_RANK, VARIANTS, as_clips, generate_clips, run_probe, score_model, tempo_ratios,
                       untrained, variant_setup)
from .probe import ProbeError, default_k
from .training import (CheckpointError, LossCurve, TrainConfig, TrainingError, guidance_warning, load_checkpoint,
                       save_checkpoint, train_adapters, train_base)

log = logging.getLogger("dancelab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


DEFAULTS = {
    "datagen": {"n_structured": "320", "n_wild": "320", "tempo_min": "80", "tempo_max": "160", "tempo_step": "4",
                "p_base": "0.1", "seed": "0", "output": "dataset.mids"},
    "train": {"stage": "base", "data": "dataset.mids", "steps": "4000", "batch_size": "16", "lr": "1e-4",
              "p_cond_drop": "0.1", "p_base": "0.1", "beta0": "3", "decay": "6", "seed": "0", "gamma": "6.0",
              "lora_rank": "16", "layers": "8", "d_model": "64", "heads": "4", "attention": "global",
              "eval_every": "200", "uniform_schedule": "false", "feature_addition": "false",
              "no_zica_selection": "false"},
    "probe": {"n_samples": "12", "seed": "0", "w_validity": "0.5", "w_smooth": "0.5", "steps": "20",
              "output": "probe.csv"},
    "sample": {"n": "8", "seed": "0", "gamma": "6.0", "steps": "50", "speed": "1.0", "caption": "base",
               "output": "samples.mids"},
    "eval": {"clips": "samples.mids", "seed": "0", "tempo_seeds": "10", "steps": "50", "output": "metrics.json"},
    "report": {"data": "dataset.mids", "steps": "2000", "lr": "1e-4", "seed": "0", "n_eval": "16",
               "tempo_seeds": "10", "sample_steps": "50", "output": "report.csv"},
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override its entries")
    p.add_argument("--out", help=f"output directory (default ${rc.OUT_ENV} or ./runs)")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dancelab", description="Toy music-to-dance diffusion with audio adapters.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate the synthetic dance dataset")
    _common(p)
    p.add_argument("--n-structured", type=int)
    p.add_argument("--n-wild", type=int)
    p.add_argument("--tempo-min", type=float)
    p.add_argument("--tempo-max", type=float)
    p.add_argument("--tempo-step", type=float)
    p.add_argument("--p-base", type=float)
    p.add_argument("--output")

    p = sub.add_parser("train", help="train the base model or the audio adapters")
    _common(p)
    p.add_argument("--stage", choices=("base", "adapter"))
    p.add_argument("--data")
    p.add_argument("--base-ckpt")
    p.add_argument("--resume")
    p.add_argument("--steps", type=int)
    p.add_argument("--desk", action="store_const", const=True, help="desk preset: 2000 steps")
    p.add_argument("--until", type=int, help="stop after this step; resume later with --resume")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--p-cond-drop", type=float)
    p.add_argument("--p-base", type=float)
    p.add_argument("--beta0", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--gamma", type=float, help="guidance scale recorded for sampling")
    p.add_argument("--lora-rank", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--attention", choices=("global", "windowed"))
    p.add_argument("--zica-layers", help="comma-separated layer indices (skips the probe)")
    p.add_argument("--probe-csv", help="take the selected layers from a probe report")
    p.add_argument("--no-zica-selection", action="store_const", const=True, help="cross-attention at every layer")
    p.add_argument("--uniform-schedule", action="store_const", const=True, help="beta fixed at 1")
    p.add_argument("--feature-addition", action="store_const", const=True,
                   help="add projected audio features per frame instead of cross-attention")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--output")

    p = sub.add_parser("probe", help="rank layers by adaptability")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--w-validity", type=float)
    p.add_argument("--w-smooth", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--output")

    p = sub.add_parser("sample", help="generate clips for held-out or given tempos")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--tempo", type=float, help="fixed tempo; default cycles the held-out tempos")
    p.add_argument("--speed", type=float, help="resample the track by this factor before generation")
    p.add_argument("--caption", help="'base' or a style name")
    p.add_argument("--gamma", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--output")

    p = sub.add_parser("eval", help="score generated clips")
    _common(p)
    p.add_argument("--clips")
    p.add_argument("--ckpt", help="model for the tempo response")
    p.add_argument("--base-ckpt", help="base model for prior drift")
    p.add_argument("--tempo-seeds", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--output")

    p = sub.add_parser("report", help="compare base, adapted and ablated models")
    _common(p)
    p.add_argument("--base-ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--steps", type=int, help="adapter steps per variant")
    p.add_argument("--lr", type=float)
    p.add_argument("--n-eval", type=int)
    p.add_argument("--tempo-seeds", type=int)
    p.add_argument("--sample-steps", type=int)
    p.add_argument("--lora-rank", type=int, help="rank for the low-rank variant")
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--no-zica-selection", action="store_const", const=True)
    p.add_argument("--uniform-schedule", action="store_const", const=True)
    p.add_argument("--feature-addition", action="store_const", const=True)
    p.add_argument("--output")
    return parser


_FLAG_ONLY = {"config", "out", "command", "verbose"}


def resolve(args: argparse.Namespace) -> tuple[dict[str, str], Path]:
    base = dict(DEFAULTS[args.command])
    if args.config:
        base.update(rc.load_config(args.config))
    flags = {k: v for k, v in vars(args).items() if k not in _FLAG_ONLY}
    values = rc.merge(base, flags)
    if args.command == "train" and args.desk and args.steps is None:
        values["steps"] = "2000"
    out = rc.output_root(args.out)
    return values, out


def _path(out: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() or p.parent != Path(".") else out / p


def _write_config(out: Path, name: str, values) -> None:
    (out / f"{name}.config").write_text(rc.render(values), encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_datagen(values, out: Path) -> int:
    g = lambda k, t=str: rc.get(values, k, t)
    lo, hi = g("tempo_min", float), g("tempo_max", float)
    spec = DatasetSpec(n_structured=g("n_structured", int), n_wild=g("n_wild", int), tempo_min=lo, tempo_max=hi,
                       tempo_step=g("tempo_step", float), seed=g("seed", int), p_base=g("p_base", float))
    try:
        spec.validate()
    except DataError as e:
        raise UsageError(str(e)) from e
    ds = make_dataset(spec)
    out.mkdir(parents=True, exist_ok=True)
    path = _path(out, g("output"))
    save_dataset(ds, path)
    _write_config(out, "datagen", values)
    print(f"wrote {len(ds)} clips to {path}")
    return EXIT_OK


def _model_config(values) -> ModelConfig:
    g = lambda k, t: rc.get(values, k, t)
    try:
        return ModelConfig(layers=g("layers", int), d_model=g("d_model", int), heads=g("heads", int),
                           lora_rank=g("lora_rank", int), attention=g("attention", str))
    except ModelError as e:
        raise UsageError(str(e)) from e


def _select_layers(values, ckpt, spec, out, seed) -> tuple[int, ...]:
    L = ckpt.cfg.layers
    if rc.get(values, "no_zica_selection", bool):
        return tuple(range(L))
    if "zica_layers" in values:
        return rc.get(values, "zica_layers", tuple)
    if "probe_csv" in values:
        rows = Path(values["probe_csv"]).read_text().strip().splitlines()[1:]
        return tuple(int(r.split(",")[0]) for r in rows if r.split(",")[3] == "1")
    report = run_probe(ckpt, spec, seed)
    (out / "probe.csv").write_text(report.to_csv())
    plotting.plot_adaptability(report, out / "probe.png")
    return report.selected


def cmd_train(values, out: Path) -> int:
    g = lambda k, t=str: rc.get(values, k, t)
    stage = g("stage")
    if stage == "adapter" and "base_ckpt" not in values:
        raise UsageError("--stage adapter needs --base-ckpt")
    steps = g("steps", int)
    beta0 = 1.0 if g("uniform_schedule", bool) else g("beta0", float)
    try:
        tcfg = TrainConfig(stage=stage, steps=steps, batch_size=g("batch_size", int), lr=g("lr", float),
                           p_cond_drop=g("p_cond_drop", float), p_base=g("p_base", float), beta0=beta0,
                           decay=g("decay", float), seed=g("seed", int), eval_every=g("eval_every", int))
    except ValueError as e:
        raise UsageError(str(e)) from e
    values = dict(values, steps=str(steps), beta0=str(beta0))
    until = g("until", int)
    log.info("training %s stage: steps=%d lr=%g beta0=%g gamma=%g", stage, steps, tcfg.lr, beta0, g("gamma", float))
    ds = load_dataset(_path(out, g("data")))
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(values["resume"]) if "resume" in values else None
    if stage == "base":
        mcfg = resume.cfg if resume else _model_config(values)
        model = build_model(mcfg, make_rng(tcfg.seed, 1))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            ckpt, curve = train_base(model, ds, tcfg, resume=resume, until=until)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    else:
        base = load_checkpoint(values["base_ckpt"])
        if base.stage != "base":
            raise UsageError("--base-ckpt must be a base-stage checkpoint")
        spec = replace(ds.spec, seed=tcfg.seed)
        layers = _select_layers(values, base, spec, out, tcfg.seed)
        mcfg = replace(base.cfg, zica_layers=layers, lora_rank=g("lora_rank", int), attention=g("attention"),
                       adapter_kind="feature_addition" if g("feature_addition", bool) else "zica")
        values["zica_layers"] = ",".join(map(str, layers))
        ckpt, curve = train_adapters(base, ds, tcfg, mcfg, resume=resume, until=until)
    ckpt.train["gamma"] = g("gamma", float)
    path = _path(out, values.get("output", f"{stage}.mick"))
    save_checkpoint(ckpt, path)
    curve_path = path.with_name(path.stem + "_loss.csv")
    if resume is not None and curve_path.exists():
        curve = LossCurve.from_csv(curve_path.read_text()).extend(curve)
    curve_path.write_text(curve.to_csv())
    plotting.plot_loss_curve(curve, path.with_name(path.stem + "_loss.png"))
    _write_config(out, f"train_{stage}", values)
    print(f"wrote {path} (step {ckpt.step}, final loss {ckpt.final_loss:.4f})")
    return EXIT_OK


def cmd_probe(values, out: Path) -> int:
    g = lambda k, t=str: rc.get(values, k, t)
    ckpt = load_checkpoint(values["ckpt"])
    k = g("k", int) if "k" in values else default_k(ckpt.cfg.layers)
    if not 0 <= k <= ckpt.cfg.layers:
        raise UsageError(f"--k must lie in [0, {ckpt.cfg.layers}]")
    report = run_probe(ckpt, DatasetSpec(seed=g("seed", int)), g("seed", int), g("n_samples", int), k,
                       w_validity=g("w_validity", float), w_smooth=g("w_smooth", float),
                       settings=SamplerSettings(steps=g("steps", int)))
    out.mkdir(parents=True, exist_ok=True)
    path = _path(out, g("output"))
    path.write_text(report.to_csv())
    path.with_name(path.stem + "_series.csv").write_text(report.series_csv())
    plotting.plot_adaptability(report, path.with_suffix(".png"))
    _write_config(out, "probe", values)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"selected layers {list(report.selected)}")
    return EXIT_OK


def _caption(name: str) -> ConditionTokens:
    if name == "base":
        return ConditionTokens.base()
    names = [s.name for s in STYLES]
    if name not in names:
        raise UsageError(f"unknown caption {name!r}; use 'base' or one of {names}")
    return ConditionTokens.detailed_caption(names.index(name))


def cmd_sample(values, out: Path) -> int:
    g = lambda k, t=str: rc.get(values, k, t)
    ckpt = load_checkpoint(values["ckpt"])
    n, seed, speed, gamma = g("n", int), g("seed", int), g("speed", float), g("gamma", float)
    if n < 1 or not speed > 0 or gamma < 1:
        raise UsageError("need n >= 1, speed > 0 and gamma >= 1")
    caption = _caption(g("caption"))
    spec = DatasetSpec(frames=ckpt.cfg.frames, joints=ckpt.cfg.joints)
    if "tempo" in values:
        rng = make_rng(seed, 7919)
        tracks = [synth_track(g("tempo", float), spec.frames / spec.fps, spec.fps, rng) for _ in range(n)]
    else:
        tracks = held_out_tracks(spec, n, seed)
    if speed != 1.0:
        tracks = [resample_track(t, speed) for t in tracks]
    msg = guidance_warning(ckpt, gamma)
    if msg:
        print(f"warning: {msg}", file=sys.stderr)
    clips = generate_clips(ckpt.model, tracks, caption, seed, SamplerSettings(steps=g("steps", int), gamma=gamma))
    out.mkdir(parents=True, exist_ok=True)
    path = _path(out, g("output"))
    save_dataset(as_clips(clips, tracks, caption), path)
    _write_config(out, "sample", values)
    print(f"wrote {len(clips)} clips to {path}")
    return EXIT_OK


def cmd_eval(values, out: Path) -> int:
    g = lambda k, t=str: rc.get(values, k, t)
    ds = load_dataset(_path(out, g("clips")))
    clips = [c.motion for c in ds.clips]
    tracks = [c.track for c in ds.clips]
    settings = SamplerSettings(steps=g("steps", int))
    drift, tempo = 0.0, {}
    if "ckpt" in values:
        model = load_checkpoint(values["ckpt"]).model
        ref = synth_track(120.0, tracks[0].duration_s, tracks[0].fps, offset=0.25)
        tempo = tempo_ratios(model, ref, g("tempo_seeds", int), g("seed", int), ConditionTokens.base(),
                             settings=settings)
        if "base_ckpt" in values:
            from .metrics import prior_drift

            base = load_checkpoint(values["base_ckpt"]).model
            drift = prior_drift(base, model, ConditionTokens.base().ids, len(clips), g("seed", int), settings)
    report = evaluate_clips(clips, tracks, label=str(values.get("clips")), prior_drift=drift, tempo=tempo)
    out.mkdir(parents=True, exist_ok=True)
    path = _path(out, g("output"))
    path.write_text(report.to_json())
    path.with_name(path.stem + "_breakdown.csv").write_text(report.breakdown_csv())
    path.with_name(path.stem + "_energy.csv").write_text(energy_series_csv(clips[0], tracks[0]))
    plotting.plot_energy(clips[0], tracks[0], path.with_name(path.stem + "_energy.png"), kinematic_peaks(clips[0]))
    _write_config(out, "eval", values)
    print(f"beat alignment {report.beat_alignment:.3f}, diversity {report.diversity:.4f}")
    return EXIT_OK


REPORT_COLUMNS = ("beat_alignment", "diversity", "prior_drift", "tempo_0.75", "tempo_1.25")


def cmd_report(values, out: Path) -> int:
    g = lambda k, t=str: rc.get(values, k, t)
    base = load_checkpoint(values["base_ckpt"])
    if base.stage != "base":
        raise UsageError("--base-ckpt must be a base-stage checkpoint")
    seed, steps = g("seed", int), g("steps", int)
    variants = _report_variants(values)
    low_rank = g("lora_rank", int) if "lora_rank" in values else LOW_RANK
    ds = load_dataset(_path(out, g("data")))
    spec = replace(ds.spec, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    tracks = held_out_tracks(spec, g("n_eval", int), seed + 1)
    settings = SamplerSettings(steps=g("sample_steps", int))
    n_tempo = g("tempo_seeds", int)

    report = run_probe(base, spec, seed)
    selected = report.selected
    (out / "probe.csv").write_text(report.to_csv())
    rows: dict[str, dict[str, float]] = {}
    rows["base"] = score_model(base.model, base.model, tracks, seed, n_tempo, settings).row()
    fresh_cfg = replace(base.cfg, zica_layers=selected)
    rows["untrained-adapters"] = score_model(untrained(base, fresh_cfg, seed), base.model, tracks, seed, n_tempo,
                                             settings).row()
    train = TrainConfig(stage="adapter", steps=steps, lr=g("lr", float), seed=seed)
    for name in variants:
        mcfg, tcfg = variant_setup(name, base.cfg, selected, train, low_rank=low_rank)
        log.info("report: training variant %s", name)
        ckpt, _ = train_adapters(base, ds, tcfg, mcfg)
        rows[name] = score_model(ckpt.model, base.model, tracks, seed, n_tempo, settings).row()

    path = _path(out, g("output"))
    lines = ["model," + ",".join(REPORT_COLUMNS)]
    lines += [name + "," + ",".join(f"{r.get(c, float('nan')):.6f}" for c in REPORT_COLUMNS) for name, r in rows.items()]
    path.write_text("\n".join(lines) + "\n")
    md = ["| model | " + " | ".join(REPORT_COLUMNS) + " |", "|---" * (len(REPORT_COLUMNS) + 1) + "|"]
    md += [f"| {name} | " + " | ".join(f"{r.get(c, float('nan')):.3f}" for c in REPORT_COLUMNS) + " |"
           for name, r in rows.items()]
    path.with_suffix(".md").write_text("\n".join(md) + "\n")
    path.with_suffix(".json").write_text(json.dumps({"selected_layers": list(selected), "rows": rows},
                                                    indent=2, sort_keys=True))
    plotting.plot_comparison(rows, "beat_alignment", path.with_name(path.stem + "_alignment.png"))
    _write_config(out, "report", values)
    print("\n".join(md))
    return EXIT_OK


def _report_variants(values) -> list[str]:
    """Variants named by --variants or the toggle flags; all of them when neither is given."""
    if "variants" in values:
        variants = [v for v in values["variants"].split(",") if v]
    else:
        toggles = []
        if rc.get(values, "no_zica_selection", bool, False):
            toggles.append("no-zica-selection")
        if "lora_rank" in values:
            toggles.append("no-lora" if rc.get(values, "lora_rank", int) == 0 else "low-rank")
        if rc.get(values, "uniform_schedule", bool, False):
            toggles.append("uniform-schedule")
        if rc.get(values, "feature_addition", bool, False):
            toggles.append("feature-addition")
        variants = ["full", *toggles] if toggles else list(VARIANTS)
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise UsageError(f"unknown variants {sorted(unknown)}")
    return variants


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "probe": cmd_probe, "sample": cmd_sample,
            "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        values, out = resolve(args)
        return COMMANDS[args.command](values, out)
    except (UsageError, rc.ConfigError) as e:
        print(f"dancelab {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataError, CheckpointError, TrainingError, ModelError, MetricError, ProbeError,
            ValueError) as e:
        print(f"dancelab {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
