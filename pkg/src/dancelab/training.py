"""Two-stage training: a text-only base, then frozen-base adapter training.

Every step draws its randomness from its own stream ``make_rng(seed, stage,
step)``, so a run resumed from a checkpoint at step k replays exactly the
draws an uninterrupted run would make from step k on.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import adapters as ad
from .data import ConditionTokens, Dataset, diversify_caption
from .diffusion import ScheduleState, advance_schedule, edm_loss, sample_noise_level
from .model import Model, ModelConfig, forward, null_condition, weights_hash
from .numerics import Adam, NonFiniteError, evaluate_with_gradients, make_rng, rng_state

log = logging.getLogger(__name__)

STAGES = ("base", "adapter")
_STAGE_KEY = {"base": 11, "adapter": 23}


class TrainingError(RuntimeError):
    pass


class FreezeViolation(AssertionError):
    pass


@dataclass
class TrainConfig:
    stage: str = "base"
    steps: int = 4000
    batch_size: int = 16
    lr: float = 1e-4
    p_cond_drop: float = 0.1
    p_base: float = 0.1
    beta0: float = 3.0
    decay: float = 6.0
    seed: int = 0
    eval_every: int = 200
    checkpoint: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        for name in ("p_cond_drop", "p_base"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.beta0 < 1:
            raise ValueError("beta0 must be >= 1")

    def schedule(self, sigma_range) -> ScheduleState:
        # the base stage always draws log-uniform noise levels (beta = 1)
        beta0 = 1.0 if self.stage == "base" else self.beta0
        return ScheduleState(beta0, self.steps, self.decay, 0, sigma_range)


@dataclass
class LossCurve:
    step: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)
    sigma_mean: list[float] = field(default_factory=list)

    def append(self, step, loss, beta, sigma_mean):
        self.step.append(int(step))
        self.loss.append(float(loss))
        self.beta.append(float(beta))
        self.sigma_mean.append(float(sigma_mean))

    def extend(self, other: "LossCurve") -> "LossCurve":
        return LossCurve(self.step + other.step, self.loss + other.loss,
                         self.beta + other.beta, self.sigma_mean + other.sigma_mean)

    def to_csv(self) -> str:
        rows = ["step,loss,beta,sigma_mean"]
        rows += [f"{s},{l:.8g},{b:.8g},{m:.8g}" for s, l, b, m in zip(self.step, self.loss, self.beta, self.sigma_mean)]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "LossCurve":
        curve = cls()
        for line in text.strip().splitlines()[1:]:
            s, l, b, m = line.split(",")
            curve.append(int(s), float(l), float(b), float(m))
        return curve

    def window_mean(self, start: int, stop: int) -> float:
        return float(np.mean(self.loss[start:stop]))


@dataclass
class Checkpoint:
    cfg: ModelConfig
    base: dict[str, np.ndarray]
    adapters: ad.AdapterSet | None = None
    stage: str = "base"
    step: int = 0
    optimizer_t: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    schedule: ScheduleState | None = None
    rng: dict | None = None
    train: dict = field(default_factory=dict)
    final_loss: float | None = None
    version: int = 1

    @property
    def model(self) -> Model:
        return Model(self.cfg, self.base, self.adapters)

    def base_hash(self) -> str:
        return weights_hash(self.base)


# --------------------------------------------------------------------------
# batches


@dataclass
class TrainArrays:
    """Dataset flattened into stacked arrays for fast batch assembly."""

    motion: np.ndarray  # N x F x J x 2
    audio: np.ndarray  # N x F x D_AUDIO
    tokens: list[ConditionTokens]
    structured: np.ndarray
    wild: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset, split: str = "train", dtype=np.float32) -> "TrainArrays":
        clips = ds.clips
        idx = ds.indices(split)
        if len(idx) == 0:
            raise TrainingError(f"dataset has no {split!r} clips")
        motion = np.stack([c.motion.poses for c in clips]).astype(dtype)
        audio = np.stack([c.track.features for c in clips]).astype(dtype)
        return cls(motion, audio, [c.tokens for c in clips],
                   ds.indices(split, "structured"), ds.indices(split, "wild"))


@dataclass
class Batch:
    x: np.ndarray
    audio: np.ndarray
    cond: np.ndarray
    gate: np.ndarray  # 1 keeps the conditions, 0 marks the unconditional fraction
    sigma: np.ndarray
    noise: np.ndarray
    beta: float


def draw_condition_mask(rng: np.random.Generator, n: int, p_drop: float) -> np.ndarray:
    """Boolean mask, True where the example is trained unconditionally."""
    return rng.random(n) < p_drop


def _draw_indices(data: TrainArrays, n: int, offset: int, rng: np.random.Generator) -> np.ndarray:
    # alternate structured and wild examples so the mix stays 1:1 across steps
    pools = [p for p in (data.structured, data.wild) if len(p)]
    out = np.empty(n, dtype=int)
    for i in range(n):
        pool = pools[(offset + i) % len(pools)]
        out[i] = pool[rng.integers(len(pool))]
    return out


def make_batch(data: TrainArrays, cfg: TrainConfig, schedule: ScheduleState, step: int) -> Batch:
    rng = make_rng(cfg.seed, _STAGE_KEY[cfg.stage], step)
    B = cfg.batch_size
    idx = _draw_indices(data, B, step * B, rng)
    tokens = [diversify_caption(data.tokens[i], cfg.p_base, rng) for i in idx]
    drop = draw_condition_mask(rng, B, cfg.p_cond_drop)
    cond = np.array([t.ids for t in tokens], dtype=np.int64)
    cond[drop] = null_condition()
    sigma = sample_noise_level(schedule, rng, size=B)
    x = data.motion[idx]
    noise = (rng.standard_normal(x.shape) * sigma[:, None, None, None]).astype(x.dtype)
    return Batch(x, data.audio[idx], cond, (~drop).astype(x.dtype), sigma, noise, schedule.beta_current)


def batch_loss(model: Model, batch: Batch, params: Mapping, use_audio: bool):
    """Training objective on one batch; ``params`` holds the tracked tensors."""
    audio = batch.audio if use_audio else None
    gate = batch.gate if use_audio else None

    def denoiser(xn, sigma):
        return forward(model, xn, sigma, batch.cond, audio, gate=gate, params=params)

    return edm_loss(denoiser, batch.x, batch.sigma, batch.noise)


# --------------------------------------------------------------------------
# training loops


GradHook = Callable[[int, Mapping[str, np.ndarray]], None]


def _run(model: Model, data: TrainArrays, cfg: TrainConfig, trainable: dict[str, np.ndarray],
         apply: Callable[[dict[str, np.ndarray]], Model], start: Checkpoint | None,
         use_audio: bool, grad_hook: GradHook | None,
         until: int | None = None) -> tuple[Model, dict, Adam, ScheduleState, LossCurve]:
    opt = Adam(lr=cfg.lr)
    schedule = cfg.schedule(model.cfg.sigma_range)
    first = 0
    if start is not None:
        first = start.step
        opt.load_state(start.optimizer_t, start.optimizer)
        schedule = start.schedule
        if first > cfg.steps:
            raise TrainingError(f"checkpoint step {first} is beyond the requested {cfg.steps} steps")
    last = cfg.steps if until is None else until
    if not first <= last <= cfg.steps:
        raise TrainingError(f"cannot stop at step {last}: run covers steps {first}..{cfg.steps}")
    curve = LossCurve()
    params = dict(trainable)
    for step in range(first, last):
        batch = make_batch(data, cfg, schedule, step)
        try:
            loss, grads = evaluate_with_gradients(lambda p: batch_loss(model, batch, p, use_audio), params)
        except NonFiniteError as err:
            raise TrainingError(f"loss diverged at step {step} ({err}, beta {batch.beta:.4f})") from err
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step} (value {loss}, beta {batch.beta:.4f})")
        if grad_hook is not None:
            grad_hook(step, grads)
        params = opt.step(params, grads)
        model = apply(params)
        curve.append(step, loss, batch.beta, float(np.mean(batch.sigma)))
        schedule = advance_schedule(schedule)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            log.info("%s step %d loss %.4f beta %.4f", cfg.stage, step + 1,
                     float(np.mean(curve.loss[-cfg.eval_every:])), batch.beta)
    return model, params, opt, schedule, curve


def _checkpoint(model: Model, cfg: TrainConfig, opt: Adam, schedule: ScheduleState, curve: LossCurve,
                prev_loss: float | None) -> Checkpoint:
    step = schedule.step
    final = curve.loss[-1] if curve.loss else prev_loss
    next_rng = make_rng(cfg.seed, _STAGE_KEY[cfg.stage], step)
    return Checkpoint(model.cfg, model.base, model.adapters, cfg.stage, step, opt.t,
                      dict(opt.state_arrays()), schedule, rng_state(next_rng), asdict(cfg), final)


def train_base(model: Model, dataset: Dataset | TrainArrays, cfg: TrainConfig,
               resume: Checkpoint | None = None, grad_hook: GradHook | None = None,
               until: int | None = None) -> tuple[Checkpoint, LossCurve]:
    """Text-conditioned denoiser training with condition dropout and log-uniform noise levels.

    ``until`` stops early (the checkpoint can be resumed to ``cfg.steps``).
    """
    if cfg.stage != "base":
        raise TrainingError("train_base needs stage='base'")
    if model.adapters is not None:
        raise TrainingError("base training expects a model without adapters")
    if cfg.p_cond_drop == 0:
        warnings.warn("p_cond_drop=0: the unconditional branch is never trained, guided sampling will be unreliable",
                      stacklevel=2)
    data = dataset if isinstance(dataset, TrainArrays) else TrainArrays.from_dataset(dataset)
    if resume is not None:
        _check_resume(resume, cfg, model.cfg)
        model = Model(model.cfg, resume.base)
    cfg_model = model.cfg

    def apply(params):
        return Model(cfg_model, params)

    model, _, opt, schedule, curve = _run(model, data, cfg, dict(model.base), apply, resume, False, grad_hook,
                                          until)
    return _checkpoint(model, cfg, opt, schedule, curve, resume.final_loss if resume else None), curve


def train_adapters(base_ckpt: Checkpoint | Model, dataset: Dataset | TrainArrays, cfg: TrainConfig,
                   model_cfg: ModelConfig | None = None, resume: Checkpoint | None = None,
                   grad_hook: GradHook | None = None, until: int | None = None) -> tuple[Checkpoint, LossCurve]:
    """Train only adapter parameters on top of a frozen base.

    ``model_cfg`` sets the adapter layout (ZICA layers, LoRA rank, adapter
    kind); it must agree with the base network's shapes.
    """
    if cfg.stage != "adapter":
        raise TrainingError("train_adapters needs stage='adapter'")
    base_model = base_ckpt.model if isinstance(base_ckpt, Checkpoint) else base_ckpt
    model_cfg = model_cfg or base_model.cfg
    if model_cfg.base_key() != base_model.cfg.base_key():
        raise TrainingError("adapter config does not match the base network")
    base = base_model.base
    frozen_hash = weights_hash(base)
    if resume is not None:
        _check_resume(resume, cfg, model_cfg)
        if resume.base_hash() != frozen_hash:
            raise TrainingError("resume checkpoint was trained on a different base")
        adapters = resume.adapters
    else:
        adapters = _fresh_adapters(model_cfg, cfg.seed, base)
    model = Model(model_cfg, base, adapters)
    data = dataset if isinstance(dataset, TrainArrays) else TrainArrays.from_dataset(dataset)

    def apply(params):
        return Model(model_cfg, base, adapters.with_arrays(params))

    model, _, opt, schedule, curve = _run(model, data, cfg, adapters.arrays(), apply, resume, True, grad_hook,
                                          until)
    if weights_hash(model.base) != frozen_hash:
        raise FreezeViolation("base weights changed during adapter training")
    return _checkpoint(model, cfg, opt, schedule, curve, resume.final_loss if resume else None), curve


def _fresh_adapters(model_cfg: ModelConfig, seed: int, base: Mapping[str, np.ndarray]) -> ad.AdapterSet:
    dtype = next(iter(base.values())).dtype
    return ad.init_adapters(model_cfg.d_model, model_cfg.d_audio, model_cfg.heads, model_cfg.zica_layers,
                            model_cfg.layers, model_cfg.lora_rank, model_cfg.lora_alpha,
                            make_rng(seed, 4243), kind=model_cfg.adapter_kind).astype(dtype)


def _check_resume(ckpt: Checkpoint, cfg: TrainConfig, model_cfg: ModelConfig) -> None:
    if ckpt.stage != cfg.stage:
        raise TrainingError(f"cannot resume a {ckpt.stage} checkpoint in the {cfg.stage} stage")
    if ckpt.cfg != model_cfg:
        raise TrainingError("resume checkpoint has a different model config")
    if ckpt.schedule is None:
        raise TrainingError("resume checkpoint carries no schedule state")
    if ckpt.schedule.total_steps != cfg.steps:
        raise TrainingError(f"checkpoint belongs to a {ckpt.schedule.total_steps}-step run, not {cfg.steps}")
    now = {k: v for k, v in asdict(cfg).items() if k not in ("steps", "eval_every", "checkpoint")}
    saved = {k: v for k, v in ckpt.train.items() if k in now}
    if saved and saved != now:
        diff = sorted(k for k in saved if saved[k] != now.get(k))
        raise TrainingError(f"resume config differs in {diff}")


def guidance_warning(ckpt: Checkpoint, gamma: float) -> str | None:
    """Message when guided sampling is requested from a model trained without condition dropout."""
    p = ckpt.train.get("p_cond_drop")
    if gamma != 1 and p == 0:
        return "model was trained with p_cond_drop=0; its unconditional branch is untrained"
    return None


# --------------------------------------------------------------------------
# checkpoint container

MAGIC = b"MICK"
VERSION = b"0001"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
_META = "__meta__"


class CheckpointError(ValueError):
    pass


def _encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + VERSION)
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(struct.pack("<B", code))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return out.getvalue()


def _decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if blob[4:8] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[4:8]!r}")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("checkpoint file is truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        (code,) = struct.unpack("<B", take(1))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).copy()
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the tensor directory")
    return out


def _native(arr: np.ndarray) -> np.ndarray:
    return arr.astype(arr.dtype.newbyteorder("="), copy=False)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = {f"base/{k}": v for k, v in ckpt.base.items()}
    if ckpt.adapters is not None:
        tensors.update({f"adapter/{k}": v for k, v in ckpt.adapters.arrays().items()})
    tensors.update({f"optim/{k}": v for k, v in ckpt.optimizer.items()})
    sched = None
    if ckpt.schedule is not None:
        s = ckpt.schedule
        sched = {"beta0": s.beta0, "total_steps": s.total_steps, "decay": s.decay, "step": s.step}
    meta = {
        "version": ckpt.version,
        "config": ckpt.cfg.to_dict(),
        "stage": ckpt.stage,
        "step": ckpt.step,
        "optimizer_t": ckpt.optimizer_t,
        "schedule": sched,
        "rng": _jsonable(ckpt.rng),
        "train": ckpt.train,
        "final_loss": ckpt.final_loss,
        "has_adapters": ckpt.adapters is not None,
        "lora_alpha": ckpt.adapters.lora_meta() if ckpt.adapters is not None else {},
    }
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors[_META] = np.frombuffer(raw, dtype=np.uint8)
    return _encode_tensors(tensors)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def decode_checkpoint(blob: bytes) -> Checkpoint:
    tensors = _decode_tensors(blob)
    if _META not in tensors:
        raise CheckpointError("checkpoint has no metadata record")
    meta = json.loads(tensors.pop(_META).tobytes().decode("utf-8"))
    cfg = ModelConfig.from_dict(meta["config"])
    base = {k[5:]: _native(v) for k, v in tensors.items() if k.startswith("base/")}
    adapters = None
    if meta["has_adapters"]:
        arrays = {k[8:]: _native(v) for k, v in tensors.items() if k.startswith("adapter/")}
        template = ad.init_adapters(cfg.d_model, cfg.d_audio, cfg.heads, cfg.zica_layers, cfg.layers,
                                    cfg.lora_rank, cfg.lora_alpha, make_rng(0), kind=cfg.adapter_kind)
        missing = set(template.arrays()) - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks adapter tensors {sorted(missing)[:3]}")
        adapters = template.with_arrays(arrays)
    optim = {k[6:]: _native(v) for k, v in tensors.items() if k.startswith("optim/")}
    sched = None
    if meta["schedule"] is not None:
        s = meta["schedule"]
        sched = ScheduleState(s["beta0"], s["total_steps"], s["decay"], s["step"], cfg.sigma_range)
    rng = meta["rng"]
    if rng is not None:
        rng = _restore_rng_arrays(rng)
    return Checkpoint(cfg, base, adapters, meta["stage"], meta["step"], meta["optimizer_t"], optim, sched,
                      rng, meta["train"], meta["final_loss"], meta["version"])


def _restore_rng_arrays(state: dict) -> dict:
    state = dict(state)
    inner = dict(state["state"])
    inner["counter"] = np.asarray(inner["counter"], dtype=np.uint64)
    inner["key"] = np.asarray(inner["key"], dtype=np.uint64)
    state["state"] = inner
    state["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
    return state


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = encode_checkpoint(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
