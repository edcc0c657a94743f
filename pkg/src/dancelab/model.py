"""Toy conditional diffusion transformer over frame tokens of 2D poses.

One token per frame (the flattened J x 2 pose, linearly embedded), learned
absolute frame positions, a noise-level and caption embedding added to every
token, and a stack of pre-norm self-attention + MLP blocks. Network output is
wrapped in the usual denoiser preconditioning (skip/out/in/noise scalings
with data std 0.5).

Audio reaches the network only through an :class:`~dancelab.adapters.AdapterSet`;
when the audio argument is ``None`` the adapters' cross-attention is bypassed
and the model reduces to its text-only behaviour.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import adapters as ad
from .data import Vocab
from .diffusion import GuidanceConfig, SigmaRange, sample, sigma_grid
from .numerics import (
    Tensor,
    as_tensor,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    tanh,
)

SIGMA_DATA = 0.5
N_FOURIER = 8


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 8
    d_model: int = 64
    heads: int = 4
    frames: int = 32
    joints: int = 8
    d_audio: int = 4
    vocab: int = Vocab.SIZE
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    zica_layers: tuple[int, ...] = ()
    lora_rank: int = 16
    lora_alpha: float | None = None
    mlp_ratio: int = 4
    attention: str = "global"
    window: int = 2
    adapter_kind: str = "zica"

    def __post_init__(self):
        object.__setattr__(self, "zica_layers", tuple(sorted(set(int(i) for i in self.zica_layers))))
        if min(self.layers, self.d_model, self.heads, self.frames, self.joints, self.d_audio) <= 0:
            raise ModelError("model dimensions must be positive")
        if self.d_model % self.heads:
            raise ModelError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if any(not 0 <= i < self.layers for i in self.zica_layers):
            raise ModelError(f"zica_layers {self.zica_layers} outside 0..{self.layers - 1}")
        if self.attention not in ("global", "windowed"):
            raise ModelError(f"attention must be 'global' or 'windowed', got {self.attention!r}")
        if self.adapter_kind not in ("zica", "feature_addition"):
            raise ModelError(f"unknown adapter kind {self.adapter_kind!r}")
        if self.lora_rank < 0 or self.lora_rank > self.d_model:
            raise ModelError(f"lora_rank must lie in [0, {self.d_model}]")
        SigmaRange(self.sigma_min, self.sigma_max)

    @property
    def sigma_range(self) -> SigmaRange:
        return SigmaRange(self.sigma_min, self.sigma_max)

    @property
    def d_pose(self) -> int:
        return self.joints * 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zica_layers"] = list(self.zica_layers)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["zica_layers"] = tuple(d.get("zica_layers", ()))
        return cls(**d)

    def base_key(self) -> tuple:
        """Fields that define the frozen base network's shapes."""
        return (self.layers, self.d_model, self.heads, self.frames, self.joints, self.vocab, self.mlp_ratio)


@dataclass
class Model:
    cfg: ModelConfig
    base: dict[str, np.ndarray]
    adapters: ad.AdapterSet | None = None

    def param_count(self, include_adapters: bool = True) -> int:
        n = sum(v.size for v in self.base.values())
        if include_adapters and self.adapters is not None:
            n += sum(v.size for v in self.adapters.arrays().values())
        return n

    def base_hash(self) -> str:
        return weights_hash(self.base)

    def astype(self, dtype) -> "Model":
        base = {k: v.astype(dtype) for k, v in self.base.items()}
        adapters = None if self.adapters is None else self.adapters.astype(dtype)
        return Model(self.cfg, base, adapters)


def weights_hash(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def build_model(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Randomly initialised base network (no adapters attached)."""
    d, L, dp = cfg.d_model, cfg.layers, cfg.d_pose
    hidden = cfg.mlp_ratio * d
    resid = 1.0 / math.sqrt(2 * L)

    def normal(std, *shape):
        return rng.normal(0.0, std, shape)

    p: dict[str, np.ndarray] = {
        "in.w": normal(1.0 / math.sqrt(dp), d, dp),
        "in.b": np.zeros(d),
        "pos": normal(0.5, cfg.frames, d),
        "t.w1": normal(1.0 / math.sqrt(2 * N_FOURIER), d, 2 * N_FOURIER),
        "t.b1": np.zeros(d),
        "t.w2": normal(1.0 / math.sqrt(d), d, d),
        "t.b2": np.zeros(d),
        "cond.emb": normal(0.5, cfg.vocab, d),
    }
    for layer in range(L):
        pre = f"blk.{layer}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for proj in ("q", "k", "v"):
            p[pre + proj] = normal(1.0 / math.sqrt(d), d, d)
        p[pre + "o"] = normal(resid / math.sqrt(d), d, d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "mlp.w1"] = normal(1.0 / math.sqrt(d), hidden, d)
        p[pre + "mlp.b1"] = np.zeros(hidden)
        p[pre + "mlp.w2"] = normal(resid / math.sqrt(hidden), d, hidden)
        p[pre + "mlp.b2"] = np.zeros(d)
    p["out.ln.g"] = np.ones(d)
    p["out.ln.b"] = np.zeros(d)
    p["out.w"] = normal(0.02, dp, d)
    p["out.b"] = np.zeros(dp)
    return Model(cfg, {k: v.astype(dtype) for k, v in p.items()})


def attach_adapters(model: Model, rng: np.random.Generator, cfg: ModelConfig | None = None) -> Model:
    """Fresh identity-at-init adapters for ``cfg`` (defaults to the model's config)."""
    cfg = cfg or model.cfg
    if cfg.base_key() != model.cfg.base_key():
        raise ModelError("adapter config does not match the base network")
    dtype = next(iter(model.base.values())).dtype
    adapters = ad.init_adapters(
        cfg.d_model, cfg.d_audio, cfg.heads, cfg.zica_layers, cfg.layers,
        cfg.lora_rank, cfg.lora_alpha, rng, kind=cfg.adapter_kind,
    ).astype(dtype)
    return Model(cfg, model.base, adapters)


def null_condition(batch: int | None = None) -> np.ndarray:
    """Reserved all-null token row(s) used by the unconditional branch."""
    row = np.full(Vocab.SLOTS, Vocab.NULL, dtype=np.int64)
    return row if batch is None else np.tile(row, (batch, 1))


def precondition(sigma: np.ndarray, sigma_data: float = SIGMA_DATA):
    """(c_skip, c_out, c_in, c_noise) for per-example noise levels."""
    s2, d2 = sigma * sigma, sigma_data * sigma_data
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / np.sqrt(s2 + d2)
    c_in = 1.0 / np.sqrt(s2 + d2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def fourier_features(c_noise: np.ndarray) -> np.ndarray:
    freqs = np.pi * 2.0 ** (np.arange(N_FOURIER) / 2.0)
    ang = c_noise[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _cond_mix(cond: np.ndarray, vocab: int) -> np.ndarray:
    cond = np.asarray(cond, dtype=np.int64)
    if cond.ndim == 1:
        cond = cond[None, :]
    if cond.min() < 0 or cond.max() >= vocab:
        raise ModelError(f"condition ids outside vocabulary of size {vocab}")
    onehot = np.zeros(cond.shape + (vocab,))
    np.put_along_axis(onehot, cond[..., None], 1.0, axis=-1)
    return onehot.mean(axis=1)


def forward(
    model: Model,
    x,
    sigma,
    cond,
    audio=None,
    gate=None,
    skip_layer: int | None = None,
    params: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Batched denoiser: x (B, F, J, 2) -> denoised (B, F, J, 2).

    ``params`` maps parameter names (base names and adapter names such as
    ``zica.3.wo``) to tracked tensors; anything missing is read from the model.
    """
    cfg, base = model.cfg, model.base
    tracked = params or {}
    dtype = next(iter(base.values())).dtype

    def P(name):
        t = tracked.get(name)
        return t if t is not None else base[name]

    def A(name, default):
        t = tracked.get(name)
        return t if t is not None else default

    x = as_tensor(x)
    B = x.shape[0]
    if x.shape[1:] != (cfg.frames, cfg.joints, 2):
        raise ModelError(f"expected motion of shape (B, {cfg.frames}, {cfg.joints}, 2), got {x.shape}")
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,))
    if not np.all(sig > 0):
        raise ModelError("sigma must be positive")
    c_skip, c_out, c_in, c_noise = precondition(sig)
    col = lambda v: v.reshape(B, 1, 1, 1).astype(dtype)

    h = reshape(mul(x, col(c_in)), (B, cfg.frames, cfg.d_pose))
    h = ad.linear(h, P("in.w"), P("in.b")) + P("pos")
    temb = tanh(ad.linear(fourier_features(c_noise).astype(dtype), P("t.w1"), P("t.b1")))
    temb = ad.linear(temb, P("t.w2"), P("t.b2"))
    cemb = matmul(_cond_mix(cond, cfg.vocab).astype(dtype), P("cond.emb"))
    if cemb.shape[0] != B:
        raise ModelError(f"condition batch {cemb.shape[0]} does not match motion batch {B}")
    h = h + reshape(temb + cemb, (B, 1, cfg.d_model))

    adapters = model.adapters
    audio_tokens = None
    gate_t = None
    use_audio = audio is not None and adapters is not None and adapters.layers
    if use_audio:
        audio = np.asarray(audio, dtype=dtype)
        if audio.ndim == 2:
            audio = np.broadcast_to(audio, (B,) + audio.shape)
        if audio.shape[0] != B or audio.shape[2] != cfg.d_audio:
            raise ModelError(f"audio must be (B, T, {cfg.d_audio}), got {audio.shape}")
        if not np.isfinite(audio).all():
            raise ModelError("audio features contain non-finite values")
        T = audio.shape[1]
        if T == 0:
            raise ModelError("audio input has no tokens")
        audio_tokens = ad.linear(audio, A("audio.w", adapters.audio_w), A("audio.b", adapters.audio_b))
        if adapters.kind == "zica":
            pos_idx = np.minimum(np.round((np.arange(T) + 0.5) * cfg.frames / T - 0.5).astype(int), cfg.frames - 1)
            pos = as_tensor(base["pos"])
            audio_tokens = audio_tokens + (pos if T == cfg.frames else Tensor(base["pos"][pos_idx]))
        elif T != cfg.frames:
            raise ModelError("feature addition needs one audio token per frame")
        if gate is not None:
            gate_t = np.asarray(gate, dtype=dtype).reshape(B, 1, 1)
        mask = ad.window_mask(cfg.frames, T, cfg.window).astype(dtype) if cfg.attention == "windowed" else None

    lora = adapters.lora if adapters is not None else {}
    for layer in range(cfg.layers):
        if layer == skip_layer:
            continue
        pre = f"blk.{layer}."
        a = layer_norm(h, P(pre + "ln1.g"), P(pre + "ln1.b"))
        proj = {}
        for name in ("q", "k", "v"):
            proj[name] = _lora_linear(a, P(pre + name), lora.get((layer, name)), layer, name, tracked)
        attn = ad.multi_head_attention(proj["q"], proj["k"], proj["v"], cfg.heads)
        h = h + _lora_linear(attn, P(pre + "o"), lora.get((layer, "o")), layer, "o", tracked)
        if use_audio and layer in adapters.layers:
            if adapters.kind == "zica":
                zw = adapters.zica[layer]
                zp = {n: tracked[f"zica.{layer}.{n}"] for n in ("wq", "wk", "wv", "wo") if f"zica.{layer}.{n}" in tracked}
                h = ad.zica_forward(h, audio_tokens, zw, gate=gate_t, mask=mask, params=zp)
            else:
                upd = ad.linear(audio_tokens, A(f"add.{layer}.w", adapters.additive[layer]))
                h = h + (upd if gate_t is None else mul(upd, gate_t))
        m = layer_norm(h, P(pre + "ln2.g"), P(pre + "ln2.b"))
        m = ad.linear(gelu(ad.linear(m, P(pre + "mlp.w1"), P(pre + "mlp.b1"))), P(pre + "mlp.w2"), P(pre + "mlp.b2"))
        h = h + m

    out = layer_norm(h, P("out.ln.g"), P("out.ln.b"))
    out = ad.linear(out, P("out.w"), P("out.b"))
    out = reshape(out, (B, cfg.frames, cfg.joints, 2))
    return mul(x, col(c_skip)) + mul(out, col(c_out))


def _lora_linear(x, w, pair, layer, name, tracked):
    if pair is None:
        return ad.linear(x, w)
    down = tracked.get(f"lora.{layer}.{name}.down")
    up = tracked.get(f"lora.{layer}.{name}.up")
    return ad.lora_apply(w, pair, x, down=down, up=up)


def _as_batch(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def denoise(model: Model, x, sigma, cond, audio=None, skip_layer: int | None = None) -> np.ndarray:
    """Numpy-in, numpy-out denoiser. Accepts a single clip (F, J, 2) or a batch."""
    if skip_layer is not None and not 0 <= skip_layer < model.cfg.layers:
        raise ModelError(f"skip_layer {skip_layer} outside 0..{model.cfg.layers - 1}")
    xb, single = _as_batch(x)
    if not np.isfinite(xb).all():
        raise ModelError("input motion contains non-finite values")
    cond = np.asarray(cond)
    if cond.ndim == 1:
        cond = np.tile(cond, (xb.shape[0], 1))
    out = forward(model, xb.astype(next(iter(model.base.values())).dtype), sigma, cond, audio,
                  skip_layer=skip_layer).data
    return out[0] if single else out


def denoise_with_skip(model: Model, x, sigma, cond, audio=None, skip_layer: int = 0) -> np.ndarray:
    """Denoise with block ``skip_layer`` bypassed (its residual contribution removed)."""
    if not 0 <= skip_layer < model.cfg.layers:
        raise ModelError(f"skip_layer {skip_layer} outside 0..{model.cfg.layers - 1}")
    return denoise(model, x, sigma, cond, audio, skip_layer=skip_layer)


@dataclass
class SamplerSettings:
    steps: int = 50
    gamma: float = 6.0
    rho: float = 7.0


def generate(
    model: Model,
    cond,
    audio,
    rng: np.random.Generator,
    n: int | None = None,
    settings: SamplerSettings = SamplerSettings(),
    skip_layer: int | None = None,
) -> np.ndarray:
    """Draw clips by guided ODE sampling; returns (B, F, J, 2) in float64.

    The unconditional branch uses the null caption and no audio.
    """
    cfg = model.cfg
    cond = np.asarray(cond)
    if cond.ndim == 1:
        cond = np.tile(cond, (n or 1, 1))
    B = cond.shape[0]
    uncond = null_condition(B)
    dtype = next(iter(model.base.values())).dtype

    def d_cond(x, s):
        return forward(model, x.astype(dtype), s, cond, audio, skip_layer=skip_layer).data.astype(np.float64)

    def d_uncond(x, s):
        return forward(model, x.astype(dtype), s, uncond, None, skip_layer=skip_layer).data.astype(np.float64)

    guidance = GuidanceConfig(settings.gamma)
    sigmas = sigma_grid(settings.steps, cfg.sigma_range, settings.rho)
    pair = (d_cond, None if guidance.gamma == 1 else d_uncond)
    return sample(pair, (B, cfg.frames, cfg.joints, 2), sigmas, guidance, rng)
