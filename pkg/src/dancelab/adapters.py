"""Zero-initialised cross-attention and low-rank adapters.

Both adapter kinds are exact identities at initialisation: the cross-attention
output projection and the LoRA up-projection start at zero, so the adapted
forward pass reproduces the frozen base bit for bit until training moves them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .numerics import Tensor, as_tensor, matmul, mul, reshape, softmax, transpose

PROJECTIONS = ("q", "k", "v", "o")
ZICA_INIT_STD = 0.02


class AdapterError(ValueError):
    pass


@dataclass
class ZicaWeights:
    """Cross-attention from frame tokens (queries) to audio tokens (keys/values).

    Matrices follow the ``W @ x`` convention: ``wq`` is d x d, ``wk``/``wv``
    are d x d_a, ``wo`` is d x d.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise AdapterError(f"model width {d} not divisible by {self.heads} heads")
        if self.wk.shape[0] != d or self.wv.shape[0] != d or self.wo.shape != (d, d):
            raise AdapterError("inconsistent cross-attention weight shapes")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_audio(self) -> int:
        return self.wk.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def arrays(self) -> dict[str, np.ndarray]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


@dataclass
class LoraPair:
    """Low-rank update ``(alpha / rank) * up @ down`` for a d_out x d_in weight."""

    down: np.ndarray  # rank x d_in
    up: np.ndarray  # d_out x rank
    alpha: float

    def __post_init__(self):
        r = self.down.shape[0]
        if r < 1 or self.up.shape[1] != r:
            raise AdapterError(f"inconsistent LoRA factor shapes {self.down.shape}, {self.up.shape}")
        if r > min(self.down.shape[1], self.up.shape[0]):
            raise AdapterError(f"rank {r} exceeds min(d_in, d_out) for {self.up.shape[0]}x{self.down.shape[1]}")
        if not self.alpha > 0:
            raise AdapterError("LoRA alpha must be positive")

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.up @ self.down)


def zica_init(d: int, d_a: int, heads: int, rng: np.random.Generator) -> ZicaWeights:
    if d <= 0 or d_a <= 0 or heads <= 0 or d % heads:
        raise AdapterError(f"invalid cross-attention dims d={d}, d_a={d_a}, heads={heads}")
    return ZicaWeights(
        wq=rng.normal(0.0, ZICA_INIT_STD, (d, d)),
        wk=rng.normal(0.0, ZICA_INIT_STD, (d, d_a)),
        wv=rng.normal(0.0, ZICA_INIT_STD, (d, d_a)),
        wo=np.zeros((d, d)),
        heads=heads,
    )


def lora_init(d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator) -> LoraPair:
    if rank < 1 or rank > min(d_in, d_out):
        raise AdapterError(f"rank must be in [1, {min(d_in, d_out)}], got {rank}")
    return LoraPair(
        down=rng.normal(0.0, 1.0 / math.sqrt(rank), (rank, d_in)),
        up=np.zeros((d_out, rank)),
        alpha=float(alpha),
    )


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T (+ b)`` for a weight stored as d_out x d_in."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim > 2:
        # one GEMM over all leading axes instead of a batched matmul
        lead = x.shape[:-1]
        out = reshape(matmul(reshape(x, (-1, x.shape[-1])), transpose(w)), (*lead, w.shape[0]))
    else:
        out = matmul(x, transpose(w))
    return out if b is None else out + b


def lora_apply(w, pair: LoraPair | None, x, down=None, up=None) -> Tensor:
    """Apply ``(W + (alpha/r) B A)`` to ``x`` (row vectors on the last axis).

    ``down``/``up`` override the pair's factors with tracked tensors during
    training; the pair still supplies the scale.
    """
    base = linear(x, w)
    if pair is None:
        return base
    down = pair.down if down is None else down
    up = pair.up if up is None else up
    w = as_tensor(w)
    if as_tensor(down).shape[1] != w.shape[1] or as_tensor(up).shape[0] != w.shape[0]:
        raise AdapterError(f"LoRA factors do not fit weight of shape {w.shape}")
    low = linear(linear(x, down), up)
    return base + mul(low, pair.scale)


def window_mask(frames: int, tokens: int, radius: int) -> np.ndarray:
    """Additive attention bias keeping audio tokens within ``radius`` frames of each query."""
    centers = (np.arange(tokens) + 0.5) * frames / tokens - 0.5
    dist = np.abs(np.arange(frames)[:, None] - centers[None, :])
    return np.where(dist <= radius + 1e-9, 0.0, -1e9)


def zica_forward(v, a, w: ZicaWeights, gate=None, mask=None, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """``Z = V + W_O Attention(V, A)`` with multi-head scaled dot-product attention.

    ``v`` is (..., F, d) frame tokens, ``a`` is (..., T_a, d_a) audio tokens.
    ``gate`` (broadcastable to the batch, e.g. shape (B, 1, 1)) switches the
    audio path per example; ``mask`` is an additive (F, T_a) score bias.
    ``params`` optionally supplies tracked tensors for wq/wk/wv/wo.
    """
    v, a = as_tensor(v), as_tensor(a)
    if a.shape[-2] == 0:
        raise AdapterError("cross-attention needs at least one audio token")
    p = params or {}
    wq, wk, wv, wo = (p.get(n, getattr(w, n)) for n in ("wq", "wk", "wv", "wo"))
    if v.shape[-1] != w.d_model or a.shape[-1] != w.d_audio:
        raise AdapterError(f"token widths {v.shape[-1]}/{a.shape[-1]} do not match weights {w.d_model}/{w.d_audio}")
    attn = multi_head_attention(linear(v, wq), linear(a, wk), linear(a, wv), w.heads, mask)
    update = linear(attn, wo)
    if gate is not None:
        update = mul(update, gate)
    return v + update


def multi_head_attention(q, k, v, heads: int, mask=None) -> Tensor:
    """Scaled dot-product attention over the last two axes, split into heads."""
    *lead, n_q, d = q.shape
    n_k = k.shape[-2]
    hd = d // heads

    def split(t, n):
        return transpose(reshape(t, (*lead, n, heads, hd)), _swap_axes(len(lead)))

    qh, kh, vh = split(q, n_q), split(k, n_k), split(v, n_k)
    scores = mul(matmul(qh, transpose(kh, _last_two(len(lead) + 3))), 1.0 / math.sqrt(hd))
    if mask is not None:
        scores = scores + mask
    out = matmul(softmax(scores), vh)
    out = transpose(out, _swap_axes(len(lead)))
    return reshape(out, (*lead, n_q, d))


def _swap_axes(n_lead: int) -> tuple[int, ...]:
    return tuple(range(n_lead)) + (n_lead + 1, n_lead, n_lead + 2)


def _last_two(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


@dataclass
class AdapterSet:
    """Trainable audio-conditioning parameters attached to a frozen base.

    ``kind`` is ``"zica"`` (cross-attention at ``zica`` layers) or
    ``"feature_addition"`` (per-frame projected audio added at the same
    layers, the additive baseline). LoRA pairs live on the Q/K/V/O
    self-attention projections of every layer.
    """

    audio_w: np.ndarray  # d x d_audio projector into token space
    audio_b: np.ndarray
    zica: dict[int, ZicaWeights] = field(default_factory=dict)
    lora: dict[tuple[int, str], LoraPair] = field(default_factory=dict)
    additive: dict[int, np.ndarray] = field(default_factory=dict)
    kind: str = "zica"

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.zica if self.kind == "zica" else self.additive))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"audio.w": self.audio_w, "audio.b": self.audio_b}
        for layer, zw in sorted(self.zica.items()):
            for n, arr in zw.arrays().items():
                out[f"zica.{layer}.{n}"] = arr
        for layer, arr in sorted(self.additive.items()):
            out[f"add.{layer}.w"] = arr
        for (layer, proj), pair in sorted(self.lora.items()):
            out[f"lora.{layer}.{proj}.down"] = pair.down
            out[f"lora.{layer}.{proj}.up"] = pair.up
        return out

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "AdapterSet":
        """Copy of this set with parameter values replaced from ``arrays``."""
        zica = {
            layer: ZicaWeights(*(np.asarray(arrays[f"zica.{layer}.{n}"]) for n in ("wq", "wk", "wv", "wo")), heads=zw.heads)
            for layer, zw in self.zica.items()
        }
        lora = {
            key: LoraPair(np.asarray(arrays[f"lora.{key[0]}.{key[1]}.down"]),
                          np.asarray(arrays[f"lora.{key[0]}.{key[1]}.up"]), pair.alpha)
            for key, pair in self.lora.items()
        }
        additive = {layer: np.asarray(arrays[f"add.{layer}.w"]) for layer in self.additive}
        return AdapterSet(np.asarray(arrays["audio.w"]), np.asarray(arrays["audio.b"]), zica, lora, additive, self.kind)

    def astype(self, dtype) -> "AdapterSet":
        return self.with_arrays({k: v.astype(dtype) for k, v in self.arrays().items()})

    def lora_meta(self) -> dict[str, float]:
        return {f"{layer}.{proj}": pair.alpha for (layer, proj), pair in self.lora.items()}


def init_adapters(
    d_model: int,
    d_audio: int,
    heads: int,
    layers: Iterable[int],
    n_layers: int,
    lora_rank: int,
    lora_alpha: float | None,
    rng: np.random.Generator,
    kind: str = "zica",
    lora_projections: Iterable[str] = PROJECTIONS,
) -> AdapterSet:
    layers = sorted(set(int(i) for i in layers))
    if any(i < 0 or i >= n_layers for i in layers):
        raise AdapterError(f"adapter layers {layers} outside 0..{n_layers - 1}")
    if kind not in ("zica", "feature_addition"):
        raise AdapterError(f"unknown adapter kind {kind!r}")
    alpha = float(lora_rank if lora_alpha is None else lora_alpha)
    audio_w = rng.normal(0.0, 1.0 / math.sqrt(d_audio), (d_model, d_audio))
    audio_b = np.zeros(d_model)
    zica, additive = {}, {}
    for layer in layers:
        if kind == "zica":
            zica[layer] = zica_init(d_model, d_model, heads, rng)
        else:
            additive[layer] = np.zeros((d_model, d_model))
    lora = {}
    if lora_rank > 0:
        for layer in range(n_layers):
            for proj in lora_projections:
                lora[(layer, proj)] = lora_init(d_model, d_model, lora_rank, alpha, rng)
    return AdapterSet(audio_w, audio_b, zica, lora, additive, kind)
