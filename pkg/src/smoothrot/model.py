"""Desk-scale LLaMA-style decoder with transform surgery and quantized forward.

The model is a list of decoder layers (RMSNorm + causal attention,
RMSNorm + GLU feed-forward) between an embedding table and an output head.
Weights are stored ``[in_features, out_features]`` so the forward pass is a
chain of ``x @ w`` products. Surgery (norm fusion, channel scaling,
rotation) mutates a model in place and must own it exclusively; forward
passes on a finished model are safe to run in parallel across batches.

Hidden and intermediate dimensions are powers of two so the online
Hadamard path has a fast transform.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import archive
from .numerics import Rng, ShapeError, require_finite
from .quantizer import QuantSpec, fake_quant
from .rotation import OrthogonalTransform, _fwht64, hadamard_matrix

__all__ = [
    "RmsNorm",
    "FfnBlock",
    "AttentionBlock",
    "DecoderLayer",
    "TinyModel",
    "ModelConfig",
    "QuantConfig",
    "ForwardTrace",
    "KvCache",
    "build_model",
    "rmsnorm_forward",
    "ffn_forward",
    "attention_forward",
    "model_forward",
    "fuse_rmsnorm",
    "rotate_model",
    "save_model",
    "load_model",
]

TRANSFORM_STATES = ("none", "smoothed", "rotated", "smoothrot")


def _silu64(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


@dataclass
class RmsNorm:
    """Per-channel scale over RMS-normalized rows; gamma becomes all-ones after fusion."""

    gamma: np.ndarray
    epsilon: float = 1e-6


@dataclass
class FfnBlock:
    """GLU feed-forward: gate [d,m], up [d,m], down [m,d].

    ``online_hadamard`` marks that the stored down weight carries a leading
    Hadamard factor and the forward pass must transform the down-projection
    input on the fly.
    """

    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    online_hadamard: bool = False

    @property
    def hidden_dim(self) -> int:
        return self.w_gate.shape[0]

    @property
    def intermediate_dim(self) -> int:
        return self.w_gate.shape[1]


@dataclass
class AttentionBlock:
    """Multi-head causal attention, all projections [d,d], no positional encoding."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    head_count: int
    online_hadamard: bool = False

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.head_count != 0:
            raise ShapeError(f"hidden dim {d} not divisible by {self.head_count} heads")


@dataclass
class DecoderLayer:
    attn_norm: RmsNorm
    attn: AttentionBlock
    ffn_norm: RmsNorm
    ffn: FfnBlock


@dataclass
class TinyModel:
    """Embedding, decoder layers, output head, and the transform bookkeeping.

    ``transform_state`` moves only forward along
    none -> smoothed -> rotated/smoothrot; smoothing must precede rotation.
    """

    embedding: np.ndarray
    head: np.ndarray
    layers: list[DecoderLayer]
    transform_state: str = "none"
    rmsnorm_fused: bool = False

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def intermediate_dim(self) -> int:
        return self.layers[0].ffn.intermediate_dim

    def copy(self) -> "TinyModel":
        layers = [
            DecoderLayer(
                attn_norm=RmsNorm(l.attn_norm.gamma.copy(), l.attn_norm.epsilon),
                attn=AttentionBlock(
                    l.attn.w_q.copy(),
                    l.attn.w_k.copy(),
                    l.attn.w_v.copy(),
                    l.attn.w_o.copy(),
                    l.attn.head_count,
                    l.attn.online_hadamard,
                ),
                ffn_norm=RmsNorm(l.ffn_norm.gamma.copy(), l.ffn_norm.epsilon),
                ffn=FfnBlock(
                    l.ffn.w_gate.copy(),
                    l.ffn.w_up.copy(),
                    l.ffn.w_down.copy(),
                    l.ffn.online_hadamard,
                ),
            )
            for l in self.layers
        ]
        return TinyModel(
            embedding=self.embedding.copy(),
            head=self.head.copy(),
            layers=layers,
            transform_state=self.transform_state,
            rmsnorm_fused=self.rmsnorm_fused,
        )


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults: tiny vocab, power-of-two dims, seeded normal weights."""

    vocab_size: int = 256
    hidden_dim: int = 64
    intermediate_dim: int = 256
    n_layers: int = 2
    n_heads: int = 4

    def __post_init__(self):
        for name in ("hidden_dim", "intermediate_dim"):
            v = getattr(self, name)
            if v < 2 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two, got {v}")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )


@dataclass(frozen=True)
class QuantConfig:
    """Which sites get fake-quantized during the forward pass.

    ``None`` disables a site. The weight spec/method configure the offline
    weight pass (see ``weight_quant.quantize_model_weights``).
    """

    act_spec: QuantSpec | None = None
    kv_spec: QuantSpec | None = None
    weight_spec: QuantSpec | None = None
    weight_method: str = "rtn"

    def __post_init__(self):
        if self.weight_method not in ("rtn", "gptq"):
            raise ValueError(f"weight_method must be 'rtn' or 'gptq', got {self.weight_method!r}")

    @classmethod
    def w4a4kv4(cls, hidden_dim: int, *, act_bits=4, kv_bits=4, weight_bits=4,
                act_clip=0.9, kv_clip=0.95, kv_group=128, weight_method="rtn") -> "QuantConfig":
        """Default 4-bit weights/activations/KV configuration.

        Activations: per-token symmetric, clip 0.9. Keys/values: asymmetric
        per-group (group size 128 or the channel count when smaller), clip
        0.95. Weights: per-channel symmetric; the clip ratio is searched at
        quantization time.
        """
        group = min(kv_group, hidden_dim)
        return cls(
            act_spec=QuantSpec(act_bits, "symmetric", "per-token", clip_ratio=act_clip),
            kv_spec=QuantSpec(kv_bits, "asymmetric", "per-group", group_size=group,
                              clip_ratio=kv_clip),
            weight_spec=QuantSpec(weight_bits, "symmetric", "per-channel"),
            weight_method=weight_method,
        )


class ForwardTrace:
    """Optional instrumentation attached to a forward pass.

    Collects, per layer: the pre-quantization down-projection input
    (post online Hadamard when active), running per-channel absolute maxima
    of that input, raw projection inputs (for weight-quant calibration),
    and fake-quantization mean squared error per site.
    """

    def __init__(self, *, store_down_inputs=False, track_down_absmax=False,
                 store_proj_inputs=False, track_quant_mse=False):
        self.store_down_inputs = store_down_inputs
        self.track_down_absmax = track_down_absmax
        self.store_proj_inputs = store_proj_inputs
        self.track_quant_mse = track_quant_mse
        self._down_chunks: dict[int, list[np.ndarray]] = {}
        self._down_absmax: dict[int, np.ndarray] = {}
        self._proj_inputs: dict[tuple[int, str], list[np.ndarray]] = {}
        self._mse: dict[tuple[int, str], list[float]] = {}

    def record_down_input(self, layer: int, z: np.ndarray) -> None:
        if self.store_down_inputs:
            self._down_chunks.setdefault(layer, []).append(np.array(z, copy=True))
        if self.track_down_absmax:
            chunk_max = np.abs(z.reshape(-1, z.shape[-1])).max(axis=0)
            prev = self._down_absmax.get(layer)
            self._down_absmax[layer] = (
                chunk_max if prev is None else np.maximum(prev, chunk_max)
            )

    def record_proj_input(self, layer: int, site: str, x: np.ndarray) -> None:
        if self.store_proj_inputs:
            self._proj_inputs.setdefault((layer, site), []).append(
                np.array(x.reshape(-1, x.shape[-1]), copy=True)
            )

    def record_quant_error(self, layer: int, site: str, x: np.ndarray, xq: np.ndarray) -> None:
        if self.track_quant_mse:
            err = float(np.mean((xq.astype(np.float64) - x.astype(np.float64)) ** 2))
            self._mse.setdefault((layer, site), []).append(err)

    def down_input(self, layer: int) -> np.ndarray:
        chunks = self._down_chunks.get(layer)
        if not chunks:
            raise KeyError(f"no down-projection input recorded for layer {layer}")
        return np.concatenate([c.reshape(-1, c.shape[-1]) for c in chunks], axis=0)

    def down_absmax(self, layer: int) -> np.ndarray:
        return self._down_absmax[layer]

    def proj_input(self, layer: int, site: str) -> np.ndarray:
        return np.concatenate(self._proj_inputs[(layer, site)], axis=0)

    def quant_mse(self) -> dict[tuple[int, str], float]:
        return {key: float(np.mean(vals)) for key, vals in self._mse.items()}


@dataclass
class KvCache:
    """Per-layer key/value tensors carried across incremental forward calls."""

    k: np.ndarray | None = None
    v: np.ndarray | None = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[1]

    def append(self, k_new: np.ndarray, v_new: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.k is None:
            self.k, self.v = k_new, v_new
        else:
            if self.k.shape[0] != k_new.shape[0]:
                raise ShapeError(
                    f"cache batch {self.k.shape[0]} does not match input batch {k_new.shape[0]}"
                )
            self.k = np.concatenate([self.k, k_new], axis=1)
            self.v = np.concatenate([self.v, v_new], axis=1)
        return self.k, self.v


def build_model(config: ModelConfig, rng: Rng) -> TinyModel:
    """Seeded random model: normal weights scaled by 1/sqrt(fan_in).

    RMSNorm gammas are drawn uniform in [0.5, 2) so norm fusion is
    exercised by default.
    """
    d, m = config.hidden_dim, config.intermediate_dim
    layers = []
    for i in range(config.n_layers):
        lr = rng.derive(f"layer{i}")
        attn = AttentionBlock(
            w_q=lr.normal((d, d), d**-0.5),
            w_k=lr.normal((d, d), d**-0.5),
            w_v=lr.normal((d, d), d**-0.5),
            w_o=lr.normal((d, d), d**-0.5),
            head_count=config.n_heads,
        )
        ffn = FfnBlock(
            w_gate=lr.normal((d, m), d**-0.5),
            w_up=lr.normal((d, m), d**-0.5),
            w_down=lr.normal((m, d), m**-0.5),
        )
        layers.append(
            DecoderLayer(
                attn_norm=RmsNorm(lr.uniform(0.5, 2.0, d)),
                attn=attn,
                ffn_norm=RmsNorm(lr.uniform(0.5, 2.0, d)),
                ffn=ffn,
            )
        )
    er = rng.derive("embedding")
    return TinyModel(
        embedding=er.normal((config.vocab_size, d), 1.0),
        head=rng.derive("head").normal((d, config.vocab_size), d**-0.5),
        layers=layers,
    )


def rmsnorm_forward(norm: RmsNorm, x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    rms = np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + norm.epsilon)
    return ((x64 / rms) * norm.gamma.astype(np.float64)).astype(np.float32)


def _site_fake_quant(x, spec, trace, layer, site):
    if spec is None:
        return x
    xq = fake_quant(x, spec)
    if trace is not None:
        trace.record_quant_error(layer, site, x, xq)
    return xq


def ffn_forward(block: FfnBlock, x: np.ndarray, quant: QuantConfig | None = None, *,
                layer_index: int = 0, trace: ForwardTrace | None = None) -> np.ndarray:
    """GLU forward ``(silu(x @ w_gate) * (x @ w_up)) @ w_down``.

    In quantized mode, the projection inputs are fake-quantized per token;
    the down-projection input passes through the online Hadamard (when the
    block is rotated) before quantization. The trace, when given, receives
    the pre-quantization down-projection input.
    """
    if x.ndim != 2 or x.shape[1] != block.hidden_dim:
        raise ShapeError(f"ffn expects [tokens, {block.hidden_dim}], got {x.shape}")
    act_spec = quant.act_spec if quant is not None else None
    if trace is not None:
        trace.record_proj_input(layer_index, "ffn_in", x)
    xq = _site_fake_quant(x, act_spec, trace, layer_index, "ffn_in")
    x64 = xq.astype(np.float64)
    gate = np.matmul(x64, block.w_gate.astype(np.float64))
    up = np.matmul(x64, block.w_up.astype(np.float64))
    z64 = _silu64(gate) * up
    if block.online_hadamard:
        z64 = _fwht64(z64)
    z = z64.astype(np.float32)
    if trace is not None:
        trace.record_down_input(layer_index, z)
        trace.record_proj_input(layer_index, "down_in", z)
    if act_spec is not None:
        # Quantization operates on the float32 activation the hardware
        # would see; the float path keeps full precision so spiked inputs
        # cancel against their compensating weights without rounding loss.
        zq = _site_fake_quant(z, act_spec, trace, layer_index, "down_in")
        down_in = zq.astype(np.float64)
    else:
        down_in = z64
    y = np.matmul(down_in, block.w_down.astype(np.float64))
    return y.astype(np.float32)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    s, t, d = x.shape
    return x.reshape(s, t, heads, d // heads).transpose(0, 2, 1, 3)


def attention_forward(block: AttentionBlock, x: np.ndarray,
                      quant: QuantConfig | None = None, *,
                      cache: KvCache | None = None, layer_index: int = 0,
                      trace: ForwardTrace | None = None) -> np.ndarray:
    """Causal multi-head attention over ``x`` [seqs, tokens, d] (or [tokens, d]).

    Keys and values are fake-quantized with the KV spec before cache
    insertion when enabled; with a cache, new tokens attend to all cached
    positions plus the causal prefix of the new chunk.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None, :, :]
    d = block.w_q.shape[0]
    if x.ndim != 3 or x.shape[-1] != d:
        raise ShapeError(f"attention expects [seqs, tokens, {d}], got {x.shape}")
    act_spec = quant.act_spec if quant is not None else None
    kv_spec = quant.kv_spec if quant is not None else None

    s, t, _ = x.shape
    flat = x.reshape(-1, d)
    if trace is not None:
        trace.record_proj_input(layer_index, "qkv_in", flat)
    xq = _site_fake_quant(flat, act_spec, trace, layer_index, "qkv_in")
    x64 = xq.astype(np.float64)
    q = np.matmul(x64, block.w_q.astype(np.float64)).astype(np.float32).reshape(s, t, d)
    k = np.matmul(x64, block.w_k.astype(np.float64)).astype(np.float32).reshape(s, t, d)
    v = np.matmul(x64, block.w_v.astype(np.float64)).astype(np.float32).reshape(s, t, d)
    if kv_spec is not None:
        k = fake_quant(k, kv_spec)
        v = fake_quant(v, kv_spec)

    past = 0
    if cache is not None:
        past = cache.length
        k, v = cache.append(k, v)

    heads = block.head_count
    head_dim = d // heads
    qh = np.ascontiguousarray(_split_heads(q * np.float32(head_dim**-0.5), heads))
    kh = np.ascontiguousarray(_split_heads(k, heads))
    vh = np.ascontiguousarray(_split_heads(v, heads))

    # The [t, t] score tensors dominate memory traffic at calibration scale;
    # float32 with in-place updates keeps the pass bandwidth-bound sane.
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2))
    key_pos = np.arange(past + t)
    query_pos = past + np.arange(t)
    causal = np.where(key_pos[None, :] <= query_pos[:, None], 0.0, -np.inf).astype(np.float32)
    scores += causal
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    ctx = np.matmul(scores, vh)  # [s, heads, t, head_dim]
    ctx = ctx.transpose(0, 2, 1, 3).reshape(s, t, d)
    if block.online_hadamard:
        ctx = _fwht64(ctx.astype(np.float64))
    ctx = ctx.astype(np.float32)

    flat_ctx = ctx.reshape(-1, d)
    if trace is not None:
        trace.record_proj_input(layer_index, "o_in", flat_ctx)
    ctxq = _site_fake_quant(flat_ctx, act_spec, trace, layer_index, "o_in")
    out = np.matmul(ctxq.astype(np.float64), block.w_o.astype(np.float64))
    out = out.astype(np.float32).reshape(s, t, d)
    return out[0] if squeeze else out


def _hidden_forward(model: TinyModel, tokens: np.ndarray,
                    quant: QuantConfig | None, trace: ForwardTrace | None,
                    caches: list[KvCache] | None = None) -> np.ndarray:
    ids = np.asarray(tokens)
    if np.any(ids < 0) or np.any(ids >= model.vocab_size):
        raise ValueError(f"token ids out of range [0, {model.vocab_size})")
    x = model.embedding[ids]
    s, t, d = x.shape
    for i, layer in enumerate(model.layers):
        h = rmsnorm_forward(layer.attn_norm, x)
        cache = caches[i] if caches is not None else None
        x = x + attention_forward(layer.attn, h, quant, cache=cache,
                                  layer_index=i, trace=trace)
        h2 = rmsnorm_forward(layer.ffn_norm, x)
        y = ffn_forward(layer.ffn, h2.reshape(-1, d), quant,
                        layer_index=i, trace=trace)
        x = x + y.reshape(s, t, d)
    return x


def model_forward(model: TinyModel, tokens, quant: QuantConfig | None = None, *,
                  trace: ForwardTrace | None = None,
                  caches: list[KvCache] | None = None) -> np.ndarray:
    """Embed, run the decoder layers, and return logits.

    Args:
        tokens: int array, [tokens] or [seqs, tokens].
        quant: Forward-pass quantization sites; ``None`` runs pure float.
        trace: Optional :class:`ForwardTrace`.
        caches: Optional per-layer KV caches for incremental decoding.

    Deterministic for fixed model, tokens, and configuration.
    """
    ids = np.asarray(tokens)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ShapeError(f"tokens must be 1-D or 2-D, got shape {ids.shape}")
    x = _hidden_forward(model, ids, quant, trace, caches)
    logits = np.matmul(x.astype(np.float64), model.head.astype(np.float64))
    logits = logits.astype(np.float32)
    return logits[0] if squeeze else logits


def fuse_rmsnorm(model: TinyModel) -> TinyModel:
    """Absorb each RMSNorm gamma into the following block's input weights.

    The attention norm folds into w_q/w_k/w_v, the FFN norm into
    w_gate/w_up; gammas become all-ones. Float output is unchanged. Fusing
    an already-fused model is a warning no-op.
    """
    if model.rmsnorm_fused:
        warnings.warn("RMSNorm scales already fused; nothing to do", stacklevel=2)
        return model
    for layer in model.layers:
        g_attn = layer.attn_norm.gamma.astype(np.float64)[:, None]
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(layer.attn, name)
            setattr(layer.attn, name, (w.astype(np.float64) * g_attn).astype(np.float32))
        layer.attn_norm.gamma = np.ones_like(layer.attn_norm.gamma)
        g_ffn = layer.ffn_norm.gamma.astype(np.float64)[:, None]
        layer.ffn.w_gate = (layer.ffn.w_gate.astype(np.float64) * g_ffn).astype(np.float32)
        layer.ffn.w_up = (layer.ffn.w_up.astype(np.float64) * g_ffn).astype(np.float32)
        layer.ffn_norm.gamma = np.ones_like(layer.ffn_norm.gamma)
    model.rmsnorm_fused = True
    return model


def rotate_model(model: TinyModel, transform: OrthogonalTransform, *,
                 online_hadamard: bool = True,
                 o_proj_hadamard: bool = False) -> TinyModel:
    """Rotate every hidden-state interface of the model by ``transform``.

    Hidden-state-consuming weights get a leading Q^T, producing weights a
    trailing Q; embedding rows rotate by Q and the head by Q^T. With
    ``online_hadamard`` the down-projection input is transformed on the fly
    and the matching Hadamard factor is folded into the stored down weight,
    keeping the float output invariant. Requires fused (all-ones) RMSNorm
    gammas, which is what makes normalization commute with the rotation.
    """
    if model.transform_state in ("rotated", "smoothrot"):
        raise ValueError("model is already rotated")
    if not model.rmsnorm_fused:
        raise ValueError("fuse RMSNorm gammas first: rotation requires unit gamma")
    d = model.hidden_dim
    if transform.n != d:
        raise ShapeError(f"transform size {transform.n} does not match hidden dim {d}")
    q = transform.matrix.astype(np.float64)
    qt = q.T

    model.embedding = np.matmul(model.embedding.astype(np.float64), q).astype(np.float32)
    model.head = np.matmul(qt, model.head.astype(np.float64)).astype(np.float32)
    for layer in model.layers:
        attn = layer.attn
        attn.w_q = np.matmul(qt, attn.w_q.astype(np.float64)).astype(np.float32)
        attn.w_k = np.matmul(qt, attn.w_k.astype(np.float64)).astype(np.float32)
        attn.w_v = np.matmul(qt, attn.w_v.astype(np.float64)).astype(np.float32)
        w_o = np.matmul(attn.w_o.astype(np.float64), q)
        if o_proj_hadamard:
            w_o = np.matmul(hadamard_matrix(d).astype(np.float64), w_o)
            attn.online_hadamard = True
        attn.w_o = w_o.astype(np.float32)

        ffn = layer.ffn
        ffn.w_gate = np.matmul(qt, ffn.w_gate.astype(np.float64)).astype(np.float32)
        ffn.w_up = np.matmul(qt, ffn.w_up.astype(np.float64)).astype(np.float32)
        w_down = np.matmul(ffn.w_down.astype(np.float64), q)
        if online_hadamard:
            h = hadamard_matrix(ffn.intermediate_dim).astype(np.float64)
            w_down = np.matmul(h, w_down)
            ffn.online_hadamard = True
        ffn.w_down = w_down.astype(np.float32)

    model.transform_state = "smoothrot" if model.transform_state == "smoothed" else "rotated"
    return model


def _layer_entries(i: int, layer: DecoderLayer) -> dict[str, np.ndarray]:
    p = f"layers.{i}"
    return {
        f"{p}.attn_norm.gamma": layer.attn_norm.gamma,
        f"{p}.ffn_norm.gamma": layer.ffn_norm.gamma,
        f"{p}.attn.w_q": layer.attn.w_q,
        f"{p}.attn.w_k": layer.attn.w_k,
        f"{p}.attn.w_v": layer.attn.w_v,
        f"{p}.attn.w_o": layer.attn.w_o,
        f"{p}.ffn.w_gate": layer.ffn.w_gate,
        f"{p}.ffn.w_up": layer.ffn.w_up,
        f"{p}.ffn.w_down": layer.ffn.w_down,
    }


def save_model(model: TinyModel, path, extra_manifest: dict | None = None) -> None:
    """Write weights to a tensor archive and a JSON manifest at ``<path>.json``."""
    tensors: dict[str, np.ndarray] = {"embedding": model.embedding, "head": model.head}
    for i, layer in enumerate(model.layers):
        tensors.update(_layer_entries(i, layer))
    archive.save_archive(tensors, path)
    manifest = {
        "vocab_size": model.vocab_size,
        "hidden_dim": model.hidden_dim,
        "intermediate_dim": model.intermediate_dim,
        "n_layers": len(model.layers),
        "n_heads": model.layers[0].attn.head_count,
        "transform_state": model.transform_state,
        "rmsnorm_fused": model.rmsnorm_fused,
        "ffn_online_hadamard": [l.ffn.online_hadamard for l in model.layers],
        "attn_online_hadamard": [l.attn.online_hadamard for l in model.layers],
        "epsilon": model.layers[0].attn_norm.epsilon,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    Path(str(path) + ".json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def load_model(path) -> TinyModel:
    tensors = archive.load_archive(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    eps = float(manifest.get("epsilon", 1e-6))
    layers = []
    for i in range(int(manifest["n_layers"])):
        p = f"layers.{i}"
        layers.append(
            DecoderLayer(
                attn_norm=RmsNorm(tensors[f"{p}.attn_norm.gamma"], eps),
                attn=AttentionBlock(
                    tensors[f"{p}.attn.w_q"],
                    tensors[f"{p}.attn.w_k"],
                    tensors[f"{p}.attn.w_v"],
                    tensors[f"{p}.attn.w_o"],
                    head_count=int(manifest["n_heads"]),
                    online_hadamard=bool(manifest["attn_online_hadamard"][i]),
                ),
                ffn_norm=RmsNorm(tensors[f"{p}.ffn_norm.gamma"], eps),
                ffn=FfnBlock(
                    tensors[f"{p}.ffn.w_gate"],
                    tensors[f"{p}.ffn.w_up"],
                    tensors[f"{p}.ffn.w_down"],
                    online_hadamard=bool(manifest["ffn_online_hadamard"][i]),
                ),
            )
        )
    for name in ("embedding", "head"):
        require_finite(tensors[name], name)
    return TinyModel(
        embedding=tensors["embedding"],
        head=tensors["head"],
        layers=layers,
        transform_state=manifest["transform_state"],
        rmsnorm_fused=bool(manifest["rmsnorm_fused"]),
    )
