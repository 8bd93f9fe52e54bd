"""Transformer-encoder CTC recognizer, desk scale.

Parameter layout (paths determine regions, see params.region_of):

    feature_proj/weight           (input_dim, model_dim)
    feature_proj/bias             (model_dim,)
    feature_proj/pos_embedding    (max_len, model_dim)
    encoder/layer_{i}/attn/w{q,k,v,o}   (model_dim, model_dim)
    encoder/layer_{i}/attn/b{q,k,v,o}   (model_dim,)
    encoder/layer_{i}/norm{1,2}/{gain,bias}
    encoder/layer_{i}/ffn/w1      (model_dim, ffn_dim)
    encoder/layer_{i}/ffn/b1      (ffn_dim,)
    encoder/layer_{i}/ffn/w2      (ffn_dim, model_dim)
    encoder/layer_{i}/ffn/b2      (model_dim,)
    encoder/final_norm/{gain,bias}
    ctc_head/weight               (model_dim, vocab_size)
    ctc_head/bias                 (vocab_size,)

Blocks are pre-norm with learned absolute position embeddings and no
dropout, so a forward pass is a pure function of (params, frames).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import ParameterTree


class ModelConfigError(ValueError):
    """EncoderConfig violates a structural constraint."""


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    input_dim: int = 16
    vocab_size: int = 27
    max_len: int = 512

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "num_heads", "ffn_dim",
                     "input_dim", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ModelConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers, "model_dim": self.model_dim,
            "num_heads": self.num_heads, "ffn_dim": self.ffn_dim,
            "input_dim": self.input_dim, "vocab_size": self.vocab_size,
            "max_len": self.max_len,
        }


def rng_for(*key) -> np.random.Generator:
    """Deterministic generator derived from an arbitrary key tuple."""
    digest = hashlib.sha256("/".join(str(k) for k in key).encode()).digest()
    return np.random.default_rng(list(digest[:16]))


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_model(config: EncoderConfig, seed: int) -> ParameterTree:
    """Seed-deterministic initialization.

    Weight matrices are uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] with
    fan_in = first axis (the position table uses model_dim instead); biases
    and layer-norm offsets start at zero, layer-norm gains at one. Each
    parameter draws from its own path-keyed stream, so the values do not
    depend on construction order.
    """
    d, f = config.model_dim, config.ffn_dim

    def w(path: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        return _uniform(rng_for(seed, "init", path), shape, fan_in)

    p = ParameterTree(config=config)
    p["feature_proj/weight"] = w("feature_proj/weight", (config.input_dim, d), config.input_dim)
    p["feature_proj/bias"] = np.zeros(d, dtype=np.float32)
    p["feature_proj/pos_embedding"] = w("feature_proj/pos_embedding", (config.max_len, d), d)
    for i in range(config.num_layers):
        base = f"encoder/layer_{i}"
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{base}/attn/{name}"] = w(f"{base}/attn/{name}", (d, d), d)
        for name in ("bq", "bk", "bv", "bo"):
            p[f"{base}/attn/{name}"] = np.zeros(d, dtype=np.float32)
        for norm in ("norm1", "norm2"):
            p[f"{base}/{norm}/gain"] = np.ones(d, dtype=np.float32)
            p[f"{base}/{norm}/bias"] = np.zeros(d, dtype=np.float32)
        p[f"{base}/ffn/w1"] = w(f"{base}/ffn/w1", (d, f), d)
        p[f"{base}/ffn/b1"] = np.zeros(f, dtype=np.float32)
        p[f"{base}/ffn/w2"] = w(f"{base}/ffn/w2", (f, d), f)
        p[f"{base}/ffn/b2"] = np.zeros(d, dtype=np.float32)
    p["encoder/final_norm/gain"] = np.ones(d, dtype=np.float32)
    p["encoder/final_norm/bias"] = np.zeros(d, dtype=np.float32)
    p["ctc_head/weight"] = w("ctc_head/weight", (d, config.vocab_size), d)
    p["ctc_head/bias"] = np.zeros(config.vocab_size, dtype=np.float32)
    return p


def _check_frames(config: EncoderConfig, frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != config.input_dim:
        raise ValueError(
            f"frames must be (T, {config.input_dim}), got {frames.shape}")
    if frames.shape[0] < 1:
        raise ValueError("need at least one frame")
    if frames.shape[0] > config.max_len:
        raise ValueError(f"sequence length {frames.shape[0]} exceeds max_len {config.max_len}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames contain non-finite values")
    return frames


def encode(leaves: dict[str, ad.Tensor], config: EncoderConfig, frames_node: ad.Tensor) -> ad.Tensor:
    """Encoder stack on an already-embedded input node; returns (T, model_dim)."""
    t = frames_node.shape[0]
    if t > config.max_len:
        raise ValueError(f"sequence length {t} exceeds max_len {config.max_len}")
    h, dh = config.num_heads, config.head_dim
    x = ad.add(ad.add(ad.matmul(frames_node, leaves["feature_proj/weight"]),
                      leaves["feature_proj/bias"]),
               ad.slice_rows(leaves["feature_proj/pos_embedding"], t))

    for i in range(config.num_layers):
        base = f"encoder/layer_{i}"
        pre = ad.layer_norm(x, leaves[f"{base}/norm1/gain"], leaves[f"{base}/norm1/bias"])

        def heads(node: ad.Tensor) -> ad.Tensor:
            return ad.transpose(ad.reshape(node, (t, h, dh)), (1, 0, 2))

        q = heads(ad.add(ad.matmul(pre, leaves[f"{base}/attn/wq"]), leaves[f"{base}/attn/bq"]))
        k = heads(ad.add(ad.matmul(pre, leaves[f"{base}/attn/wk"]), leaves[f"{base}/attn/bk"]))
        v = heads(ad.add(ad.matmul(pre, leaves[f"{base}/attn/wv"]), leaves[f"{base}/attn/bv"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        ctx = ad.matmul(ad.softmax_last(scores), v)
        merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (t, config.model_dim))
        x = ad.add(x, ad.add(ad.matmul(merged, leaves[f"{base}/attn/wo"]),
                             leaves[f"{base}/attn/bo"]))

        pre2 = ad.layer_norm(x, leaves[f"{base}/norm2/gain"], leaves[f"{base}/norm2/bias"])
        hid = ad.gelu(ad.add(ad.matmul(pre2, leaves[f"{base}/ffn/w1"]), leaves[f"{base}/ffn/b1"]))
        x = ad.add(x, ad.add(ad.matmul(hid, leaves[f"{base}/ffn/w2"]), leaves[f"{base}/ffn/b2"]))

    return ad.layer_norm(x, leaves["encoder/final_norm/gain"], leaves["encoder/final_norm/bias"])


def forward(params: ParameterTree, frames: np.ndarray) -> ad.Tensor:
    """Per-frame unnormalized log-scores (T, vocab_size), graph attached.

    params.config must carry the EncoderConfig the tree was built with.
    """
    config = params.config
    if config is None:
        raise ValueError("parameter tree has no attached EncoderConfig")
    frames = _check_frames(config, frames)
    leaves = ad.make_leaves(params)
    hidden = encode(leaves, config, ad.constant(frames, dtype=params["ctc_head/weight"].dtype))
    return ad.add(ad.matmul(hidden, leaves["ctc_head/weight"]), leaves["ctc_head/bias"])


def forward_values(params: ParameterTree, frames: np.ndarray) -> np.ndarray:
    """Graph-free twin of forward() for decoding, evaluation and finite
    differences; must mirror encode() op for op (test-pinned, bitwise)."""
    config = params.config
    if config is None:
        raise ValueError("parameter tree has no attached EncoderConfig")
    frames = _check_frames(config, frames)
    p = params
    dtype = p["ctc_head/weight"].dtype
    t = frames.shape[0]
    h, dh = config.num_heads, config.head_dim

    def norm(x, gain, bias):
        mean = x.mean(axis=-1, keepdims=True, dtype=np.float64)
        centered = x.astype(np.float64) - mean
        var = (centered**2).mean(axis=-1, keepdims=True)
        xhat = (centered * (1.0 / np.sqrt(var + ad.LN_EPS))).astype(x.dtype)
        return xhat * gain + bias

    x = frames.astype(dtype) @ p["feature_proj/weight"] + p["feature_proj/bias"] \
        + p["feature_proj/pos_embedding"][:t].copy()
    for i in range(config.num_layers):
        base = f"encoder/layer_{i}"
        pre = norm(x, p[f"{base}/norm1/gain"], p[f"{base}/norm1/bias"])
        q = (pre @ p[f"{base}/attn/wq"] + p[f"{base}/attn/bq"]).reshape(t, h, dh)
        k = (pre @ p[f"{base}/attn/wk"] + p[f"{base}/attn/bk"]).reshape(t, h, dh)
        v = (pre @ p[f"{base}/attn/wv"] + p[f"{base}/attn/bv"]).reshape(t, h, dh)
        q = np.ascontiguousarray(q.transpose(1, 0, 2))
        k = np.ascontiguousarray(k.transpose(1, 0, 2))
        v = np.ascontiguousarray(v.transpose(1, 0, 2))
        scores = (q @ np.ascontiguousarray(k.transpose(0, 2, 1))) * (1.0 / math.sqrt(dh))
        shifted = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(shifted.astype(np.float64))
        attn = (e / e.sum(axis=-1, keepdims=True)).astype(dtype)
        merged = np.ascontiguousarray((attn @ v).transpose(1, 0, 2)).reshape(t, config.model_dim)
        x = x + (merged @ p[f"{base}/attn/wo"] + p[f"{base}/attn/bo"])
        pre2 = norm(x, p[f"{base}/norm2/gain"], p[f"{base}/norm2/bias"])
        hid = pre2 @ p[f"{base}/ffn/w1"] + p[f"{base}/ffn/b1"]
        inner = ad.GELU_C * (hid + 0.044715 * hid**3)
        hid = (0.5 * hid * (1.0 + np.tanh(inner))).astype(hid.dtype)
        x = x + (hid @ p[f"{base}/ffn/w2"] + p[f"{base}/ffn/b2"])
    x = norm(x, p["encoder/final_norm/gain"], p["encoder/final_norm/bias"])
    return x @ p["ctc_head/weight"] + p["ctc_head/bias"]
