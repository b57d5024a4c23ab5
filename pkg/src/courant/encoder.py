"""Multi-level Perceiver that compresses a point cloud into anchored latents."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .geometry import AnchorSet, RFFEmbedding, gwa_bias, update_anchors
from .nn import MLP, LayerNorm, Module, MultiHeadAttention, Parameter
from .tensor import Tensor

QUERY_MODES = ("fps", "learned", "abstract")


@dataclass
class EncoderConfig:
    levels: int = 3
    d: int = 128
    heads: int = 3
    ffn_mult: int = 2
    self_loops: int = 1
    query_mode: str = "fps"
    gwa: bool = False
    global_conditioning: bool = True

    def validate(self) -> None:
        if self.levels < 1:
            raise ContractError("encoder needs at least one level")
        if self.d % self.heads:
            raise ContractError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.query_mode not in QUERY_MODES:
            raise ContractError(f"query_mode must be one of {QUERY_MODES}, got {self.query_mode!r}")


def build_kv(coords, features, emb: RFFEmbedding, g: Tensor | None = None) -> Tensor:
    """Key/value tokens ``[gamma(x_i) + g, f_i]``; ``g`` touches only the embedding block."""
    coords = np.asarray(coords, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != coords.shape[0]:
        raise ContractError(
            f"features must be an (N, d_f) array matching {coords.shape[0]} points, got {features.shape}"
        )
    c = emb(coords)
    if g is not None:
        c = c + g
    if features.shape[1] == 0:
        return c
    return T.concat([c, Tensor(features)], axis=-1)


class _SelfBlock(Module):
    def __init__(self, d: int, heads: int, hidden: int, rng):
        self.ln_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, d, d, heads, rng)
        self.ln_ffn = LayerNorm(d)
        self.ffn = MLP(d, hidden, d, rng)

    def __call__(self, z: Tensor) -> Tensor:
        h = self.ln_attn(z)
        z = z + self.attn(h, h)[0]
        return z + self.ffn(self.ln_ffn(z))


class PerceiverLevel(Module):
    """Residual cross-attention onto the tokens, then residual self-attention.

    Every sublayer is pre-layernorm and followed by its own feed-forward
    network of width ``ffn_mult * d``.
    """

    def __init__(self, d: int, d_kv: int, heads: int, ffn_mult: int, self_loops: int, rng):
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d_kv)
        self.cross = MultiHeadAttention(d, d_kv, d, heads, rng)
        self.ln_ffn = LayerNorm(d)
        self.ffn = MLP(d, ffn_mult * d, d, rng)
        self.blocks = [_SelfBlock(d, heads, ffn_mult * d, rng) for _ in range(self_loops)]

    def __call__(self, z: Tensor, kv: Tensor, bias=None) -> tuple[Tensor, Tensor]:
        att, w = self.cross(self.ln_q(z), self.ln_kv(kv), bias)
        z = z + att
        z = z + self.ffn(self.ln_ffn(z))
        for blk in self.blocks:
            z = blk(z)
        return z, w


class Encoder(Module):
    def __init__(
        self,
        cfg: EncoderConfig,
        d_kv: int,
        n_globals: int,
        L: int,
        rng: np.random.Generator,
    ):
        cfg.validate()
        self.cfg = cfg
        self.levels = [
            PerceiverLevel(cfg.d, d_kv, cfg.heads, cfg.ffn_mult, cfg.self_loops, rng)
            for _ in range(cfg.levels)
        ]
        if cfg.query_mode == "abstract":
            self.queries = Parameter(rng.normal(0.0, 1.0, size=(L, cfg.d)))
        self.global_mlp = (
            MLP(n_globals, cfg.d, cfg.d, rng) if cfg.global_conditioning and n_globals > 0 else None
        )

    def global_vector(self, globals_) -> Tensor | None:
        if self.global_mlp is None:
            return None
        g = np.asarray(globals_, dtype=np.float64).reshape(1, -1)
        return self.global_mlp(g)


def init_queries(cfg: EncoderConfig, encoder: Encoder, anchors: AnchorSet | None, emb: RFFEmbedding) -> Tensor:
    """Initial latents: embedded anchors, or free vectors in abstract mode."""
    if cfg.query_mode == "abstract":
        return encoder.queries
    return emb(anchors.positions0)


def encode(
    encoder: Encoder,
    coords,
    features,
    anchors: AnchorSet | None,
    emb: RFFEmbedding,
    globals_=None,
    return_weights: bool = False,
):
    """Run every level; returns the (L, d) latent matrix (and per-level weights)."""
    cfg = encoder.cfg
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] == 0:
        raise ContractError("encode needs a non-empty point cloud")
    g = encoder.global_vector(globals_) if globals_ is not None else None
    kv = build_kv(coords, features, emb, g)
    z = init_queries(cfg, encoder, anchors, emb)
    weights = []
    for lvl, level in enumerate(encoder.levels):
        bias = None
        if cfg.gwa and anchors is not None and anchors.has_level(lvl):
            pos = update_anchors(anchors, lvl, z)
            bias = gwa_bias(pos, coords, anchors.widths(lvl))
        z, w = level(z, kv, bias)
        weights.append(w)
    return (z, weights) if return_weights else z
