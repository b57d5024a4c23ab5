"""Single cross-attention decoder and its exact per-anchor field decomposition.

The decoder output is affine in the value vectors, so for every query

    prediction = u0 + sum_k delta_k

holds exactly, where ``u0`` is the output with all latents set to zero and
``delta_k`` is the weight-modulated value mass of anchor ``k`` minus its
share of that zero-latent baseline.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError
from .geometry import AnchorSet, RFFEmbedding, gwa_bias, update_anchors
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Tensor

DEC_LEVEL = "dec"


@dataclass
class DecoderConfig:
    d: int = 128
    heads: int = 3
    d_out: int = 2
    d_xi: int = 1
    gwa: bool = False
    single_head_no_ln: bool = False

    def validate(self) -> None:
        if self.single_head_no_ln and self.heads != 1:
            raise ContractError("single-head mode requires heads == 1")
        if self.d % self.heads:
            raise ContractError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def d_head(self) -> int:
        return self.d // self.heads


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        d = cfg.d
        self.xi_proj = Linear(cfg.d_xi, d, rng) if cfg.d_xi > 0 else None
        self.query_mlp = MLP(2 * d if cfg.d_xi > 0 else d, d, d, rng)
        if cfg.single_head_no_ln:
            self.ln = None
            self.wq = Linear(d, d, rng)
            self.wk = Linear(d, d, rng)
            self.wv = Linear(d, cfg.d_out, rng, bias=False)
            self.wo = None
            self.wout = None
        else:
            self.ln = LayerNorm(d)
            self.wq = Linear(d, d, rng)
            self.wk = Linear(d, d, rng)
            self.wv = Linear(d, d, rng)
            self.wo = Linear(d, d, rng)
            self.wout = Linear(d, cfg.d_out, rng)

    # -- query side (independent of the latents) --------------------------
    def embed_query(self, emb: RFFEmbedding, coords, xi=None) -> Tensor:
        """``e = MLP([gamma(x), W_xi xi])``."""
        g = emb(np.asarray(coords, dtype=np.float64))
        if self.xi_proj is not None:
            xi = np.asarray(xi, dtype=np.float64).reshape(g.shape[0], -1)
            if xi.shape[1] != self.cfg.d_xi:
                raise ContractError(f"expected {self.cfg.d_xi} query features, got {xi.shape[1]}")
            g = T.concat([g, self.xi_proj(xi)], axis=-1)
        return self.query_mlp(g)

    def _split(self, x: Tensor) -> Tensor:
        n, w = x.shape
        h = self.cfg.heads
        return x.reshape(n, h, w // h).transpose(1, 0, 2)

    def prepare_queries(self, emb: RFFEmbedding, coords, xi=None) -> Tensor:
        """Per-head query projections, shape (H, N, d_h)."""
        return self._split(self.wq(self.embed_query(emb, coords, xi)))

    # -- latent side --------------------------------------------------------
    def __call__(self, z, q: Tensor, bias=None, frozen_weights=None):
        """Returns ``(prediction (N, d_out), weights (H, N, L), values (H, L, d_v))``."""
        z = T.as_tensor(z)
        zt = self.ln(z) if self.ln is not None else z
        k = self._split(self.wk(zt))
        v = self._split(self.wv(zt))
        if frozen_weights is not None:
            w = T.as_tensor(frozen_weights)
        else:
            logits = T.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(k.shape[-1]))
            if bias is not None:
                logits = logits + bias
            w = T.softmax(logits, axis=-1)
        att = T.matmul(w, v)
        h, n, dv = att.shape
        merged = att.transpose(1, 0, 2).reshape(n, h * dv)
        if self.wo is None:
            return merged, w, v
        return self.wout(self.wo(merged)), w, v

    def head_maps(self) -> np.ndarray:
        """Per-head value-to-output maps ``W_O^h W_out``, shape (H, d_v, d_out)."""
        if self.wo is None:
            return np.eye(self.cfg.d_out)[None]
        dh = self.cfg.d_head
        wo = self.wo.weight.data.reshape(self.cfg.heads, dh, self.cfg.d)
        return wo @ self.wout.weight.data


def decoder_bias(anchors: AnchorSet | None, z, coords) -> Tensor | None:
    """Window bias (N, L) for the decoder, or None when the decoder has no window."""
    if anchors is None or not anchors.has_level(DEC_LEVEL):
        return None
    pos = update_anchors(anchors, DEC_LEVEL, z)
    return gwa_bias(pos, coords, anchors.widths(DEC_LEVEL)).transpose()


@dataclass
class FieldDecomposition:
    prediction: np.ndarray  # (N, d_out)
    contributions: np.ndarray  # (L, N, d_out)
    offset: np.ndarray  # (N, d_out)
    weights: np.ndarray  # (H, N, L)

    def reconstruction(self) -> np.ndarray:
        return self.offset + self.contributions.sum(axis=0)

    def residual(self) -> float:
        """Max-abs gap between ``u0 + sum(delta)`` and the prediction."""
        return float(np.abs(self.reconstruction() - self.prediction).max())


def decode(
    decoder: Decoder,
    emb: RFFEmbedding,
    z,
    coords,
    xi=None,
    anchors: AnchorSet | None = None,
) -> FieldDecomposition:
    """Predict at the query points and split the prediction per anchor."""
    coords = np.asarray(coords, dtype=np.float64)
    zd = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if not np.all(np.isfinite(zd)):
        raise ContractError("decode needs finite latents")
    with T.no_grad():
        q = decoder.prepare_queries(emb, coords, xi)
        pred, w, v = decoder(zd, q, decoder_bias(anchors, zd, coords) if decoder.cfg.gwa else None)
        zero = np.zeros_like(zd)
        pred0, _, v0 = decoder(zero, q, decoder_bias(anchors, zero, coords) if decoder.cfg.gwa else None)
    per_anchor = np.einsum("hkd,hdo->hko", v.data - v0.data, decoder.head_maps())
    delta = np.einsum("hnk,hko->kno", w.data, per_anchor)
    return FieldDecomposition(pred.data, delta, pred0.data, w.data)


def decode_single_head_pod(
    decoder: Decoder,
    emb: RFFEmbedding,
    z,
    coords,
    xi=None,
    anchors: AnchorSet | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Separable factors ``(phi (L, N), b (L, d_out))`` with ``u(x_n) = sum_l b_l phi_l(x_n)``."""
    if not decoder.cfg.single_head_no_ln:
        raise ContractError("decode_single_head_pod requires single_head_no_ln mode")
    zd = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    with T.no_grad():
        q = decoder.prepare_queries(emb, coords, xi)
        _, w, v = decoder(zd, q, decoder_bias(anchors, zd, coords) if decoder.cfg.gwa else None)
    return w.data[0].T.copy(), v.data[0].copy()


def dominant_latent_map(decomp: FieldDecomposition) -> np.ndarray:
    """Per query, the anchor with the largest head-averaged weight (ties -> lowest index)."""
    return np.argmax(decomp.weights.mean(axis=0), axis=1)


def rank_contributions(decomp: FieldDecomposition, mode: str = "norm") -> np.ndarray:
    """Anchor indices ordered by decreasing contribution size; ties keep index order."""
    c = decomp.contributions.reshape(decomp.contributions.shape[0], -1)
    if mode == "norm":
        score = np.linalg.norm(c, axis=1)
    elif mode == "peak":
        score = np.abs(c).max(axis=1) if c.shape[1] else np.zeros(c.shape[0])
    else:
        raise ContractError(f"rank mode must be 'norm' or 'peak', got {mode!r}")
    return np.argsort(-score, kind="stable")


def _coord_names(d_c: int) -> list[str]:
    return ["x", "y", "z"][:d_c] if d_c <= 3 else [f"x{i}" for i in range(d_c)]


def _write_field_csv(path: Path, coords: np.ndarray, values: np.ndarray) -> None:
    header = _coord_names(coords.shape[1]) + [f"u{i}" for i in range(values.shape[1])]
    rows = np.hstack([coords, values])
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(f"{v:.17g}" for v in r) + "\n")


def export_decomposition(
    decomp: FieldDecomposition,
    coords: np.ndarray,
    out_dir,
    anchors: list[int] | None = None,
    ranking: np.ndarray | None = None,
    rank_mode: str = "norm",
) -> Path:
    """Write ``manifest.json``, ``prediction.csv``, ``offset.csv`` and ``delta_<k>.csv`` files.

    Every CSV has the coordinate columns first, then the field components.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    coords = np.asarray(coords, dtype=np.float64)
    if ranking is None:
        ranking = rank_contributions(decomp, rank_mode)
    if anchors is None:
        anchors = [int(k) for k in ranking]
    _write_field_csv(out / "prediction.csv", coords, decomp.prediction)
    _write_field_csv(out / "offset.csv", coords, decomp.offset)
    files = {}
    for k in anchors:
        name = f"delta_{int(k)}.csv"
        _write_field_csv(out / name, coords, decomp.contributions[int(k)])
        files[str(int(k))] = name
    manifest = {
        "n_points": int(coords.shape[0]),
        "d_c": int(coords.shape[1]),
        "d_out": int(decomp.prediction.shape[1]),
        "n_anchors": int(decomp.contributions.shape[0]),
        "heads": int(decomp.weights.shape[0]),
        "rank_mode": rank_mode,
        "ranking": [int(k) for k in ranking],
        "anchors": [int(k) for k in anchors],
        "files": files,
        "prediction": "prediction.csv",
        "offset": "offset.csv",
        "residual": decomp.residual(),
        "columns": _coord_names(coords.shape[1]) + [f"u{i}" for i in range(decomp.prediction.shape[1])],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out
