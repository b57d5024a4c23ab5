"""Coordinate machinery: Fourier-feature lifting, anchors and window biases."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import MLP, Module, Parameter
from .tensor import Tensor

DEFAULT_RFF_SIGMA = 0.3
_KAPPA_ONE = math.log(math.e - 1.0)  # softplus^-1(1)


class RFFEmbedding(Module):
    """``x -> [cos(2 pi s B x), sin(2 pi s B x)]`` with learnable ``B`` and ``s``.

    ``s`` is stored as ``log_sigma`` so it stays positive under gradient steps.
    """

    def __init__(self, d: int, d_c: int, rng: np.random.Generator, sigma: float = DEFAULT_RFF_SIGMA):
        if d % 2:
            raise ContractError(f"embedding width must be even, got {d}")
        self.d = d
        self.d_c = d_c
        self.B = Parameter(rng.standard_normal((d // 2, d_c)))
        self.log_sigma = Parameter(np.array(math.log(sigma)))

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma.data))

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.d_c:
            raise ContractError(f"expected {self.d_c}-d coordinates, got width {x.shape[-1]}")
        scale = T.exp(self.log_sigma) * (2.0 * math.pi)
        proj = T.matmul(x, self.B.transpose()) * scale
        return T.concat([T.cos(proj), T.sin(proj)], axis=-1)


def rff_embed(emb: RFFEmbedding, x) -> Tensor:
    return emb(x)


def fps_sample(points: np.ndarray, L: int, seed: int = 0, first: int | None = None) -> np.ndarray:
    """Greedy farthest-point sampling.

    The first index is drawn uniformly from ``seed`` unless ``first`` is given.
    Ties in the max-min distance go to the lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if L > n:
        raise ContractError(f"cannot sample {L} anchors from {n} points")
    if L <= 0:
        return np.zeros(0, dtype=np.int64)
    if first is None:
        first = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(L, dtype=np.int64)
    chosen[0] = first
    mind = np.linalg.norm(points - points[first], axis=1)
    for i in range(1, L):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def distance_field(queries: np.ndarray, boundary: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact minimum Euclidean distance from each query to the boundary set."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    boundary = np.atleast_2d(np.asarray(boundary, dtype=np.float64))
    if boundary.shape[0] == 0:
        raise ContractError("distance_field needs at least one boundary point")
    out = np.empty(queries.shape[0])
    for s in range(0, queries.shape[0], chunk):
        q = queries[s : s + chunk]
        d2 = ((q[:, None, :] - boundary[None, :, :]) ** 2).sum(-1)
        out[s : s + chunk] = np.sqrt(d2.min(axis=1))
    return out


class AnchorSet(Module):
    """Base anchor cloud plus per-level residual updates and window widths.

    Only levels listed in ``gwa_levels`` get an update MLP and width
    multipliers; other levels read ``positions0`` unchanged. Level keys are
    encoder level indices as strings plus ``"dec"`` for the decoder.
    """

    def __init__(
        self,
        positions0: np.ndarray,
        d: int,
        rng: np.random.Generator,
        gwa_levels: tuple[str, ...] = (),
        sigma0: float = 1.0,
        learnable: bool = False,
    ):
        positions0 = np.asarray(positions0, dtype=np.float64)
        self.L, self.d_c = positions0.shape
        self.positions0 = Parameter(positions0, trainable=learnable)
        self.sigma0 = Parameter(np.array(float(sigma0)), trainable=False)
        self.delta = {lvl: MLP(d, d, self.d_c, rng, zero_last=True) for lvl in gwa_levels}
        self.kappa_raw = {lvl: Parameter(np.full(self.L, _KAPPA_ONE)) for lvl in gwa_levels}

    def has_level(self, level) -> bool:
        return str(level) in self.delta

    def widths(self, level) -> Tensor:
        """``sigma(level, j) = sigma0 * softplus(kappa_raw)``."""
        return T.softplus(self.kappa_raw[str(level)]) * self.sigma0


def update_anchors(anchors: AnchorSet, level, latents) -> Tensor:
    """``p_j = p_j0 + delta_level(z_j)``; identity at initialisation."""
    key = str(level)
    if key not in anchors.delta:
        return anchors.positions0
    return anchors.positions0 + anchors.delta[key](latents)


def window_scale(coords: np.ndarray, L: int, alpha: float = 1.0) -> float:
    """``alpha * diag(bbox) / sqrt(L)``: initial Gaussian window width."""
    coords = np.asarray(coords, dtype=np.float64)
    diag = float(np.linalg.norm(coords.max(axis=0) - coords.min(axis=0)))
    return alpha * diag / math.sqrt(L)


def gwa_bias(anchor_pos, key_pos, sigma) -> Tensor:
    """Logit bias ``-|p_j - x_i|^2 / sigma_j^2`` of shape (anchors, keys)."""
    anchor_pos = T.as_tensor(anchor_pos)
    sigma = T.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ContractError("Gaussian window widths must be strictly positive")
    key = np.asarray(key_pos.data if isinstance(key_pos, Tensor) else key_pos, dtype=np.float64)
    L = anchor_pos.shape[0]
    diff = anchor_pos.reshape(L, 1, -1) - key[None, :, :]
    sq = (diff * diff).sum(axis=-1)
    return -(sq / (sigma * sigma).reshape(L, 1))
