"""The full encoder-processor-decoder surrogate and its ablation switches.

Parameter manifest changes per switch (names are dotted attribute paths):

* ``anchors="fps"``       -> ``anchors.positions0`` is a frozen buffer
* ``anchors="learned"``   -> ``anchors.positions0`` becomes trainable
* ``anchors="abstract"``  -> no ``anchors.*`` entries; adds ``encoder.queries``
* ``gwa="enc"``           -> adds ``anchors.delta.<level>.*`` and ``anchors.kappa_raw.<level>``
                             for every encoder level
* ``gwa="dec"``           -> adds the same entries under level key ``dec``
* ``gwa="both"``          -> union of the two above
* ``shared_embedding=False`` -> adds ``dec_embedding.B`` and ``dec_embedding.log_sigma``
* ``distance_field=False``   -> drops ``decoder.xi_proj.*``; the decoder query MLP
                                input and the encoder key/value inputs shrink
* ``global_conditioning=False`` -> drops ``encoder.global_mlp.*``
* ``rhs="mlp"``           -> ``processor.ln.*``/``processor.attn.*`` replaced by ``processor.mlp.*``
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .decoder import DEC_LEVEL, Decoder, DecoderConfig, FieldDecomposition, decode, decoder_bias
from .encoder import Encoder, EncoderConfig, encode
from .errors import ContractError
from .geometry import AnchorSet, RFFEmbedding
from .nn import Module
from .processor import OdeConfig, Processor, rollout
from .tensor import Tensor

ANCHOR_MODES = ("fps", "learned", "abstract")
GWA_MODES = ("none", "enc", "dec", "both")


@dataclass
class ModelConfig:
    d_c: int = 2
    d: int = 64
    heads: int = 4
    L: int = 16
    enc_levels: int = 3
    self_loops: int = 1
    ffn_mult: int = 2
    d_feat: int = 1  # raw per-point feature columns; column 0 is the distance field
    d_out: int = 2
    n_globals: int = 0
    transient: bool = True
    rhs: str = "attention"
    h: float = 1.0
    dt_pred: float = 10.0
    rff_sigma: float = 0.3
    gwa_alpha: float = 1.0
    anchors: str = "fps"
    gwa: str = "none"
    shared_embedding: bool = True
    distance_field: bool = True
    global_conditioning: bool = True
    boundary_pc: bool = False
    single_head_no_ln: bool = False
    seed: int = 42

    def validate(self) -> None:
        if self.anchors not in ANCHOR_MODES:
            raise ContractError(f"anchors must be one of {ANCHOR_MODES}, got {self.anchors!r}")
        if self.gwa not in GWA_MODES:
            raise ContractError(f"gwa must be one of {GWA_MODES}, got {self.gwa!r}")
        if self.anchors == "abstract" and self.gwa != "none":
            raise ContractError("Gaussian windows need spatial anchors; abstract queries have none")
        if self.d % 2 or self.d % self.heads:
            raise ContractError(f"d={self.d} must be even and divisible by heads={self.heads}")
        if self.L < 1:
            raise ContractError("need at least one anchor")

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    # derived widths
    @property
    def enc_feat_width(self) -> int:
        base = self.d_feat if self.distance_field else max(self.d_feat - 1, 0)
        return base + (self.d_out if self.transient else 0)

    @property
    def d_xi(self) -> int:
        return 1 if self.distance_field else 0

    @property
    def gwa_levels(self) -> tuple[str, ...]:
        levels: list[str] = []
        if self.gwa in ("enc", "both"):
            levels += [str(i) for i in range(self.enc_levels)]
        if self.gwa in ("dec", "both"):
            levels.append(DEC_LEVEL)
        return tuple(levels)


@dataclass
class ModelInputs:
    """Normalised arrays for one forward pass."""

    enc_coords: np.ndarray
    enc_features: np.ndarray
    query_coords: np.ndarray
    query_xi: np.ndarray | None = None
    globals: np.ndarray | None = None


class CourantModel(Module):
    def __init__(self, cfg: ModelConfig, anchor_positions: np.ndarray | None = None, sigma0: float = 1.0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.embedding = RFFEmbedding(cfg.d, cfg.d_c, rng, cfg.rff_sigma)
        self.dec_embedding = (
            None if cfg.shared_embedding else RFFEmbedding(cfg.d, cfg.d_c, rng, cfg.rff_sigma)
        )
        if cfg.anchors == "abstract":
            self.anchors = None
        else:
            if anchor_positions is None:
                anchor_positions = np.zeros((cfg.L, cfg.d_c))
            anchor_positions = np.asarray(anchor_positions, dtype=np.float64)
            if anchor_positions.shape != (cfg.L, cfg.d_c):
                raise ContractError(
                    f"anchor positions must be ({cfg.L}, {cfg.d_c}), got {anchor_positions.shape}"
                )
            self.anchors = AnchorSet(
                anchor_positions,
                cfg.d,
                rng,
                gwa_levels=cfg.gwa_levels,
                sigma0=sigma0,
                learnable=cfg.anchors == "learned",
            )
        enc_cfg = EncoderConfig(
            levels=cfg.enc_levels,
            d=cfg.d,
            heads=cfg.heads,
            ffn_mult=cfg.ffn_mult,
            self_loops=cfg.self_loops,
            query_mode=cfg.anchors,
            gwa=cfg.gwa in ("enc", "both"),
            global_conditioning=cfg.global_conditioning,
        )
        self.encoder = Encoder(enc_cfg, cfg.d + cfg.enc_feat_width, cfg.n_globals, cfg.L, rng)
        self.processor = (
            Processor(OdeConfig(cfg.rhs, cfg.h, 1, cfg.dt_pred), cfg.d, cfg.heads, rng)
            if cfg.transient
            else None
        )
        dec_heads = 1 if cfg.single_head_no_ln else cfg.heads
        self.decoder = Decoder(
            DecoderConfig(
                d=cfg.d,
                heads=dec_heads,
                d_out=cfg.d_out,
                d_xi=cfg.d_xi,
                gwa=cfg.gwa in ("dec", "both"),
                single_head_no_ln=cfg.single_head_no_ln,
            ),
            rng,
        )

    @property
    def dec_emb(self) -> RFFEmbedding:
        return self.dec_embedding if self.dec_embedding is not None else self.embedding

    def manifest(self) -> list[dict]:
        return [
            {"name": n, "shape": list(p.shape), "trainable": p.trainable}
            for n, p in self.named_parameters()
        ]

    # -- forward pieces -----------------------------------------------------
    def encode(self, inp: ModelInputs) -> Tensor:
        g = inp.globals if self.cfg.global_conditioning and self.cfg.n_globals > 0 else None
        return encode(self.encoder, inp.enc_coords, inp.enc_features, self.anchors, self.embedding, g)

    def queries(self, inp: ModelInputs) -> Tensor:
        return self.decoder.prepare_queries(self.dec_emb, inp.query_coords, inp.query_xi)

    def decode(self, z, q: Tensor, inp: ModelInputs) -> Tensor:
        bias = decoder_bias(self.anchors, z, inp.query_coords) if self.decoder.cfg.gwa else None
        return self.decoder(z, q, bias)[0]

    def rollout(self, z0, steps: int):
        if self.processor is None:
            raise ContractError("this model is steady; it has no processor")
        return rollout(self.processor, z0, steps)

    def predict(self, inp: ModelInputs, steps: int = 0) -> list[Tensor]:
        """Predictions for latent states 0..steps (a single entry when steady)."""
        z0 = self.encode(inp)
        q = self.queries(inp)
        states = [z0] if steps == 0 else self.rollout(z0, steps).states
        return [self.decode(z, q, inp) for z in states]

    def decompose(self, z, inp: ModelInputs) -> FieldDecomposition:
        return decode(self.decoder, self.dec_emb, z, inp.query_coords, inp.query_xi, self.anchors)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(arrays)
            extra = set(arrays) - set(params)
            if missing or extra:
                raise ContractError(
                    f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
                )
        for name, arr in arrays.items():
            p = params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()


def no_grad_predict(model: CourantModel, inp: ModelInputs, steps: int = 0) -> list[np.ndarray]:
    with T.no_grad():
        return [p.data for p in model.predict(inp, steps)]
