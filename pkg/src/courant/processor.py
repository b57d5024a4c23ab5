"""Self-attention NeuralODE over latent tokens, explicit Euler rollout, Jacobians."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, SizeError
from .linalg import eigvals
from .nn import MLP, LayerNorm, Module, MultiHeadAttention
from .tensor import Tensor

RHS_MODES = ("attention", "mlp")
JACOBIAN_CAP = 4096


@dataclass
class OdeConfig:
    rhs: str = "attention"
    h: float = 1.0
    steps: int = 10
    dt_pred: float = 10.0  # physical seconds per step; metadata only

    def validate(self) -> None:
        if self.rhs not in RHS_MODES:
            raise ContractError(f"rhs must be one of {RHS_MODES}, got {self.rhs!r}")
        if not self.h > 0:
            raise ContractError("ODE step h must be positive")
        if self.steps < 1:
            raise ContractError("ODE needs at least one step")


class Processor(Module):
    """``f(Z)``: one pre-LN multi-head self-attention (or a per-token MLP).

    There is no residual inside ``f``; the Euler update supplies it.
    """

    def __init__(self, cfg: OdeConfig, d: int, heads: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        if cfg.rhs == "attention":
            self.ln = LayerNorm(d)
            self.attn = MultiHeadAttention(d, d, d, heads, rng)
        else:
            self.mlp = MLP(d, 2 * d, d, rng)

    def rhs(self, z) -> Tensor:
        if self.cfg.rhs == "attention":
            h = self.ln(z)
            return self.attn(h, h)[0]
        return self.mlp(z)


@dataclass
class LatentTrajectory:
    states: list = field(default_factory=list)  # T+1 tensors of shape (L, d)
    times: np.ndarray | None = None

    def array(self) -> np.ndarray:
        return np.stack([s.data for s in self.states])

    def __len__(self) -> int:
        return len(self.states)


def rollout(proc: Processor, z0, steps: int, t0: float = 0.0) -> LatentTrajectory:
    """``Z_{k+1} = Z_k + h f(Z_k)`` for ``steps`` steps; entry 0 is ``z0`` itself."""
    if steps < 1:
        raise ContractError("rollout needs at least one step")
    z = T.as_tensor(z0)
    h = proc.cfg.h
    states = [z]
    for k in range(1, steps + 1):
        z = z + proc.rhs(z) * h
        if not np.all(np.isfinite(z.data)):
            raise NumericError(f"non-finite latent state at rollout step {k}")
        states.append(z)
    times = t0 + proc.cfg.dt_pred * np.arange(steps + 1)
    return LatentTrajectory(states, times)


@dataclass
class JacobianResult:
    matrix: np.ndarray
    eigenvalues: np.ndarray  # of df/dZ
    step_eigenvalues: np.ndarray  # of I + h df/dZ, the one-step Euler map


def jacobian(proc: Processor, z, cap: int = JACOBIAN_CAP, with_eigs: bool = True) -> JacobianResult:
    """Exact ``df/dZ`` for row-major (token-major) flattening of ``Z``.

    Row ``i`` is the vector-Jacobian product with the unit cotangent ``e_i``;
    the graph is recorded once and replayed for each row.
    """
    zd = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    n = zd.size
    if n > cap:
        raise SizeError(f"Jacobian of size {n} exceeds cap {cap}")
    zt = Tensor(zd.copy(), requires_grad=True)
    with T.enable_grad():
        out = proc.rhs(zt)
    jac = np.zeros((n, n))
    if out.requires_grad:
        tape = T.ComputationTape(out)
        seed = np.zeros(out.shape)
        flat = seed.reshape(-1)
        for i in range(n):
            flat[i] = 1.0
            g = tape.vjp(seed).get(id(zt))
            if g is not None:
                jac[i] = g.reshape(-1)
            flat[i] = 0.0
    if not with_eigs:
        return JacobianResult(jac, np.zeros(0, complex), np.zeros(0, complex))
    ev = eigvals(jac)
    return JacobianResult(jac, ev, 1.0 + proc.cfg.h * ev)


def write_eigs_csv(path, results: dict[int, JacobianResult]) -> None:
    """``eigs.csv``: step, operator (J or I+hJ), re, im, abs, arg."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "operator", "re", "im", "abs", "arg"])
        for step, res in sorted(results.items()):
            for op, ev in (("J", res.eigenvalues), ("I+hJ", res.step_eigenvalues)):
                for lam in ev:
                    w.writerow(
                        [step, op]
                        + [f"{v:.17g}" for v in (lam.real, lam.imag, abs(lam), np.angle(lam))]
                    )
