"""Losses, normalisation, AdamW and the epoch loop.

Batches are lists of ragged samples: each sample gets its own tape and the
per-sample gradients are summed in a fixed order, so runs are bit-reproducible
whatever the worker count.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import PointCloud
from .errors import ContractError, NumericError
from .geometry import fps_sample, window_scale
from .model import CourantModel, ModelConfig, ModelInputs
from .tensor import Tensor

SCHEDULES = ("two-phase", "cosine", "step")
LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_nmae", "wall_seconds")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 500
    batch_size: int = 4
    clip: float = 2.0
    weight_decay: float = 1e-5
    schedule: str = "two-phase"
    step_size: int = 100
    gamma: float = 0.5
    rollout: int = 10
    window_stride: int = 0  # 0 -> same as rollout
    all_steps: bool = True
    seed: int = 42
    workers: int = 1

    def validate(self) -> None:
        if self.clip <= 0:
            raise ContractError("clip must be positive")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError("lr and weight_decay must be nonnegative")
        if self.rollout < 0:
            raise ContractError("rollout must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def stride(self) -> int:
        return self.window_stride or max(self.rollout, 1)


# -- losses and metrics ------------------------------------------------------------


def l2_loss(pred, target) -> Tensor:
    pred = T.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def nmae(pred, target, std) -> float:
    """Mean absolute error per component over ``std``, averaged over components."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"nmae shapes differ: {pred.shape} vs {target.shape}")
    if np.any(std <= 0):
        raise ContractError("nmae needs a strictly positive std for every component")
    err = np.abs(pred - target).reshape(-1, pred.shape[-1]).mean(axis=0)
    return float((err / std).mean())


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    e, n = epoch, cfg.epochs
    if cfg.schedule == "two-phase":
        half = math.ceil(n / 2)
        if e < half or n - 1 <= half:
            return cfg.lr if e < half else 0.1 * cfg.lr
        frac = (e - half + 1) / (n - half)
        return cfg.lr * (1 - 0.9 * frac)
    if cfg.schedule == "cosine":
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * e / n))
    return cfg.lr * cfg.gamma ** (e // cfg.step_size)


# -- normalisation -----------------------------------------------------------------


@dataclass
class Normalizer:
    """Per-component statistics of the training split.

    Coordinates are shifted by ``center`` and divided by ``scale`` (half the
    largest bounding-box extent); the distance field shares ``scale``.
    """

    center: list
    scale: float
    target_mean: list
    target_std: list
    global_mean: list = field(default_factory=list)
    global_std: list = field(default_factory=list)

    @classmethod
    def fit(cls, clouds: Sequence[PointCloud]) -> Normalizer:
        coords = np.concatenate([c.coords for c in clouds])
        targets = np.concatenate([c.targets for c in clouds])
        lo, hi = coords.min(axis=0), coords.max(axis=0)
        scale = float((hi - lo).max() / 2) or 1.0
        std = targets.std(axis=0)
        if np.any(std == 0):
            raise ContractError("a target component is constant over the training split")
        g = np.array([c.global_vector() for c in clouds])
        gm = g.mean(axis=0) if g.size else np.zeros(0)
        gs = g.std(axis=0) if g.size else np.zeros(0)
        gs = np.where(gs > 0, gs, 1.0)
        return cls(list((lo + hi) / 2), scale, list(targets.mean(axis=0)), list(std), list(gm), list(gs))

    def to_dict(self) -> dict:
        return {k: [float(x) for x in v] if isinstance(v, list) else float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        return cls(**d)

    def coords(self, x) -> np.ndarray:
        return (np.asarray(x) - np.asarray(self.center)) / self.scale

    def standardize(self, u) -> np.ndarray:
        return (np.asarray(u) - np.asarray(self.target_mean)) / np.asarray(self.target_std)

    def destandardize(self, u) -> np.ndarray:
        return np.asarray(u) * np.asarray(self.target_std) + np.asarray(self.target_mean)

    def globals(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if g.size == 0:
            return g
        return (g - np.asarray(self.global_mean)) / np.asarray(self.global_std)


# -- samples -------------------------------------------------------------------------


@dataclass
class Sample:
    inputs: ModelInputs
    targets: np.ndarray  # (S, N, d_out) standardised; entry 0 is the input state
    traj: int = 0
    start: int = 0


def encoder_features(cfg: ModelConfig, stats: Normalizer, cloud: PointCloud, state: np.ndarray | None) -> np.ndarray:
    f = cloud.features.copy()
    if f.shape[1]:
        f[:, 0] /= stats.scale
    if not cfg.distance_field and f.shape[1]:
        f = f[:, 1:]
    if cfg.transient:
        f = np.hstack([f, stats.standardize(state)])
    return f


def make_inputs(cfg: ModelConfig, stats: Normalizer, query: PointCloud, state: np.ndarray | None = None,
                enc_cloud: PointCloud | None = None) -> ModelInputs:
    enc = enc_cloud if enc_cloud is not None else query
    if cfg.transient and enc_cloud is not None:
        raise ContractError("a boundary encoder cloud is only supported for steady models")
    xi = query.features[:, :1] / stats.scale if cfg.d_xi else None
    g = stats.globals(query.global_vector()) if cfg.n_globals else None
    return ModelInputs(
        stats.coords(enc.coords),
        encoder_features(cfg, stats, enc, state if state is not None else query.targets),
        stats.coords(query.coords),
        xi,
        g,
    )


def make_samples(cfg: ModelConfig, stats: Normalizer, trajectories: Sequence[Sequence[PointCloud]],
                 rollout: int, stride: int, boundaries: Sequence[PointCloud | None] | None = None) -> list[Sample]:
    out = []
    for k, traj in enumerate(trajectories):
        bnd = boundaries[k] if boundaries is not None else None
        if not cfg.transient:
            for j, pc in enumerate(traj):
                out.append(Sample(make_inputs(cfg, stats, pc, enc_cloud=bnd), stats.standardize(pc.targets)[None], k, j))
            continue
        if len(traj) < rollout + 1:
            raise ContractError(f"trajectory {k} has {len(traj)} snapshots; need {rollout + 1}")
        for s in range(0, len(traj) - rollout, stride):
            window = traj[s : s + rollout + 1]
            tgt = np.stack([stats.standardize(pc.targets) for pc in window])
            out.append(Sample(make_inputs(cfg, stats, window[0]), tgt, k, s))
    return out


def build_model(cfg: ModelConfig, stats: Normalizer, reference: PointCloud) -> CourantModel:
    """Model with FPS anchors on the normalised reference cloud."""
    coords = stats.coords(reference.coords)
    if coords.shape[0] < cfg.L:
        raise ContractError(f"reference cloud has {coords.shape[0]} points, fewer than L={cfg.L}")
    anchors = coords[fps_sample(coords, cfg.L, seed=cfg.seed)]
    sigma0 = window_scale(coords, cfg.L, cfg.gwa_alpha)
    return CourantModel(cfg, anchors, sigma0)


def sample_predictions(model: CourantModel, sample: Sample) -> list[Tensor]:
    steps = sample.targets.shape[0] - 1
    return model.predict(sample.inputs, steps)


def sample_loss(model: CourantModel, sample: Sample, all_steps: bool = True) -> Tensor:
    preds = sample_predictions(model, sample)
    if len(preds) == 1:
        return l2_loss(preds[0], sample.targets[0])
    idx = range(1, len(preds)) if all_steps else [len(preds) - 1]
    losses = [l2_loss(preds[s], sample.targets[s]) for s in idx]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


# -- optimiser -------------------------------------------------------------------------


def no_decay_names(model) -> set[str]:
    names = dict(model.named_parameters())
    out = set()
    for n in names:
        if n.endswith(".gain"):
            out.add(n)
            out.add(n[: -len("gain")] + "bias")
        if n.endswith("positions0"):
            out.add(n)
    return out & set(names)


class AdamW:
    def __init__(self, named_params: list[tuple[str, "T.Tensor"]], weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, no_decay: set[str] | None = None):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        no_decay = no_decay or set()
        self.decay = [n not in no_decay for n in self.names]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.decay[i] and self.wd:
                p.data = p.data * (1 - lr * self.wd)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            p.data = p.data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for n, m, v in zip(self.names, self.m, self.v):
            out["m/" + n] = m
            out["v/" + n] = v
        return out

    def load_state(self, st: dict) -> None:
        self.t = int(st["t"])
        self.m = [np.array(st["m/" + n], dtype=np.float64) for n in self.names]
        self.v = [np.array(st["v/" + n], dtype=np.float64) for n in self.names]


def clip_grads(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        s = max_norm / norm
        grads = [g * s for g in grads]
    return grads, norm


def _sample_grads(model, params, sample, all_steps):
    loss = sample_loss(model, sample, all_steps)
    val = float(loss.data)
    if not math.isfinite(val):
        return val, None
    return val, T.gradients(loss, params)


def train_step(model: CourantModel, opt: AdamW, batch: Sequence[Sample], cfg: TrainConfig, lr: float,
               pool: ThreadPoolExecutor | None = None) -> float:
    """One optimiser update on ``batch``; returns the mean sample loss."""
    params = opt.params
    if pool is not None and len(batch) > 1:
        results = list(pool.map(lambda s: _sample_grads(model, params, s, cfg.all_steps), batch))
    else:
        results = [_sample_grads(model, params, s, cfg.all_steps) for s in batch]
    losses = [r[0] for r in results]
    for i, (val, g) in enumerate(results):
        if g is None:
            raise NumericError(f"non-finite loss {val} on sample {i} of the batch")
    total = [np.zeros_like(p.data) for p in params]
    for _, g in results:
        for acc, gi in zip(total, g):
            acc += gi
    grads = [g / len(batch) for g in total]
    grads, _ = clip_grads(grads, cfg.clip)
    opt.step(grads, lr)
    return float(sum(losses) / len(losses))


def evaluate(model: CourantModel, samples: Sequence[Sample], all_steps: bool = True) -> tuple[float, float]:
    """Mean standardised L2 loss and NMAE over the predicted steps.

    Targets are standardised already, so NMAE is the mean absolute error in those
    units, pooled over samples and steps, then averaged over components.
    """
    if not samples:
        return float("nan"), float("nan")
    losses = []
    abs_err = 0.0
    count = 0
    with T.no_grad():
        for s in samples:
            preds = sample_predictions(model, s)
            if len(preds) == 1:
                p, t = preds[0].data[None], s.targets
            else:
                p = np.stack([x.data for x in preds[1:]])
                t = s.targets[1:]
            losses.append(float(sample_loss(model, s, all_steps).data))
            abs_err = abs_err + np.abs(p - t).reshape(-1, p.shape[-1]).sum(axis=0)
            count += p.size // p.shape[-1]
    return float(np.mean(losses)), float((abs_err / count).mean())


# -- epoch loop -------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict]
    best_nmae: float
    best_epoch: int


def _write_log(path: Path, history: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[c]:.17g}" for c in LOG_COLUMNS[1:]])


def save_resume_state(path: Path, model, opt: AdamW, epoch: int, best: float, best_epoch: int,
                      history: list[dict]) -> None:
    arrays = {"p/" + n: p.data for n, p in model.named_parameters()}
    arrays.update(opt.state())
    arrays["epoch"] = np.array(epoch)
    arrays["best"] = np.array(best)
    arrays["best_epoch"] = np.array(best_epoch)
    arrays["history"] = np.array(json.dumps(history))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_resume_state(path: Path, model, opt: AdamW) -> tuple[int, float, int, list[dict]]:
    with np.load(path) as st:
        model.load_arrays({k[2:]: st[k] for k in st.files if k.startswith("p/")})
        opt.load_state({k: st[k] for k in st.files})
        return int(st["epoch"]), float(st["best"]), int(st["best_epoch"]), json.loads(str(st["history"]))


def fit(
    model: CourantModel,
    train: Sequence[Sample],
    val: Sequence[Sample],
    cfg: TrainConfig,
    out_dir=None,
    config_blob: dict | None = None,
    resume: bool = False,
    log: Callable[[str], None] | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs.

    With ``out_dir`` set this writes ``log.csv``, ``best.crnt`` (lowest val NMAE),
    ``final.crnt`` and a float64 ``state.npz`` used by ``resume``.
    ``stop_after`` ends the run early after that many epochs (for resume tests).
    """
    cfg.validate()
    if not train:
        raise ContractError("no training samples")
    named = [(n, p) for n, p in model.named_parameters() if p.trainable]
    opt = AdamW(named, cfg.weight_decay, no_decay=no_decay_names(model))
    out = Path(out_dir) if out_dir is not None else None
    start, best, best_epoch, history = 0, math.inf, -1, []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            state = out / "state.npz"
            if not state.exists():
                raise ContractError(f"nothing to resume: {state} missing")
            start, best, best_epoch, history = load_resume_state(state, model, opt)
    blob = dict(config_blob or {})
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(start, cfg.epochs):
            if stop_after is not None and epoch - start >= stop_after:
                break
            t0 = time.perf_counter()
            lr = lr_at(cfg, epoch)
            order = np.random.default_rng(cfg.seed + epoch).permutation(len(train))
            losses = []
            for b in range(0, len(order), cfg.batch_size):
                batch = [train[i] for i in order[b : b + cfg.batch_size]]
                try:
                    losses.append(train_step(model, opt, batch, cfg, lr, pool))
                except NumericError as exc:
                    if out is not None:
                        _write_log(out / "log.csv", history)  # keep the completed epochs
                    raise NumericError(f"epoch {epoch}, batch {b // cfg.batch_size}: {exc}") from exc
            val_loss, val_nmae = evaluate(model, val, cfg.all_steps)
            row = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "val_loss": val_loss,
                "val_nmae": val_nmae,
                "wall_seconds": time.perf_counter() - t0,
            }
            history.append(row)
            if log is not None:
                log(f"epoch {epoch:4d} lr {lr:.3e} train {row['train_loss']:.5f} "
                    f"val {val_loss:.5f} nmae {val_nmae:.4f}")
            improved = val_nmae < best
            if improved:
                best, best_epoch = val_nmae, epoch
            if out is not None:
                _write_log(out / "log.csv", history)
                if improved:
                    save_checkpoint(out / "best.crnt", model, {**blob, "epoch": epoch, "val_nmae": val_nmae})
                save_resume_state(out / "state.npz", model, opt, epoch + 1, best, best_epoch, history)
        if out is not None:
            save_checkpoint(out / "final.crnt", model, {**blob, "epoch": len(history) - 1})
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(history, best, best_epoch)


def restore_model(path) -> tuple[CourantModel, Normalizer, dict]:
    """Model, normaliser and config blob from a checkpoint file."""
    ck = load_checkpoint(path)
    try:
        mcfg = ModelConfig.from_dict(ck.config["model"])
        stats = Normalizer.from_dict(ck.config["stats"])
    except KeyError as exc:
        raise ContractError(f"checkpoint config lacks {exc}") from exc
    model = CourantModel(mcfg)
    model.load_arrays(ck.arrays)
    return model, stats, ck.config
