"""Command-line entry point: ``courant gen|train|predict|decompose|diagnose``.

Settings come from an optional JSON run config, then ``--set a.b=value``
overrides, then the named flags of each command (flags win). Every command
writes ``resolved_config.json`` next to its outputs.

Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 IO/format error.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, parse_value, set_override, write_resolved
from .datasets import (
    PointCloud,
    gen_channel,
    gen_wake,
    load_snapshot,
    read_dataset,
    read_extra,
    spec_to_dict,
    write_dataset,
)
from .decoder import FieldDecomposition, export_decomposition, rank_contributions
from .diagnostics import export_report, probe_psd, spectral_report
from .errors import ContractError, FormatError, NumericError
from .model import ModelConfig
from .processor import jacobian, write_eigs_csv
from .training import (
    Normalizer,
    build_model,
    fit,
    make_inputs,
    make_samples,
    nmae,
    restore_model,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
THREADS_ENV = "COURANT_THREADS"
# rollout fractions for the default Jacobian times (10, 300, 380 of a 400-step run)
EIG_FRACTIONS = (0.025, 0.75, 0.95)


class UsageError(ContractError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# -- config resolution ---------------------------------------------------------------


def _raw_config(args) -> dict:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise FormatError(f"{path}: cannot read config ({exc})") from exc
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ContractError(f"{path}: run config must be a JSON object")
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        set_override(raw, key, parse_value(value))
    return raw


def _apply_flags(raw: dict, args, mapping: dict[str, str]) -> None:
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            set_override(raw, dotted, value)


def _threads(args) -> int | None:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ContractError(f"{THREADS_ENV} must be an integer") from exc
    else:
        return None
    if n < 1:
        raise ContractError("thread count must be >= 1")
    return n


def _prepare_out(out: Path, force: bool, owned=()) -> None:
    if out.exists() and not out.is_dir():
        raise FormatError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ContractError(f"{out} is not empty; pass --force to overwrite")
        for name in owned:
            p = out / name
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    out.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


# -- gen -----------------------------------------------------------------------------


def cmd_gen(args) -> int:
    raw = _raw_config(args)
    _apply_flags(raw, args, {"kind": "data.kind", "n_trajectories": "data.n_trajectories", "seed": "data.seed",
                             "out": "out_dir"})
    cfg = RunConfig.from_dict(raw)
    data = cfg.data
    out = Path(cfg.out_dir)
    _prepare_out(out, args.force, owned=("train", "val", "test", "dataset.json", "resolved_config.json"))
    extra = {}
    if data.kind == "wake":
        trajs = [gen_wake(data.wake, data.seed + k) for k in range(data.n_trajectories)]
        spec = spec_to_dict(data.wake)
    else:
        trajs = []
        for k in range(data.n_trajectories):
            interior, boundary = gen_channel(data.channel, data.seed + k, boundary=True)
            trajs.append([interior])
            extra[k] = {"boundary": boundary}
        spec = spec_to_dict(data.channel)
    meta = {"spec": spec, "seed": data.seed}
    write_dataset(out, data.kind, trajs, meta, data.split_seed, extra)
    write_resolved(cfg, out)
    info = json.loads((out / "dataset.json").read_text())
    counts = ", ".join(f"{s} {len(info['splits'][s])}" for s in ("train", "val", "test"))
    n_pts = [pc.n for t in trajs for pc in t]
    print(f"wrote {len(trajs)} {data.kind} trajectories to {out} ({counts}); "
          f"{len(trajs[0])} snapshots each, {min(n_pts)}-{max(n_pts)} points per snapshot")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------


def _cloud_dims(pc: PointCloud) -> dict:
    return {"d_c": pc.coords.shape[1], "d_feat": pc.features.shape[1], "d_out": pc.targets.shape[1],
            "n_globals": len(pc.globals)}


def _infer_model_fields(raw: dict, kind: str, query: PointCloud, boundary: PointCloud | None) -> None:
    """Fill data-derived model fields the config leaves unset; explicit values must agree."""
    model = raw.setdefault("model", {})
    if not isinstance(model, dict):
        raise ContractError("model must be an object")
    model.setdefault("transient", kind == "wake")
    if model.get("boundary_pc") and boundary is None:
        raise ContractError("model.boundary_pc needs a dataset with boundary clouds")
    dims = _cloud_dims(query)
    if model.get("boundary_pc"):
        dims["d_feat"] = boundary.features.shape[1]
    for key, value in dims.items():
        if key not in model:
            model[key] = value
        elif model[key] != value:
            raise ContractError(f"model.{key}={model[key]} but the dataset has {value}")


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    ds = read_dataset(data_dir)
    info = json.loads((data_dir / "dataset.json").read_text())
    raw = _raw_config(args)
    _apply_flags(raw, args, {"epochs": "train.epochs", "lr": "train.lr", "batch_size": "train.batch_size",
                             "rollout": "train.rollout", "seed": "train.seed", "out": "out_dir"})
    threads = _threads(args)
    if threads is not None:
        set_override(raw, "train.workers", threads)
    data = raw.setdefault("data", {})
    if data.get("kind", ds.kind) != ds.kind:
        raise ContractError(f"config data.kind={data['kind']!r} but {data_dir} holds {ds.kind!r} data")
    data["kind"] = ds.kind
    train = ds.trajectories("train")
    val = ds.trajectories("val")
    if not train:
        raise ContractError(f"{data_dir}: empty training split")
    boundaries = None
    if raw.get("model", {}).get("boundary_pc"):
        boundaries = {s: [read_extra(data_dir, s, k, "boundary") for k in info["splits"][s]]
                      for s in ("train", "val")}
    _infer_model_fields(raw, ds.kind, train[0][0], boundaries["train"][0] if boundaries else None)
    cfg = RunConfig.from_dict(raw)
    mcfg, tcfg = cfg.model, cfg.train
    out = Path(cfg.out_dir)
    if not args.resume:
        _prepare_out(out, args.force, owned=("log.csv", "best.crnt", "final.crnt", "state.npz",
                                             "resolved_config.json"))
    write_resolved(cfg, out)
    for split, trajs in (("train", train), ("val", val)):
        for t in trajs:
            for pc in t:
                _check_compat(mcfg, pc, f"{split} snapshot", boundary=boundaries is not None)
    stats = Normalizer.fit([pc for t in train for pc in t])
    model = build_model(mcfg, stats, train[0][0])
    tr = make_samples(mcfg, stats, train, tcfg.rollout, tcfg.stride, boundaries["train"] if boundaries else None)
    va = make_samples(mcfg, stats, val, tcfg.rollout, max(tcfg.rollout, 1),
                      boundaries["val"] if boundaries else None) if val else []
    if not va:
        warn("no validation samples; using the training samples for model selection")
        va = tr
    blob = {"model": mcfg.to_dict(), "stats": stats.to_dict(), "run": cfg.to_dict()}
    print(f"training {model.num_parameters()} parameters on {len(tr)} samples ({len(va)} validation)")
    log = None if args.quiet else print
    res = fit(model, tr, va, tcfg, out, blob, resume=args.resume, log=log)
    print(f"best val NMAE {res.best_nmae:.6g} at epoch {res.best_epoch}; outputs in {out}")
    return EXIT_OK


# -- loading inputs for inference ------------------------------------------------------


def _check_compat(cfg: ModelConfig, pc: PointCloud, what: str, boundary: bool = False) -> None:
    got = _cloud_dims(pc)
    checks = [("coordinate columns", got["d_c"], cfg.d_c), ("target components", got["d_out"], cfg.d_out),
              ("global parameters", got["n_globals"], cfg.n_globals)]
    if not boundary:
        checks.append(("feature columns", got["d_feat"], cfg.d_feat))
    for label, have, want in checks:
        if have != want:
            raise ContractError(f"{what} has {have} {label}; the checkpoint expects {want}")


def _load_inputs(path: Path) -> list[PointCloud]:
    if path.is_dir():
        files = sorted(path.glob("step_*.json"), key=lambda p: int(p.stem.split("_", 1)[1]))
        if not files:
            raise FormatError(f"{path}: no step_*.json snapshots")
        return [load_snapshot(f) for f in files]
    return [load_snapshot(path)]


def _load_boundary(cfg: ModelConfig, inp: Path, explicit) -> PointCloud | None:
    if not cfg.boundary_pc:
        return None
    path = Path(explicit) if explicit else (inp / "boundary.json" if inp.is_dir() else None)
    if path is None:
        raise ContractError("this checkpoint encodes a boundary cloud; pass --boundary")
    pc = load_snapshot(path)
    if pc.features.shape[1] != cfg.d_feat:
        raise ContractError(f"boundary cloud has {pc.features.shape[1]} feature columns; "
                            f"the checkpoint expects {cfg.d_feat}")
    return pc


def _field_csv(path: Path, coords: np.ndarray, values: np.ndarray) -> None:
    names = ["x", "y", "z"][: coords.shape[1]] if coords.shape[1] <= 3 else [f"x{i}" for i in range(coords.shape[1])]
    header = names + [f"u{i}" for i in range(values.shape[1])]
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.hstack([coords, values]):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _command_record(args, ck_config: dict) -> dict:
    opts = {k: v for k, v in vars(args).items() if k != "func"}
    return {"command": opts, "checkpoint_config": ck_config}


# -- predict -------------------------------------------------------------------------


def cmd_predict(args) -> int:
    model, stats, ck = restore_model(args.checkpoint)
    cfg = model.cfg
    inp_path = Path(args.input)
    clouds = _load_inputs(inp_path)
    boundary = _load_boundary(cfg, inp_path, args.boundary)
    for j, pc in enumerate(clouds):
        _check_compat(cfg, pc, f"snapshot {j}", boundary=boundary is not None)
    out = Path(args.out)
    _prepare_out(out, args.force, owned=[p.name for p in out.glob("pred_step_*.csv")] + ["nmae.json", "resolved_config.json"])
    _write_json(out / "resolved_config.json", _command_record(args, ck))
    std = np.asarray(stats.target_std)
    preds: dict[int, np.ndarray] = {}
    truth: dict[int, np.ndarray] = {}
    with T.no_grad():
        if cfg.transient:
            steps = 1 if args.rollout is None else args.rollout
            if steps < 0:
                raise ContractError("--rollout must be >= 0")
            if not 0 <= args.start < len(clouds):
                raise ContractError(f"--start {args.start} outside 0..{len(clouds) - 1}")
            first = clouds[args.start]
            out_std = [p.data for p in model.predict(make_inputs(cfg, stats, first), steps)]
            for k, u in enumerate(out_std):
                preds[k] = stats.destandardize(u)
                j = args.start + k
                if j < len(clouds):
                    if clouds[j].coords.shape != first.coords.shape or not np.array_equal(clouds[j].coords,
                                                                                         first.coords):
                        raise ContractError(f"snapshot {j} uses a different point cloud than the start")
                    truth[k] = clouds[j].targets
            scored = [k for k in truth if k > 0] or [k for k in truth]
        else:
            if args.rollout:
                warn("steady checkpoint: --rollout ignored, each snapshot is predicted on its own")
            for k, pc in enumerate(clouds):
                u = model.predict(make_inputs(cfg, stats, pc, enc_cloud=boundary))[0].data
                preds[k] = stats.destandardize(u)
                truth[k] = pc.targets
            scored = list(truth)
    coords = clouds[args.start if cfg.transient else 0].coords
    for k, u in preds.items():
        _field_csv(out / f"pred_step_{k}.csv", coords if cfg.transient else clouds[k].coords, u)
    per_step = {str(k): nmae(preds[k], truth[k], std) for k in sorted(truth)}
    agg = float(np.mean([per_step[str(k)] for k in scored])) if scored else None
    _write_json(out / "nmae.json", {"per_step": per_step, "aggregate": agg, "scored_steps": sorted(scored)})
    for k in sorted(truth):
        print(f"step {k}: NMAE {per_step[str(k)]:.6g}")
    if agg is not None:
        print(f"aggregate NMAE {agg:.6g}")
    print(f"wrote {len(preds)} prediction files to {out}")
    return EXIT_OK


# -- decompose -----------------------------------------------------------------------


def _physical(decomp: FieldDecomposition, stats: Normalizer) -> FieldDecomposition:
    """Undo the target standardisation; u = mean + std * u_std keeps the identity exact."""
    mean, std = np.asarray(stats.target_mean), np.asarray(stats.target_std)
    return FieldDecomposition(
        prediction=mean + std * decomp.prediction,
        contributions=std * decomp.contributions,
        offset=mean + std * decomp.offset,
        weights=decomp.weights,
    )


def cmd_decompose(args) -> int:
    model, stats, ck = restore_model(args.checkpoint)
    cfg = model.cfg
    inp_path = Path(args.input)
    clouds = _load_inputs(inp_path)
    boundary = _load_boundary(cfg, inp_path, args.boundary)
    pc = clouds[0]
    _check_compat(cfg, pc, "snapshot", boundary=boundary is not None)
    if args.step < 0:
        raise ContractError("--step must be >= 0")
    if args.step and not cfg.transient:
        raise ContractError("--step needs a transient checkpoint; steady models have no rollout")
    top = cfg.L if args.top is None else args.top
    if top < 1:
        raise ContractError("--top must be >= 1")
    if top > cfg.L:
        warn(f"--top {top} exceeds the {cfg.L} anchors; clamped to {cfg.L}")
        top = cfg.L
    out = Path(args.out)
    _prepare_out(out, args.force, owned=[p.name for p in out.glob("*.csv")] + ["manifest.json", "resolved_config.json"])
    _write_json(out / "resolved_config.json", _command_record(args, ck))
    inputs = make_inputs(cfg, stats, pc, enc_cloud=boundary)
    with T.no_grad():
        z = model.encode(inputs)
        if args.step:
            z = model.rollout(z, args.step).states[-1]
    decomp = _physical(model.decompose(z, inputs), stats)
    ranking = rank_contributions(decomp, args.rank)
    export_decomposition(decomp, pc.coords, out, anchors=[int(k) for k in ranking[:top]], ranking=ranking,
                         rank_mode=args.rank)
    print("top anchors (" + args.rank + "): " + " ".join(str(int(k)) for k in ranking[:top]))
    print(f"reconstruction residual {decomp.residual():.3e}")
    return EXIT_OK


# -- diagnose ------------------------------------------------------------------------


def _eig_steps(spec: str | None, steps: int) -> list[int]:
    if spec:
        try:
            out = sorted({int(s) for s in spec.split(",")})
        except ValueError as exc:
            raise UsageError(f"--eig-steps expects comma-separated integers, got {spec!r}") from exc
        bad = [s for s in out if not 0 <= s <= steps]
        if bad:
            raise ContractError(f"--eig-steps {bad} outside 0..{steps}")
        return out
    return sorted({min(max(1, round(f * steps)), steps) for f in EIG_FRACTIONS})


def _write_probe_csv(path: Path, res) -> None:
    with path.open("w") as fh:
        fh.write("freq,probe,psd\n")
        for p in range(res.psd.shape[0]):
            for f, v in zip(res.freqs, res.psd[p]):
                fh.write(f"{f:.17g},{p},{v:.17g}\n")


def cmd_diagnose(args) -> int:
    model, stats, ck = restore_model(args.checkpoint)
    cfg = model.cfg
    if not cfg.transient or model.processor is None:
        raise ContractError("diagnostics need a processor; this checkpoint is a steady model with no latent dynamics")
    clouds = _load_inputs(Path(args.trajectory))
    first = clouds[0]
    _check_compat(cfg, first, "trajectory")
    steps = len(clouds) - 1 if args.steps is None else args.steps
    if steps < 1:
        raise ContractError("diagnostics need a rollout of at least one step")
    fs = 1.0 / cfg.dt_pred if args.fs is None else args.fs
    if fs <= 0:
        raise ContractError("--fs must be positive")
    out = Path(args.out)
    _prepare_out(out, args.force, owned=("psd.csv", "scalogram.csv", "drift.csv", "eigs.csv", "probe_psd.csv",
                                         "summary.json", "resolved_config.json"))
    _write_json(out / "resolved_config.json", _command_record(args, ck))
    summary: dict = {"steps": steps, "fs": fs}

    probe = None
    g = first.globals
    if {"radius", "cx", "cy"} <= set(g) and len(clouds) >= 8:
        probe = probe_psd(clouds, fs, [g["cx"], g["cy"]], 2 * g["radius"], seg_len=args.seg_len)
        _write_probe_csv(out / "probe_psd.csv", probe)
        summary["probe"] = {"f_shed": probe.f_shed, "f_peaks": probe.f_peaks.tolist(), "confident": probe.confident}
        print(f"probe f_shed estimate {probe.f_shed:.6g} Hz ({'confident' if probe.confident else 'low confidence'})")
    if args.f_shed is not None:
        f_shed = args.f_shed
    elif probe is not None:
        f_shed = probe.f_shed
    else:
        raise ContractError("no wake probes available in this trajectory; pass --f-shed")
    summary["f_shed"] = f_shed

    with T.no_grad():
        z0 = model.encode(make_inputs(cfg, stats, first))
        traj = model.rollout(z0, steps)
    report = spectral_report(traj, fs, f_shed, k=args.pcs, fit_steps=min(args.fit_steps, steps + 1),
                             anchor=args.anchor, seg_len=args.seg_len)
    ranking = [int(a) for a in report.spectra.ranking]
    if args.anchors == "all":
        chosen = list(range(cfg.L))
    else:
        try:
            k = int(args.anchors)
        except ValueError as exc:
            raise UsageError(f"--anchors expects 'all' or an integer, got {args.anchors!r}") from exc
        if k < 1:
            raise ContractError("--anchors must be >= 1")
        if k > cfg.L:
            warn(f"--anchors {k} exceeds the {cfg.L} anchors; clamped")
        chosen = ranking[: min(k, cfg.L)]
    export_report(report, out, chosen)
    pc0 = report.psd[:, 0, :]
    peaks = report.freqs[1:][np.argmax(pc0[:, 1:], axis=1)] if report.freqs.size > 1 else np.zeros(cfg.L)
    summary.update({
        "representative_anchor": report.anchor,
        "ranking": ranking,
        "pc0_peak_freq": {str(a): float(peaks[a]) for a in chosen},
        "exported_anchors": chosen,
    })

    if not args.no_eigs:
        results = {s: jacobian(model.processor, traj.states[s], cap=args.jacobian_cap) for s in
                   _eig_steps(args.eig_steps, steps)}
        write_eigs_csv(out / "eigs.csv", results)
        summary["eig_steps"] = sorted(results)
        summary["max_step_eig_abs"] = {str(s): float(np.abs(r.step_eigenvalues).max()) for s, r in results.items()}
    _write_json(out / "summary.json", summary)
    print(f"representative anchor {report.anchor}; wrote diagnostics for {len(chosen)} anchors to {out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set model.d=32 (repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite outputs in a non-empty directory")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="courant", description="Perceiver encoder-processor-decoder surrogate toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", help="dataset directory (default: out_dir from the config)")
    p.add_argument("--kind", choices=("wake", "channel"))
    p.add_argument("--n-trajectories", type=int, dest="n_trajectories")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory written by 'gen'")
    p.add_argument("--out", help="run directory (default: out_dir from the config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--rollout", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help=f"worker threads (fallback: ${THREADS_ENV})")
    p.add_argument("--resume", action="store_true", help="continue from state.npz in the run directory")
    p.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="roll a checkpoint forward from a snapshot")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="snapshot .json or trajectory directory")
    p.add_argument("--out", required=True)
    p.add_argument("--rollout", type=int, help="rollout length (default 1)")
    p.add_argument("--start", type=int, default=0, help="index of the initial snapshot in a trajectory")
    p.add_argument("--boundary", help="boundary cloud for boundary-encoding checkpoints")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("decompose", help="export per-anchor contributions")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="snapshot .json or trajectory directory (first snapshot used)")
    p.add_argument("--out", required=True)
    p.add_argument("--step", type=int, default=0, help="latent rollout step to decompose")
    p.add_argument("--top", type=int, help="number of anchors to export (default: all)")
    p.add_argument("--rank", choices=("norm", "peak"), default="norm")
    p.add_argument("--boundary", help="boundary cloud for boundary-encoding checkpoints")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("diagnose", help="latent spectra, scalogram, probes and Jacobian eigenvalues")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectory", required=True, help="trajectory directory; step 0 seeds the rollout")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="rollout length (default: trajectory length - 1)")
    p.add_argument("--anchors", default="all", help="'all' or the number of top-ranked anchors in psd.csv")
    p.add_argument("--anchor", type=int, help="representative anchor for the scalogram")
    p.add_argument("--f-shed", type=float, dest="f_shed", help="reference frequency (default: probe estimate)")
    p.add_argument("--fs", type=float, help="sampling rate (default: 1 / dt_pred)")
    p.add_argument("--seg-len", type=int, dest="seg_len")
    p.add_argument("--pcs", type=int, default=3)
    p.add_argument("--fit-steps", type=int, default=10, dest="fit_steps")
    p.add_argument("--eig-steps", dest="eig_steps", help="comma-separated rollout steps for Jacobians")
    p.add_argument("--no-eigs", action="store_true", dest="no_eigs")
    p.add_argument("--jacobian-cap", type=int, default=4096, dest="jacobian_cap")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
