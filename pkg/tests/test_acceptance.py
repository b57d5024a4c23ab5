"""Acceptance suite: one test per criterion, named ``test_criterion_NN_*``.

``conftest.py`` prints a PASS/FAIL line for each criterion at the end of the run.
Criteria 7 and 8 share one end-to-end training run driven through the CLI with
``configs/wake.json``; it takes a while on a laptop CPU.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from courant import tensor as T
from courant.cli import main
from courant.config import load_run_config
from courant.checkpoint import save_checkpoint
from courant.datasets import SyntheticWakeSpec, gen_wake, read_dataset
from courant.decoder import decode_single_head_pod
from courant.diagnostics import bin_index, latent_psd, morlet_scalogram, welch_psd
from courant.geometry import fps_sample
from courant.model import CourantModel, ModelConfig, ModelInputs, no_grad_predict
from courant.processor import OdeConfig, jacobian, rollout
from courant.tensor import Tensor
from courant.training import (
    Normalizer,
    TrainConfig,
    build_model,
    fit,
    make_inputs,
    make_samples,
    restore_model,
)

ROOT = Path(__file__).resolve().parents[1]
WAKE_CONFIG = ROOT / "configs" / "wake.json"
F_SHED = 0.0222


def random_inputs(rng, cfg: ModelConfig, n: int) -> ModelInputs:
    feats = rng.uniform(0, 1, (n, cfg.enc_feat_width))
    return ModelInputs(
        rng.uniform(-1, 1, (n, cfg.d_c)),
        feats,
        rng.uniform(-1, 1, (n, cfg.d_c)),
        rng.uniform(0, 1, (n, cfg.d_xi)) if cfg.d_xi else None,
        rng.normal(size=cfg.n_globals) if cfg.n_globals else None,
    )


def random_model(rng, **kw) -> CourantModel:
    cfg = ModelConfig(**kw)
    model = CourantModel(cfg, rng.uniform(-1, 1, (cfg.L, cfg.d_c)), sigma0=0.7)
    # move every parameter off its initial value: zero-initialised layers would
    # hide whole branches (window offsets, output projections) from the checks
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(0, 0.2, p.shape)
    return model


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_01_exact_decomposition(record_property):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(100):
        heads = int(rng.choice([1, 2, 3]))
        L = int(rng.choice([1, 4, 8, 64]))
        gwa = "both" if case % 2 else "none"
        model = random_model(rng, d=12, heads=heads, L=L, enc_levels=1, n_globals=2, gwa=gwa, seed=case)
        inp = random_inputs(rng, model.cfg, int(rng.integers(5, 40)))
        with T.no_grad():
            z = model.encode(inp)
            pred = model.predict(inp)[0].data  # the ordinary forward path
        dec = model.decompose(z, inp)
        residual = np.abs(dec.offset + dec.contributions.sum(0) - pred).max()
        worst = max(worst, float(residual))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max residual {worst:.2e} over 100 cases in {elapsed:.1f}s")
    assert worst < 1e-9
    assert elapsed < 60


# -- 2 ---------------------------------------------------------------------------------


@pytest.mark.parametrize("gwa", ["none", "dec"])
def test_criterion_02_partition_of_unity(gwa, record_property):
    rng = np.random.default_rng(202)
    dev, lowest = 0.0, 1.0
    for case in range(20):
        model = random_model(rng, d=12, heads=3, L=int(rng.choice([1, 4, 8, 64])), enc_levels=1, gwa=gwa, seed=case)
        inp = random_inputs(rng, model.cfg, 30)
        with T.no_grad():
            w = model.decompose(model.encode(inp), inp).weights
        dev = max(dev, float(np.abs(w.sum(-1) - 1).max()))
        lowest = min(lowest, float(w.min()))
    record_property("detail", f"gwa={gwa}: max |sum-1| {dev:.1e}, min weight {lowest:.1e}")
    assert dev < 1e-12
    assert lowest >= 0


# -- 3 ---------------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["full", "unshared-mlp"])
def test_criterion_03_gradients_match_finite_differences(variant, record_property):
    rng = np.random.default_rng(303)
    kw = dict(d=8, heads=2, L=2, enc_levels=2, n_globals=2, gwa="both", anchors="learned", seed=3)
    if variant == "unshared-mlp":
        kw.update(shared_embedding=False, rhs="mlp")
    model = random_model(rng, **kw)
    n, steps = 8, 2
    inp = random_inputs(rng, model.cfg, n)
    targets = rng.normal(size=(steps + 1, n, model.cfg.d_out))

    def loss():
        preds = model.predict(inp, steps)
        total = None
        for s in range(1, steps + 1):
            diff = preds[s] - Tensor(targets[s])
            term = (diff * diff).mean()
            total = term if total is None else total + term
        return total

    named = list(model.named_parameters())
    assert all(p.trainable for n_, p in named if n_ != "anchors.sigma0")
    params = [p for n_, p in named if p.trainable]
    analytic = T.gradients(loss(), params)
    eps = 1e-5
    worst, checked = 0.0, 0
    t0 = time.perf_counter()
    with T.no_grad():
        for (name, p), g in zip([(n_, p) for n_, p in named if p.trainable], analytic):
            orig = np.array(p.data, dtype=np.float64)
            for i in range(orig.size):
                bumped = orig.copy()
                bumped.flat[i] += eps
                p.data = bumped
                up = float(loss().data)
                bumped = orig.copy()
                bumped.flat[i] -= eps
                p.data = bumped
                down = float(loss().data)
                p.data = orig
                fd = (up - down) / (2 * eps)
                an = float(g.reshape(-1)[i])
                # relative check; the 1e-8 floor is the roundoff level of a central
                # difference at eps=1e-5 on an O(1) loss
                assert abs(an - fd) <= 1e-3 * max(abs(an), abs(fd)) + 1e-8, (name, i, an, fd)
                if max(abs(an), abs(fd)) > 1e-5:
                    worst = max(worst, abs(an - fd) / max(abs(an), abs(fd)))
                checked += 1
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{variant}: {checked} entries, worst relative error {worst:.1e}, {elapsed:.0f}s")
    assert elapsed < 300


# -- 4 ---------------------------------------------------------------------------------


def test_criterion_04_single_head_pod_equivalence(record_property):
    rng = np.random.default_rng(404)
    worst = 0.0
    for case in range(20):
        model = random_model(rng, d=8, heads=2, L=int(rng.integers(1, 10)), enc_levels=1,
                             single_head_no_ln=True, gwa="dec" if case % 2 else "none", seed=case)
        inp = random_inputs(rng, model.cfg, 25)
        with T.no_grad():
            z = model.encode(inp)
            pred = model.predict(inp)[0].data
        phi, b = decode_single_head_pod(model.decoder, model.dec_emb, z, inp.query_coords, inp.query_xi,
                                        model.anchors)
        worst = max(worst, float(np.abs(phi.T @ b - pred).max()))
    record_property("detail", f"max |phi^T b - decode| {worst:.1e}")
    assert worst < 1e-10


# -- 5 ---------------------------------------------------------------------------------


def test_criterion_05a_welch_sinusoid_peak(record_property):
    fs, n = 0.1, 400
    x = np.sin(2 * np.pi * F_SHED * np.arange(n) / fs)
    freqs, psd = welch_psd(x, fs, seg_len=64)
    peak = int(np.argmax(psd[1:])) + 1
    df = fs / 64
    containing = int(math.floor(F_SHED / df + 0.5))  # bin k covers [(k - 1/2) df, (k + 1/2) df)
    record_property("detail", f"peak bin {peak} ({freqs[peak]:.5f} Hz), bin containing f_shed {containing}")
    assert peak == containing == bin_index(freqs, F_SHED)


def test_criterion_05b_morlet_tracks_chirp(record_property):
    n, fs = 2048, 1.0
    t = np.arange(n) / fs
    f0, rate = 0.01, 0.1 / n
    x = np.cos(2 * np.pi * (f0 * t + 0.5 * rate * t * t))
    s = morlet_scalogram(x, fs, freqs=np.geomspace(0.005, 0.2, 64))
    fp = s.freqs[np.argmax(s.magnitude, axis=0)]
    inst = f0 + rate * t
    interior = slice(n // 10, n - n // 10)
    err = float(np.abs(fp[interior] / inst[interior] - 1).max())
    record_property("detail", f"max relative tracking error {err:.3f}")
    assert err < 0.10


class _LinearRhs:
    def __init__(self, a):
        self.a = a
        self.cfg = OdeConfig(h=1.0)

    def rhs(self, z):
        return T.matmul(T.as_tensor(z), Tensor(self.a.T))


def test_criterion_05c_linear_rhs_spectrum(record_property):
    rng = np.random.default_rng(505)
    # A = V diag(lambda) V^-1 built in real block form from a chosen spectrum
    known = np.array([-0.5, 0.25, -0.1 + 0.7j, -0.1 - 0.7j, 0.3 + 0.2j, 0.3 - 0.2j])
    block = np.zeros((6, 6))
    block[0, 0], block[1, 1] = -0.5, 0.25
    for i, lam in ((2, known[2]), (4, known[4])):
        block[i : i + 2, i : i + 2] = [[lam.real, lam.imag], [-lam.imag, lam.real]]
    v = rng.normal(size=(6, 6))
    a = v @ block @ np.linalg.inv(v)
    L = 3
    res = jacobian(_LinearRhs(a), np.zeros((L, 6)))
    expected = np.repeat(known, L)
    got = np.asarray(res.eigenvalues)
    # match each computed eigenvalue to its nearest unused expected value
    unused = list(expected)
    worst = 0.0
    for lam in got:
        j = int(np.argmin([abs(lam - e) for e in unused]))
        worst = max(worst, abs(lam - unused.pop(j)))
    record_property("detail", f"max eigenvalue error {worst:.1e}")
    assert len(got) == 6 * L
    assert worst < 1e-6


# -- 6 ---------------------------------------------------------------------------------


def _greedy_maxmin(points, k, first):
    chosen = [first]
    while len(chosen) < k:
        best, best_d = -1, -1.0
        for i in range(len(points)):
            d = min(math.dist(points[i], points[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def test_criterion_06_fps_oracle(record_property):
    rng = np.random.default_rng(606)
    for trial in range(200):
        n = int(rng.integers(1, 65))
        dim = int(rng.integers(1, 4))
        pts = rng.normal(size=(n, dim))
        if trial % 5 == 0 and n > 3:
            pts = np.round(pts)  # duplicates and exact ties
        k = int(rng.integers(1, n + 1))
        first = int(rng.integers(0, n))
        assert list(fps_sample(pts, k, first=first)) == _greedy_maxmin(pts.tolist(), k, first), trial
    record_property("detail", "200 trials")


# -- 7 and 8: end-to-end wake training -------------------------------------------------------


@pytest.fixture(scope="module")
def wake_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("wake")
    t0 = time.perf_counter()
    assert main(["gen", "--config", str(WAKE_CONFIG), "--out", str(out / "data")]) == 0
    assert main(["train", "--config", str(WAKE_CONFIG), "--data", str(out / "data"), "--out", str(out / "run"),
                 "--quiet"]) == 0
    return out, time.perf_counter() - t0


def test_criterion_07_wake_training(wake_run, record_property):
    out, elapsed = wake_run
    cfg = load_run_config(WAKE_CONFIG)
    assert cfg.data.n_trajectories == 20 and cfg.train.rollout == 10 and cfg.train.epochs == 200
    assert cfg.model.L == 16 and cfg.model.d == 64
    ds = read_dataset(out / "data")
    n_points = np.mean([pc.n for t in ds.trajectories("train") for pc in t])
    assert 450 <= n_points <= 550
    rows = (out / "run" / "log.csv").read_text().splitlines()[1:]
    assert len(rows) == 200
    best = min(float(r.split(",")[4]) for r in rows)
    # mean predictor: the training mean everywhere, scored like the model (val, steps 1..T)
    _, stats, _ = restore_model(out / "run" / "best.crnt")
    baseline = float(np.mean([
        np.abs(stats.standardize(traj[s + k].targets)).mean()
        for traj in ds.trajectories("val")
        for s in range(0, len(traj) - cfg.train.rollout, cfg.train.rollout)
        for k in range(1, cfg.train.rollout + 1)
    ]))
    record_property("detail", f"best val NMAE {best:.3f}, mean baseline {baseline:.3f}, "
                              f"ratio {baseline / best:.2f}, {elapsed / 60:.0f} min")
    assert baseline > 0.9
    assert best < 0.35
    assert baseline / best >= 2.5
    assert elapsed < 2 * 3600


def test_criterion_08_latent_psd_aligns_with_shedding(wake_run, record_property):
    out, _ = wake_run
    cfg = load_run_config(WAKE_CONFIG)
    model, stats, _ = restore_model(out / "run" / "best.crnt")
    ds = read_dataset(out / "data")
    fs = 1.0 / cfg.data.wake.dt
    lo, hi = 0.8 * cfg.data.wake.f_shed, 1.2 * cfg.data.wake.f_shed
    hits = []
    for traj in ds.trajectories("val"):
        steps = len(traj) - 1
        with T.no_grad():
            z = model.rollout(model.encode(make_inputs(model.cfg, stats, traj[0])), steps)
        spectra = latent_psd(z, fs, cfg.data.wake.f_shed, k=3, fit_steps=cfg.train.rollout + 1)
        top = spectra.ranking[:8]
        peaks = spectra.freqs[1:][np.argmax(spectra.psd[top, 0, 1:], axis=1)]
        hits.append(int(np.sum((peaks >= lo) & (peaks <= hi))))
    record_property("detail", f"top-8 anchors with PC0 peak within 20% of f_shed, per val trajectory: {hits}")
    assert hits[0] >= 4


# -- 9 ---------------------------------------------------------------------------------


def _names(model):
    return {e["name"]: e for e in model.manifest()}


ABLATIONS = {
    "gwa-enc": dict(gwa="enc"),
    "gwa-dec": dict(gwa="dec"),
    "gwa-both": dict(gwa="both"),
    "learned-anchors": dict(anchors="learned"),
    "abstract-queries": dict(anchors="abstract"),
    "no-shared-embedding": dict(shared_embedding=False),
    "no-distance-field": dict(distance_field=False),
    "no-global-data": dict(global_conditioning=False),
    "mlp-ode": dict(rhs="mlp"),
}


def _expected_change(flag, base, new, levels):
    added, removed = set(new) - set(base), set(base) - set(new)
    gwa_names = lambda lv: {n for n in new if n.startswith(f"anchors.delta.{lv}.") or n == f"anchors.kappa_raw.{lv}"}  # noqa: E731
    if flag.startswith("gwa-"):
        lvls = {"gwa-enc": levels, "gwa-dec": ["dec"], "gwa-both": levels + ["dec"]}[flag]
        want = set().union(*(gwa_names(lv) for lv in lvls))
        return bool(want) and all(gwa_names(lv) for lv in lvls) and added == want and not removed
    if flag == "learned-anchors":
        return not added and not removed and new["anchors.positions0"]["trainable"] and \
            not base["anchors.positions0"]["trainable"]
    if flag == "abstract-queries":
        return added == {"encoder.queries"} and removed == {n for n in base if n.startswith("anchors.")}
    if flag == "no-shared-embedding":
        return added == {"dec_embedding.B", "dec_embedding.log_sigma"} and not removed
    if flag == "no-distance-field":
        shrunk = [n for n in new if new[n]["shape"] != base[n]["shape"]]
        return (not added and removed == {"decoder.xi_proj.weight", "decoder.xi_proj.bias"}
                and "decoder.query_mlp.fc1.weight" in shrunk
                and any(n.startswith("encoder.levels.0.cross.k") for n in shrunk))
    if flag == "no-global-data":
        return not added and removed == {n for n in base if n.startswith("encoder.global_mlp.")} and removed
    if flag == "mlp-ode":
        return (added and all(n.startswith("processor.mlp.") for n in added)
                and removed == {n for n in base if n.startswith(("processor.ln.", "processor.attn."))})
    raise AssertionError(flag)


def test_criterion_09_ablation_plumbing(record_property):
    spec = SyntheticWakeSpec(steps=5, n_points=60)
    trajs = [gen_wake(spec, k) for k in range(3)]
    stats = Normalizer.fit([pc for t in trajs[:2] for pc in t])
    common = dict(d=8, heads=2, L=4, enc_levels=2, n_globals=3)
    base = _names(build_model(ModelConfig(**common), stats, trajs[0][0]))
    tc = TrainConfig(lr=1e-3, epochs=2, rollout=2, batch_size=2)
    ok = []
    for flag, kw in ABLATIONS.items():
        cfg = ModelConfig(**common, **kw)
        model = build_model(cfg, stats, trajs[0][0])
        res = fit(model, make_samples(cfg, stats, trajs[:2], 2, 2), make_samples(cfg, stats, trajs[2:], 2, 2), tc)
        assert len(res.history) == 2 and all(np.isfinite(h["train_loss"]) for h in res.history), flag
        assert _expected_change(flag, base, _names(model), ["0", "1"]), flag
        ok.append(flag)
    record_property("detail", f"{len(ok)} flags")


# -- 10 --------------------------------------------------------------------------------


def test_criterion_10_prefix_and_checkpoint_roundtrip(tmp_path, record_property):
    rng = np.random.default_rng(1010)
    model = random_model(rng, d=16, heads=2, L=6, enc_levels=1, n_globals=2, gwa="both", seed=5)
    inp = random_inputs(rng, model.cfg, 40)
    with T.no_grad():
        z0 = model.encode(inp)
        full = rollout(model.processor, z0, 12).array()
        for k in (1, 5, 11):
            assert rollout(model.processor, z0, k).array().tobytes() == full[: k + 1].tobytes()
        preds = no_grad_predict(model, inp, 6)
    stats = Normalizer([0.0, 0.0], 1.0, [0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0])
    save_checkpoint(tmp_path / "m.crnt", model, {"model": model.cfg.to_dict(), "stats": stats.to_dict()})
    restored, _, _ = restore_model(tmp_path / "m.crnt")
    again = no_grad_predict(restored, inp, 6)
    rel = max(float(np.abs(a - b).max() / np.abs(a).max()) for a, b in zip(preds, again))
    record_property("detail", f"prefix bit-exact; checkpoint max relative deviation {rel:.1e}")
    assert rel <= 1e-5
