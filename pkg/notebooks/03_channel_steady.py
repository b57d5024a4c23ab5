# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Steady channel with a constriction
#
# The closed-form channel flow conserves flux through every cross-section.
# A steady model (no processor) can encode either the interior cloud or the
# boundary cloud.

# %%
import numpy as np

from courant.datasets import ChannelFlow, ChannelSpec, gen_channel
from courant.model import ModelConfig, no_grad_predict
from courant.training import Normalizer, TrainConfig, build_model, fit, make_inputs, make_samples, nmae

spec = ChannelSpec(n_points=200, n_boundary=80)
flow = ChannelFlow(spec, throat=2.0, u_max=1.0)
print("flux at x=2, 10, 18:", [round(flow.flux(x), 6) for x in (2.0, 10.0, 18.0)], "expected", flow.total_flux)

# %%
pairs = [gen_channel(spec, k, boundary=True) for k in range(6)]
interior = [[p[0]] for p in pairs]
boundary = [p[1] for p in pairs]
stats = Normalizer.fit([t[0] for t in interior[:5]])
cfg = ModelConfig(d=16, heads=2, L=8, enc_levels=1, d_feat=4, n_globals=2, transient=False, boundary_pc=True)
model = build_model(cfg, stats, interior[0][0])
train = make_samples(cfg, stats, interior[:5], 0, 1, boundaries=boundary[:5])
val = make_samples(cfg, stats, interior[5:], 0, 1, boundaries=boundary[5:])
res = fit(model, train, val, TrainConfig(lr=3e-3, epochs=20, batch_size=1))
print("best val NMAE", round(res.best_nmae, 3), "at epoch", res.best_epoch)

# %%
pc = interior[5][0]
pred = no_grad_predict(model, make_inputs(cfg, stats, pc, enc_cloud=boundary[5]))[0]
print("NMAE on the held-out channel:", nmae(stats.destandardize(pred), pc.targets, np.asarray(stats.target_std)))
