import numpy as np
import pytest

from courant.errors import ContractError
from courant.model import CourantModel, ModelConfig, ModelInputs, no_grad_predict


def tiny(**kw):
    base = dict(d=16, heads=2, L=4, enc_levels=2, d_out=2, n_globals=2, seed=1)
    base.update(kw)
    cfg = ModelConfig(**base)
    rng = np.random.default_rng(0)
    model = CourantModel(cfg, rng.uniform(-1, 1, (cfg.L, 2)), 0.5)
    n = 12
    x = rng.uniform(-1, 1, (n, 2))
    feats = rng.normal(size=(n, cfg.enc_feat_width))
    inp = ModelInputs(x, feats, x, rng.uniform(0, 1, (n, 1)) if cfg.d_xi else None, rng.normal(size=2))
    return model, inp


def test_predict_shapes():
    model, inp = tiny()
    out = no_grad_predict(model, inp, 3)
    assert len(out) == 4 and all(o.shape == (12, 2) for o in out)


def test_steady_model_has_no_processor():
    model, inp = tiny(transient=False)
    assert model.processor is None
    assert len(no_grad_predict(model, inp)) == 1
    with pytest.raises(ContractError):
        model.rollout(model.encode(inp), 2)


def test_shared_embedding_aliases():
    model, inp = tiny()
    assert model.dec_emb is model.embedding
    before = model.decompose(model.encode(inp).data, inp).prediction
    z = model.encode(inp).data
    model.embedding.B.data *= 1.5
    after = model.decompose(z, inp).prediction
    assert not np.allclose(before, after)


def test_unshared_embedding_isolated():
    model, inp = tiny(shared_embedding=False)
    z = model.encode(inp).data
    before = model.decompose(z, inp).prediction
    model.embedding.B.data *= 1.5
    after = model.decompose(z, inp).prediction
    assert before.tobytes() == after.tobytes()


def test_config_rejects_bad_combinations():
    with pytest.raises(ContractError):
        ModelConfig(anchors="abstract", gwa="enc").validate()
    with pytest.raises(ContractError):
        ModelConfig(gwa="sideways").validate()
    with pytest.raises(ContractError):
        ModelConfig.from_dict({"d": 8, "depth": 3})
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_load_arrays_roundtrip_and_mismatch():
    model, inp = tiny()
    other, _ = tiny(seed=7)
    other.load_arrays(model.state_arrays())
    a = no_grad_predict(model, inp, 2)
    b = no_grad_predict(other, inp, 2)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
    arrays = model.state_arrays()
    arrays.pop(next(iter(arrays)))
    with pytest.raises(ContractError):
        other.load_arrays(arrays)


def test_decomposition_through_model():
    model, inp = tiny(gwa="both", anchors="learned")
    z = model.rollout(model.encode(inp), 2).states[-1]
    d = model.decompose(z, inp)
    assert d.residual() < 1e-9
    np.testing.assert_allclose(d.prediction, no_grad_predict(model, inp, 2)[-1], atol=1e-12)
