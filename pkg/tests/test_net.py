import json

import numpy as np
import pytest

from csad.errors import ConfigError, DataError, NumericError, ParameterError, ShapeError
from csad.net import (
    Model,
    NetConfig,
    TrainConfig,
    backward_and_step,
    checkpoint_bytes,
    config_from_dict,
    config_to_dict,
    forward,
    init_model,
    load_checkpoint,
    load_config,
    loss_and_gradients,
    param_shapes,
    predict_mask,
    save_checkpoint,
    standardize,
    total_loss_value,
)
from csad.objectives import LossConfig
from csad.verify import numeric_grad

SMALL = NetConfig(input_size=(16, 16), stages=3, base_channels=2)


def inputs(rng, n=None, size=(16, 16)):
    shape = (1,) + size if n is None else (n, 1) + size
    mshape = size if n is None else (n,) + size
    return rng.uniform(size=shape), rng.uniform(size=shape), (rng.uniform(size=mshape) < 0.2).astype(float)


def test_default_config_layout():
    cfg = NetConfig()
    assert cfg.stages == 5 and cfg.input_size == (64, 64)
    assert [cfg.width(s) for s in range(1, 6)] == [8, 16, 32, 64, 128]
    shapes = param_shapes(cfg)
    assert shapes["enc.t2w.1.conv1.w"] == (8, 1, 3, 3)
    assert shapes["enc.adc.5.conv2.w"] == (128, 128, 3, 3)
    assert shapes["scff.proj.w"] == (64, 128, 1, 1)
    assert shapes["dec.1.w"] == (64, 128, 3, 3) and shapes["dec.4.w"] == (8, 16, 3, 3)
    assert shapes["head.w"] == (1, 8, 1, 1)
    concat = param_shapes(NetConfig(fusion="concat"))
    assert "scff.proj.w" not in concat and concat["dec.1.w"] == (64, 256, 3, 3)


@pytest.mark.parametrize(
    "kwargs",
    [{"stages": 1}, {"input_size": (30, 30)}, {"fusion": "sum"}, {"scheme": "XLC"}, {"base_channels": 0},
     {"distill_gradient_mode": "x"}, {"proj_channels": 0}],
)
def test_config_validation(kwargs):
    with pytest.raises((ConfigError, ParameterError)):
        NetConfig(**kwargs)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1)


def test_config_json_roundtrip(tmp_path):
    net, train = NetConfig(scheme="PLC", fusion="concat"), TrainConfig(epochs=3, loss=LossConfig(alpha=0.5, lam=0.9))
    doc = config_to_dict(net, train)
    assert doc["train"]["loss"]["lambda"] == 0.9
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    assert load_config(path) == (net, train)
    assert config_from_dict({}) == (NetConfig(), TrainConfig())


def test_config_rejects_unknown_and_malformed(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"net": {"bogus": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"other": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"loss": {"lam": 0.9}}})
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"loss": {"lambda": 2.0}}})
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_init_is_seeded_per_parameter():
    a, b = init_model(SMALL, 3), init_model(SMALL, 3)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = init_model(SMALL, 4)
    assert a.params["dec.1.w"].tobytes() != c.params["dec.1.w"].tobytes()
    # a parameter's stream does not depend on the rest of the architecture
    other = init_model(NetConfig(input_size=(16, 16), stages=3, base_channels=2, fusion="concat"), 3)
    assert other.params["enc.t2w.1.conv1.w"].tobytes() == a.params["enc.t2w.1.conv1.w"].tobytes()


def test_init_bounds():
    m = init_model(NetConfig(), 0)
    w = m.params["enc.t2w.2.conv2.w"]
    assert np.abs(w).max() <= np.sqrt(6 / (16 * 9))
    assert np.abs(m.params["head.w"]).max() <= np.sqrt(3 / 8)
    assert not m.params["dec.2.b"].any()
    assert m.params["head.b"].tolist() == [-3.0]


def test_standardize():
    x = np.array([[[[1.0, 3.0]]], [[[5.0, 5.0]]]])
    out = standardize(x)
    assert out[0].ravel().tolist() == [-1.0, 1.0]
    assert not out[1].any()


def test_forward_contract(rng):
    model = init_model(NetConfig(), 0)
    t2w, adc, _ = inputs(rng, size=(64, 64))
    res = forward(model, t2w, adc)
    assert res.pred.shape == (64, 64)
    assert 0.0 <= res.pred.min() and res.pred.max() <= 1.0
    assert len(res.attn_t2w) == 5 and len(res.attn_adc) == 5
    for a in res.attn_t2w + res.attn_adc:
        assert a.shape == (64, 64) and abs(a.sum() - 1.0) < 1e-9
    again = forward(model, t2w, adc)
    assert again.pred.tobytes() == res.pred.tobytes()


def test_forward_batch_matches_single(rng):
    model = init_model(SMALL, 1)
    t2w, adc, _ = inputs(rng, n=3)
    batched = forward(model, t2w, adc)
    for i in range(3):
        single = forward(model, t2w[i], adc[i])
        np.testing.assert_allclose(batched.pred[i], single.pred, rtol=1e-12)
        np.testing.assert_allclose(batched.attn_adc[2][i], single.attn_adc[2], rtol=1e-12)


def test_forward_shape_errors(rng):
    model = init_model(SMALL, 0)
    with pytest.raises(ShapeError):
        forward(model, np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))
    with pytest.raises(ShapeError):
        forward(model, np.zeros((1, 16, 16)), np.zeros((2, 1, 16, 16)))
    with pytest.raises(ShapeError):
        forward(model, np.zeros((16, 16)), np.zeros((16, 16)))


def test_predict_mask_thresholds(rng):
    model = init_model(SMALL, 0)
    t2w, adc, _ = inputs(rng)
    assert predict_mask(model, t2w, adc, 0.0).all()
    assert not predict_mask(model, t2w, adc, 1.0 + 1e-9).any()
    pred = forward(model, t2w, adc, with_attention=False).pred
    assert np.array_equal(predict_mask(model, t2w, adc), (pred >= 0.5).astype(np.uint8))


def test_plan_terms_per_sample(rng):
    model = init_model(NetConfig(), 0)
    t2w, adc, mask = inputs(rng, size=(64, 64))
    for scheme, expected in (("ILC", 8), ("PLC", 10), ("NLC", 0)):
        model.config = NetConfig(scheme=scheme)
        breakdown, _ = loss_and_gradients(model, t2w, adc, mask)
        assert breakdown.csad_terms == expected
        if scheme == "NLC":
            assert breakdown.csad == 0.0


def test_loss_matches_forward_only(rng):
    model = init_model(SMALL, 0)
    t2w, adc, masks = inputs(rng, n=2)
    breakdown, _ = loss_and_gradients(model, t2w, adc, masks)
    assert abs(breakdown.total - total_loss_value(model, t2w, adc, masks)) < 1e-12
    assert set(breakdown.as_dict()) == {"dice", "wbce", "csad", "total"}


def test_gradient_spot_checks(rng):
    cfg = NetConfig(input_size=(8, 8), stages=2, base_channels=2)
    model = init_model(cfg, 5)
    for name, v in model.params.items():
        if name.endswith(".b") and name != "head.b":
            v[:] = rng.uniform(0.05, 0.3, size=v.shape)
    t2w, adc, masks = inputs(rng, n=2, size=(8, 8))
    _, grads = loss_and_gradients(model, t2w, adc, masks)
    assert set(grads) == set(model.params)
    for name in ("scff.proj.w", "dec.1.w", "enc.adc.1.conv1.w", "head.b"):
        orig = model.params[name].copy()

        def f(t, name=name):
            model.params[name] = t
            return total_loss_value(model, t2w, adc, masks)

        num = numeric_grad(f, orig)
        model.params[name] = orig
        np.testing.assert_allclose(grads[name], num, rtol=1e-4, atol=1e-9)


def test_student_only_blocks_target_gradients(rng):
    cfg = NetConfig(input_size=(8, 8), stages=2, base_channels=2, distill_gradient_mode="student_only")
    model = init_model(cfg, 0)
    t2w, adc, masks = inputs(rng, n=1, size=(8, 8))
    _, g_student = loss_and_gradients(model, t2w, adc, masks, LossConfig(alpha=1.0))
    model.config = NetConfig(input_size=(8, 8), stages=2, base_channels=2)
    _, g_both = loss_and_gradients(model, t2w, adc, masks, LossConfig(alpha=1.0))
    assert any(not np.array_equal(g_student[k], g_both[k]) for k in g_both)


def test_backward_and_step(rng):
    model = init_model(SMALL, 0)
    t2w, adc, masks = inputs(rng, n=2)
    batch = list(zip(t2w, adc, masks))
    before = model.copy()
    backward_and_step(model, batch, TrainConfig(learning_rate=0.0))
    assert all(np.array_equal(model.params[k], before.params[k]) for k in model.params)
    _, breakdown = backward_and_step(model, batch, TrainConfig(learning_rate=0.01))
    assert np.isfinite(breakdown.total)
    assert any(not np.array_equal(model.params[k], before.params[k]) for k in model.params)
    with pytest.raises(ParameterError):
        backward_and_step(model, [], TrainConfig())


def test_non_finite_loss_is_reported(rng):
    model = init_model(SMALL, 0)
    model.params["head.w"][:] = np.nan
    t2w, adc, masks = inputs(rng, n=1)
    with pytest.raises(NumericError, match="dice"):
        backward_and_step(model, list(zip(t2w, adc, masks)), TrainConfig())


def test_checkpoint_roundtrip(tmp_path):
    model = init_model(NetConfig(input_size=(16, 16), stages=3, base_channels=2, scheme="PLC"), 9)
    save_checkpoint(tmp_path / "m.ckpt", model)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert isinstance(back, Model) and back.config == model.config
    assert checkpoint_bytes(back) == checkpoint_bytes(model)
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "cut.ckpt").write_bytes(checkpoint_bytes(model)[:-10])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "cut.ckpt")
