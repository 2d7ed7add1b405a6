import numpy as np
import pytest

from irisusformer import gradcheck
from irisusformer import tensor as T
from irisusformer.model import ModelConfig, build, forward, predict_mask
from irisusformer.tensor import ShapeError, Tensor

SMALL = dict(base_channels=8, heads=[2, 2, 2], head_channels=4)


def test_same_seed_same_fingerprint():
    a, b = build(ModelConfig(**SMALL)), build(ModelConfig(**SMALL))
    assert a.fingerprint() == b.fingerprint()
    assert build(ModelConfig(**SMALL, seed=1)).fingerprint() != a.fingerprint()


def test_stage_resolutions():
    cfg = ModelConfig()
    assert cfg.stage_resolutions(64) == [16, 8, 4]
    assert cfg.input_multiple == 64


def _attention_blocks_per_stage(cfg):
    n = len(cfg.stage_downsamples)
    return [4 + (2 if i == n - 1 else 0) for i in range(n)]


def test_linear_projection_parameter_count_oracle():
    full = build(ModelConfig(**SMALL))
    lin = build(ModelConfig(**SMALL, use_conv_projection=False))
    cfg = full.config
    # each of Q/K/V loses its depthwise 3x3 (9*C weights, no bias); pointwise and linear match
    expect = sum(b * 3 * 9 * c for b, c in zip(_attention_blocks_per_stage(cfg), cfg.channels))
    assert full.num_parameters() - lin.num_parameters() == expect


def test_forward_shapes_and_distributions(rng):
    model = build(ModelConfig(**SMALL))
    x = Tensor(rng.uniform(size=(2, 1, 64, 64)))
    for train_mode in (True, False):
        pair = forward(model, x, train_mode)
        assert pair.seg.shape == pair.aux.shape == (2, 2, 64, 64)
        np.testing.assert_allclose(pair.seg.data.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(pair.aux.data.sum(axis=1), 1.0, atol=1e-9)
    assert forward(model, x, with_aux=False).aux is None


def test_input_checks():
    model = build(ModelConfig(**SMALL))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 1, 48, 64))))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 3, 64, 64))))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(stage_downsamples=[4], heads=[2])
    with pytest.raises(ValueError):
        ModelConfig(base_channels=6, heads=[4, 4, 4])


def test_eval_mode_is_batch_independent(rng):
    model = build(ModelConfig(**SMALL))
    model.eval()
    x = rng.uniform(size=(3, 1, 64, 64))
    with T.no_grad():
        whole = model(Tensor(x)).seg.data
        single = model(Tensor(x[1:2])).seg.data
    np.testing.assert_allclose(whole[1:2], single, atol=1e-12)


def test_state_dict_roundtrip(rng):
    a = build(ModelConfig(**SMALL))
    a.train()
    with T.no_grad():
        a(Tensor(rng.uniform(size=(2, 1, 64, 64))))  # moves BN running stats
    b = build(ModelConfig(**SMALL, seed=5))
    b.load_state_dict(a.state_dict())
    assert a.fingerprint() == b.fingerprint()
    with pytest.raises(KeyError):
        b.load_state_dict({})


def test_model_gradcheck_16px():
    cfg = gradcheck.two_stage_config(stage_downsamples=[2, 2])
    fn, params, sample = gradcheck.model_problem(np.random.default_rng(3), cfg, size=16, fraction=0.02)
    assert T.parameters_grad_check(fn, params, h=1e-4, sample=sample) < 1e-4


def test_predict_mask_examples(rng):
    iris = np.zeros((1, 2, 4, 4))
    iris[:, 1] = 1.0
    assert (predict_mask(iris) == 1).all()
    assert (predict_mask(np.full((1, 2, 4, 4), 0.5)) == 0).all()
    p = rng.dirichlet([1, 1], size=(2, 5, 5)).transpose(0, 3, 1, 2)
    brute = np.array([[[int(p[b, 1, i, j] > p[b, 0, i, j]) for j in range(5)] for i in range(5)]
                      for b in range(2)])
    np.testing.assert_array_equal(predict_mask(p), brute)
