import numpy as np
import pytest

from scnn import tape
from scnn.network import (SCNN, ForecastDistribution, ModelConfig, count_parameters, load_checkpoint, mle_loss,
                          mse_loss, save_checkpoint, total_loss)
from scnn.tape import Node

TINY = dict(n_vars=3, t_in=16, t_out=2, d_z=2, n_layers=2, delta_st=4, m=4)


def tiny_batch(seed=0, B=2):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(B, 3, 16)), rng.normal(size=(B, 3, 2))


def gradient_errors(model, x, y):
    """Norm-wise relative error of autodiff vs central differences, per parameter."""
    params = model.parameters()
    tape.zero_grad(params)
    model.loss(x, y).backward()
    out = {}
    for p in params:
        num = tape.numerical_grad(lambda: float(model.loss(x, y).data), p.node.data, h=1e-5)
        ana = p.node.grad
        denom = np.linalg.norm(ana) + np.linalg.norm(num)
        out[p.name] = 0.0 if denom == 0 else float(np.linalg.norm(ana - num) / denom)
    return out


def test_tiny_model_gradients():
    model = SCNN(ModelConfig(**TINY, seed=3))
    x, y = tiny_batch()
    errs = gradient_errors(model, x, y)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


@pytest.mark.parametrize("extra", [dict(loss_mode="mse"), dict(aux_loss_mode="mse"), dict(per_var_embed=True),
                                   dict(gate_bias=False, conv_bias=False, kernel_size=1)])
def test_gradients_in_variants(extra):
    model = SCNN(ModelConfig(**{**TINY, "n_layers": 1}, **extra, seed=4))
    x, y = tiny_batch(1, B=1)
    assert max(gradient_errors(model, x, y).values()) < 1e-4


def test_forward_shapes_and_positive_std():
    model = SCNN(ModelConfig(**TINY))
    x, _ = tiny_batch(B=4)
    main, aux = model.forward(x)
    for f in (main, aux):
        assert f.mean.shape == (4, 3, 2) and f.std.shape == (4, 3, 2)
        assert np.all(f.std.data > 0)
    single = model.predict(x[0])
    assert single.mean.shape == (3, 2)
    np.testing.assert_allclose(single.mean, main.mean.data[0], atol=1e-12)


def test_forward_rejects_bad_windows():
    model = SCNN(ModelConfig(**TINY))
    with pytest.raises(ValueError):
        model.forward(np.zeros((3, 15)))
    bad = np.zeros((3, 16))
    bad[1, 4] = np.inf
    with pytest.raises(ValueError):
        model.forward(bad)


def test_zero_layers_counts_but_cannot_forward():
    model = SCNN(ModelConfig(**{**TINY, "n_layers": 0}))
    d, t_out, delta = 2, 2, 4
    assert count_parameters(model) == 2 * d + 8 * (t_out * delta * d * d + t_out * d) + 2 * d * 12 * d + 2 * d + 2 * (d + 1)
    with pytest.raises(ValueError):
        model.forward(np.zeros((3, 16)))


def test_aux_branch_ignores_residual_ar_parameters():
    model = SCNN(ModelConfig(**TINY))
    x, y = tiny_batch()
    _, aux = model.forward(x)
    before = aux.mean.data.copy()
    for s in ("z1", "z2", "z3", "z4"):
        model.extrap.ar[s].W.node.data += 0.3
        model.extrap.ar[s].b.node.data -= 0.2
    main2, aux2 = model.forward(x)
    np.testing.assert_array_equal(aux2.mean.data, before)
    # and the aux loss alone has exactly zero gradient there
    tape.zero_grad(model.parameters())
    mle_loss(y, aux2).backward()
    for s in ("z1", "z2", "z3", "z4"):
        assert np.all(model.extrap.ar[s].W.node.grad == 0)
        assert np.all(model.extrap.ar[s].b.node.grad == 0)


def test_constant_input_main_equals_aux():
    # one block: residuals of a constant window vanish, so masking them changes nothing
    model = SCNN(ModelConfig(**{**TINY, "n_layers": 1}, seed=5))
    main, aux = model.forward(np.full((3, 16), 0.8))
    np.testing.assert_allclose(main.mean.data, aux.mean.data, atol=1e-12)
    np.testing.assert_allclose(main.std.data, aux.std.data, atol=1e-12)


def test_mle_examples():
    f = ForecastDistribution(np.array([[0.0]]), np.array([[1.0]]))
    assert float(mle_loss(np.array([[2.0]]), f).data) == 2.0
    assert float(mle_loss(np.array([[0.0]]), f).data) == 0.0


@pytest.mark.parametrize("e", [0.3, 1.0, 2.0, 7.5])
def test_mle_stationary_at_abs_error(e):
    s = Node(np.array([[abs(e)]]), requires_grad=True)
    mle_loss(np.array([[e]]), ForecastDistribution(np.array([[0.0]]), s)).backward()
    assert abs(s.grad[0, 0]) <= 1e-8


def test_mle_sums_over_variables_and_horizons_means_over_batch():
    truth = np.zeros((2, 3, 4))
    f = ForecastDistribution(np.ones((2, 3, 4)), np.ones((2, 3, 4)))
    assert float(mle_loss(truth, f).data) == pytest.approx(12 * 0.5)


def test_total_loss_combinations():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(2, 3, 2))
    f = ForecastDistribution(Node(rng.normal(size=(2, 3, 2))), Node(rng.uniform(0.5, 2, size=(2, 3, 2))))
    single = float(mle_loss(y, f).data)
    assert float(total_loss(y, f, None, 0.0).data) == single
    assert float(total_loss(y, f, f, 0.5).data) == pytest.approx(1.5 * single, rel=1e-14)
    exact = ForecastDistribution(Node(y.copy()), f.std)
    assert float(total_loss(y, exact, None, 0.5, loss_mode="mse").data) == 0.0
    assert float(mse_loss(y, f).data) == pytest.approx(np.mean((y - f.mean.data) ** 2))
    with pytest.raises(ValueError):
        total_loss(y, f, None, 0.5)


def test_forward_is_deterministic():
    x, _ = tiny_batch()
    a = SCNN(ModelConfig(**TINY, seed=9)).forward(x)[0].mean.data
    b = SCNN(ModelConfig(**TINY, seed=9)).forward(x)[0].mean.data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("t_in", [72, 144, 288])
def test_count_independent_of_input_length(t_in):
    ref = count_parameters(SCNN(ModelConfig(n_vars=6, t_in=72)))
    assert count_parameters(SCNN(ModelConfig(n_vars=6, t_in=t_in))) == ref


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(n_vars=2, t_in=24, m=24)
    with pytest.raises(ValueError):
        ModelConfig(n_vars=2, t_in=48, loss_mode="l1")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"n_vars": 2, "t_in": 48, "bogus": 1})
    cfg = ModelConfig(n_vars=2, t_in=48)
    assert cfg.delta_lt == 48 and cfg.tau == 2
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model = SCNN(ModelConfig(**TINY, seed=11))
    x, y = tiny_batch()
    for _ in range(2):
        model.loss(x, y).backward()
        tape.adam_step(model.parameters(), 1e-2)
        tape.zero_grad(model.parameters())
    before = model.predict(x)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"standardizer.mean": np.arange(3.0), "standardizer.std": np.ones(3)})
    loaded, extras = load_checkpoint(path)
    after = loaded.predict(x)
    np.testing.assert_array_equal(after.mean, before.mean)
    np.testing.assert_array_equal(after.std, before.std)
    np.testing.assert_array_equal(extras["standardizer.mean"], np.arange(3.0))
    assert loaded.cfg == model.cfg
    text = path.read_bytes().split(b"\n\n")[0].decode()
    assert "head.mean.W\t2,1" in text


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint\n\n")
    with pytest.raises(ValueError):
        load_checkpoint(p)
    model = SCNN(ModelConfig(**TINY))
    save_checkpoint(p, model)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(p)
