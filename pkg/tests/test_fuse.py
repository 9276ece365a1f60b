import numpy as np
import pytest

from scnn import tape
from scnn.decouple import DecoupleConfig, decouple_block, init_attention
from scnn.fuse import BlockParams, FusionParams, fuse, stack_blocks
from scnn.network import SCNN, ModelConfig, count_parameters
from scnn.tape import Node, Parameter


def loop_fuse(Z, H, p):
    """Naive causal convolution pair over (N, T, width)."""
    X = np.concatenate([Z, H], axis=-1)
    N, T, _ = X.shape
    k, d, _ = p.W1.shape
    out = np.zeros((N, T, d))
    for n in range(N):
        for t in range(T):
            a = p.b1.data.copy() if p.b1 else np.zeros(d)
            c = p.b2.data.copy() if p.b2 else np.zeros(d)
            for j in range(k):
                if t - j >= 0:
                    a += p.W1.data[j] @ X[n, t - j]
                    c += p.W2.data[j] @ X[n, t - j]
            out[n, t] = a * c
    return out


def rand_zh(rng, N=3, T=9, d=2):
    return Node(rng.normal(size=(N, T, 4 * d))), Node(rng.normal(size=(N, T, 8 * d)))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_fuse_matches_loop_oracle(k):
    rng = np.random.default_rng(k)
    Z, H = rand_zh(rng)
    p = FusionParams.init("f", k, 2, rng)
    p.b1.node.data[...] = rng.normal(size=2)
    np.testing.assert_allclose(fuse(Z, H, p).data, loop_fuse(Z.data, H.data, p), atol=1e-12)


def test_fuse_transparent_and_annihilator():
    rng = np.random.default_rng(0)
    Z, H = rand_zh(rng)
    d = 2
    W1 = rng.normal(size=(1, d, 12 * d))
    b1 = rng.normal(size=d)
    p = FusionParams(Parameter.create("W1", W1), Parameter.create("W2", np.zeros((1, d, 12 * d))),
                     Parameter.create("b1", b1), Parameter.create("b2", np.ones(d)))
    X = np.concatenate([Z.data, H.data], axis=-1)
    np.testing.assert_allclose(fuse(Z, H, p).data, X @ W1[0].T + b1, atol=1e-12)
    p.W1.node.data[...] = 0.0
    p.b1.node.data[...] = 0.0
    np.testing.assert_array_equal(fuse(Z, H, p).data, np.zeros((3, 9, d)))


def test_fuse_is_causal():
    rng = np.random.default_rng(1)
    Z, H = rand_zh(rng, T=12)
    p = FusionParams.init("f", 2, 2, rng)
    base = fuse(Z, H, p).data
    for t_prime in (4, 8, 11):
        Z2, H2 = Z.data.copy(), H.data.copy()
        Z2[:, t_prime:] += rng.normal(size=Z2[:, t_prime:].shape)
        H2[:, t_prime:] += 5.0
        out = fuse(Node(Z2), Node(H2), p).data
        np.testing.assert_array_equal(out[:, :t_prime], base[:, :t_prime])
        assert not np.array_equal(out[:, t_prime:], base[:, t_prime:])


def test_fuse_width_mismatch():
    p = FusionParams.init("f", 2, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        fuse(Node(np.zeros((1, 3, 8))), Node(np.zeros((1, 3, 15))), p)


def test_fuse_gradients():
    rng = np.random.default_rng(2)
    Z, H = rand_zh(rng, N=2, T=5)
    p = FusionParams.init("f", 2, 2, rng)
    probe = rng.normal(size=(2, 5, 2))

    def loss():
        return tape.sum(fuse(Z, H, p) * probe)

    loss().backward()
    for par in p.parameters():
        num = tape.numerical_grad(lambda: float(loss().data), par.node.data)
        np.testing.assert_allclose(par.node.grad, num, rtol=1e-5, atol=1e-8)


def test_stack_single_block_is_decouple_plus_fuse():
    rng = np.random.default_rng(3)
    cfg = DecoupleConfig(delta_lt=8, m=4, tau=2, delta_st=3, n_vars=2, d_z=2)
    bp = BlockParams(init_attention(2, rng), FusionParams.init("f", 2, 2, rng))
    x = Node(rng.normal(size=(2, 8, 2)))
    res = stack_blocks(x, [bp], cfg)
    _, _, H, Z = decouple_block(x, bp.attn, cfg)
    np.testing.assert_array_equal(res.final.S.data, fuse(Z, H, bp.fusion).data)
    assert stack_blocks(x, [bp], cfg, fuse_last=False).final.S is None


def test_stack_shapes_preserved():
    rng = np.random.default_rng(4)
    cfg = DecoupleConfig(delta_lt=8, m=4, tau=2, delta_st=3, n_vars=2, d_z=3)
    blocks = [BlockParams(init_attention(2, rng), FusionParams.init(f"f{i}", 2, 3, rng)) for i in range(3)]
    res = stack_blocks(Node(rng.normal(size=(5, 2, 8, 3))), blocks, cfg)
    assert len(res.layers) == 3
    for layer in res.layers:
        assert layer.S.shape == (5, 2, 8, 3)
    with pytest.raises(ValueError):
        stack_blocks(Node(np.zeros((2, 8, 3))), [], cfg)


def closed_form_count(N, L, d, k, delta, t_out, per_var_embed=False):
    embed = 2 * (N * d if per_var_embed else d)
    block = N * N + 2 * k * d * 12 * d + 2 * d
    ar = 8 * (t_out * delta * d * d + t_out * d)
    gate = 2 * d * 12 * d + 2 * d
    heads = 2 * (d + 1)
    return embed + L * block + ar + gate + heads


def test_parameter_count_closed_form():
    model = SCNN(ModelConfig(n_vars=228, t_in=72))
    assert count_parameters(model) == closed_form_count(228, 4, 8, 2, 8, 3)
    model = SCNN(ModelConfig(n_vars=5, t_in=30, m=6, n_layers=2, d_z=3, kernel_size=3, delta_st=4,
                             t_out=2, per_var_embed=True))
    assert count_parameters(model) == closed_form_count(5, 2, 3, 3, 4, 2, per_var_embed=True)


def test_parameter_count_linear_in_layers():
    counts = [count_parameters(SCNN(ModelConfig(n_vars=4, t_in=48, n_layers=L))) for L in range(5)]
    steps = np.diff(counts)
    assert np.all(steps == steps[0])
    assert counts[0] == closed_form_count(4, 0, 8, 2, 8, 3)
