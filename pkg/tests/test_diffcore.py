import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from mugl.diffcore import (
    Affine,
    Conv1d,
    ResidualBlock2d,
    activation,
    affine,
    conv1d,
    grad_check,
    load_checkpoint,
    residual_conv2d_block,
    save_checkpoint,
)
from mugl.errors import CorruptArchive, NonFinite, ShapeMismatch

D = torch.float64


def numeric_grad(f, x: np.ndarray, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def conv1d_oracle(x, k, b, stride, pad):
    n, c, t = x.shape
    o, _, w = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    steps = (t + 2 * pad - w) // stride + 1
    out = np.zeros((n, o, steps))
    for s in range(steps):
        window = xp[:, :, s * stride : s * stride + w]
        out[:, :, s] = np.einsum("ncw,ocw->no", window, k) + b
    return out


def test_affine_examples():
    x = torch.tensor([[1.0, 2.0]], dtype=D)
    assert torch.equal(affine(x, torch.eye(2, dtype=D), torch.zeros(2, dtype=D)), x)
    out = affine(x, torch.eye(2, dtype=D), torch.tensor([3.0, 3.0], dtype=D))
    np.testing.assert_array_equal(out.numpy(), [[4, 5]])
    with pytest.raises(ShapeMismatch):
        affine(x, torch.eye(3, dtype=D))


def test_affine_weight_gradient(rng):
    x = rng.normal(size=(4, 3))
    w = torch.tensor(rng.normal(size=(3, 2)), requires_grad=True)
    affine(torch.tensor(x), w).sum().backward()
    num = numeric_grad(lambda wv: float((x @ wv).sum()), w.detach().numpy().copy(), h=1e-4)
    np.testing.assert_allclose(w.grad.numpy(), num, atol=1e-4)
    np.testing.assert_allclose(w.grad.numpy(), np.repeat(x.sum(0)[:, None], 2, axis=1), atol=1e-12)


def test_conv1d_examples():
    x = torch.tensor([[[1.0, 2, 3, 4]]], dtype=D)
    assert torch.equal(conv1d(x, torch.ones(1, 1, 1, dtype=D)), x)
    np.testing.assert_array_equal(conv1d(x, torch.ones(1, 1, 2, dtype=D)).numpy(), [[[3, 5, 7]]])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv1d_matches_oracle(rng, stride, pad):
    x, k, b = rng.normal(size=(2, 3, 9)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    out = conv1d(torch.tensor(x), torch.tensor(k), torch.tensor(b), stride, pad).numpy()
    np.testing.assert_allclose(out, conv1d_oracle(x, k, b, stride, pad), atol=1e-12)
    assert out.shape[-1] == (9 + 2 * pad - 3) // stride + 1


def test_conv1d_gradient_against_finite_differences(rng):
    x, k = rng.normal(size=(1, 2, 7)), rng.normal(size=(3, 2, 3))
    c = rng.normal(size=(1, 3, 4))

    def loss(kv):
        return float((conv1d_oracle(x, kv, np.zeros(3), 2, 1) * c).sum())

    kt = torch.tensor(k, requires_grad=True)
    (conv1d(torch.tensor(x), kt, None, 2, 1) * torch.tensor(c)).sum().backward()
    num = numeric_grad(loss, k.copy())
    err = np.abs(kt.grad.numpy() - num) / np.maximum(np.abs(num), 1e-6)
    assert err.max() < 1e-3


def block_params(rng, cin, cout, skip):
    p = {
        "conv1.weight": rng.normal(size=(cout, cin, 3, 3)) * 0.3,
        "conv1.bias": rng.normal(size=cout),
        "conv2.weight": rng.normal(size=(cout, cout, 3, 3)) * 0.3,
        "conv2.bias": rng.normal(size=cout),
    }
    if skip:
        p["skip.weight"] = rng.normal(size=(cout, cin, 1, 1))
        p["skip.bias"] = rng.normal(size=cout)
    return {k: torch.tensor(v, requires_grad=True) for k, v in p.items()}


def test_residual_block_zero_weights_is_activation(rng):
    p = {k: torch.zeros_like(v) for k, v in block_params(rng, 3, 3, False).items()}
    x = torch.tensor(rng.normal(size=(2, 3, 4, 4)))
    assert torch.equal(residual_conv2d_block(x, p), activation(x))


def test_residual_block_stride_halves_time(rng):
    x = torch.tensor(rng.normal(size=(2, 3, 7, 4)))
    y = residual_conv2d_block(x, block_params(rng, 3, 5, True), stride=(2, 1))
    assert y.shape == (2, 5, 4, 4)
    with pytest.raises(ShapeMismatch):
        residual_conv2d_block(x, block_params(rng, 3, 3, False), stride=(2, 1))


def test_residual_block_gradient(rng):
    p = block_params(rng, 3, 4, True)
    x = torch.tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    c = torch.tensor(rng.normal(size=(2, 4, 2, 4)))
    report = grad_check(lambda: (residual_conv2d_block(x, p, (2, 1)) * c).sum(), {"x": x, **p}, step=1e-6)
    assert report.passed, report
    assert torch.autograd.gradcheck(lambda xx: residual_conv2d_block(xx, p, (2, 1)), (x,))


def test_modules_and_parameter_shapes():
    g = torch.Generator().manual_seed(0)
    assert Affine(3, 5, g)(torch.zeros(2, 3)).shape == (2, 5)
    assert Conv1d(3, 4, width=3, stride=2, gen=g)(torch.zeros(1, 3, 8)).shape == (1, 4, 4)
    assert ResidualBlock2d(4, 4, gen=g).skip_weight is None
    assert ResidualBlock2d(4, 8, gen=g).skip_weight is not None


def test_grad_check_quadratic():
    x = torch.tensor([1.0, 2.0, 3.0], dtype=D)
    report = grad_check(lambda: (x**2).sum(), [x], step=1e-4)
    assert report.max_rel_error < 1e-6 and report.checked == 3


def test_grad_check_zero_function():
    x = torch.tensor([1.0, 2.0], dtype=D)
    report = grad_check(lambda: (x * 0).sum(), [x])
    assert report.max_rel_error == 0.0


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**3

        @staticmethod
        def backward(ctx, g):
            return g * 2.0

    x = torch.tensor([0.7, 1.3], dtype=D)
    assert not grad_check(lambda: Bad.apply(x).sum(), [x]).passed


def test_grad_check_non_finite():
    x = torch.tensor([0.0], dtype=D)
    with pytest.raises(NonFinite):
        grad_check(lambda: torch.log(x).sum(), [x])


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32(2.5) * np.ones(()),
              "c": torch.arange(6.0).reshape(1, 2, 3)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert list(loaded) == ["a.weight", "b", "c"]
    np.testing.assert_array_equal(loaded["a.weight"], params["a.weight"])
    assert loaded["b"].shape == () and loaded["b"] == np.float32(2.5)
    np.testing.assert_array_equal(loaded["c"], params["c"].numpy())
    raw = path.read_bytes()
    assert raw[:8] == b"MUGLCKPT" and int.from_bytes(raw[8:12], "little") == 1


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint({"w": np.ones((2, 2), np.float32)}, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-3])
    with pytest.raises(CorruptArchive):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CorruptArchive):
        load_checkpoint(tmp_path / "magic.ckpt")


@given(st.lists(st.integers(1, 5), min_size=0, max_size=3))
def test_checkpoint_any_shape(tmp_path_factory, shape):
    arr = np.arange(int(np.prod(shape)) if shape else 1, dtype=np.float32).reshape(shape)
    path = tmp_path_factory.mktemp("ck") / "x.ckpt"
    save_checkpoint({"x": arr}, path)
    np.testing.assert_array_equal(load_checkpoint(path)["x"], arr)
