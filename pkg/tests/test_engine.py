import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixdiff.engine import Tape, Tensor, no_grad, ops, precision
from pixdiff.engine import checkpoint
from pixdiff.engine.gradcheck import check_gradients, numerical_grad
from pixdiff.errors import DimensionError

TOL = 1e-4


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ops.matmul(Tensor(np.eye(2)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_row_times_column(self):
        out = ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.shape == (1, 1)
        assert out.item() == 11.0

    def test_grad_of_sum_matches_finite_differences(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]], requires_grad=True)
        b = Tensor([[2.0, 3.0], [5.0, 7.0]])
        ops.sum(ops.matmul(a, b)).backward()

        def f():
            return float(np.sum(a.data @ b.data))

        numeric = numerical_grad(f, a.data, h=1e-5)
        np.testing.assert_allclose(numeric, [[5.0, 12.0], [5.0, 12.0]], rtol=1e-8)
        np.testing.assert_allclose(a.grad, numeric, rtol=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_gradients(self):
        rng = np.random.default_rng(0)
        errs = check_gradients(ops.matmul, [rand(rng, 2, 3, 4), rand(rng, 2, 4, 5)])
        assert max(errs) < TOL


class TestConv:
    def test_zero_kernel(self):
        rng = np.random.default_rng(1)
        x = rand(rng, 2, 5, 4, 3, grad=False)
        out = ops.conv2d_3x3(x, Tensor(np.zeros((3, 3, 3, 2))), Tensor(np.zeros(2)))
        assert out.shape == (2, 5, 4, 2)
        assert np.all(out.data == 0.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = rand(rng, 1, 6, 6, 1, grad=False)
        k = np.zeros((3, 3, 1, 1))
        k[1, 1, 0, 0] = 1.0
        out = ops.conv2d_3x3(x, Tensor(k), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 4, 5, 2))
        k = rng.standard_normal((3, 3, 2, 3))
        b = rng.standard_normal(3)
        pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        ref = np.zeros((1, 4, 5, 3))
        for i in range(4):
            for j in range(5):
                for o in range(3):
                    ref[0, i, j, o] = np.sum(pad[0, i:i + 3, j:j + 3, :] * k[:, :, :, o]) + b[o]
        out = ops.conv2d_3x3(Tensor(x), Tensor(k), Tensor(b))
        np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        errs = check_gradients(ops.conv2d_3x3, [rand(rng, 1, 4, 4, 2), rand(rng, 3, 3, 2, 3), rand(rng, 3)])
        assert max(errs) < TOL

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ops.conv2d_3x3(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))


def _attn_params(rng, c, zero_v=False):
    names = ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"]
    shapes = [(c, c)] * 4 + [(c,)] * 4
    params = {n: rand(rng, *s) for n, s in zip(names, shapes)}
    if zero_v:
        params["wv"] = Tensor(np.zeros((c, c)))
        params["bv"] = Tensor(np.zeros(c))
    return params


class TestSelfAttention:
    def test_zero_value_projection_gives_output_bias(self):
        rng = np.random.default_rng(5)
        p = _attn_params(rng, 8, zero_v=True)
        out = ops.self_attention(rand(rng, 2, 5, 8, grad=False), num_heads=2, **p)
        np.testing.assert_allclose(out.data, np.broadcast_to(p["bo"].data, (2, 5, 8)), atol=1e-14)

    def test_single_token_is_projected_value(self):
        rng = np.random.default_rng(6)
        p = _attn_params(rng, 4)
        x = rand(rng, 3, 1, 4, grad=False)
        out = ops.self_attention(x, **p)
        ref = (x.data @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
        np.testing.assert_allclose(out.data, ref, rtol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = rand(rng, 1, 4, 8)
        p = _attn_params(rng, 8)
        keys = list(p)

        def fn(x, *vals):
            return ops.self_attention(x, num_heads=2, **dict(zip(keys, vals)))

        errs = dict(zip(["x"] + keys, check_gradients(fn, [x, *p.values()])))
        # A key bias shifts every score in a row equally, so softmax cancels it.
        assert np.max(np.abs(p["bk"].grad)) < 1e-12
        del errs["bk"]
        assert max(errs.values()) < TOL

    def test_rejects_empty_sequence(self):
        rng = np.random.default_rng(8)
        with pytest.raises(DimensionError):
            ops.self_attention(Tensor(np.zeros((1, 0, 4))), **_attn_params(rng, 4))


class TestShapeOps:
    @settings(max_examples=30, deadline=None)
    @given(p=st.sampled_from([1, 2, 4]), n=st.integers(1, 2), mult=st.integers(1, 3), c=st.integers(1, 3),
           seed=st.integers(0, 2**16))
    def test_space_depth_roundtrip(self, p, n, mult, c, seed):
        x = Tensor(np.random.default_rng(seed).standard_normal((n, p * mult, 2 * p * mult, c)))
        y = ops.space_to_depth(x, p)
        assert y.shape == (n, mult, 2 * mult, c * p * p)
        np.testing.assert_array_equal(ops.depth_to_space(y, p).data, x.data)

    def test_space_to_depth_patch_layout(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        y = ops.space_to_depth(Tensor(x), 2).data
        np.testing.assert_array_equal(y[0, 0, 0], [0.0, 1.0, 4.0, 5.0])

    def test_avg_pool_constant(self):
        out = ops.avg_pool2(Tensor(np.full((2, 4, 6, 3), 1.7)))
        np.testing.assert_allclose(out.data, 1.7, rtol=0, atol=1e-15)

    def test_avg_pool_forced(self):
        out = ops.avg_pool2(Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 2, 2, 1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 4.0

    def test_pool_rejects_odd(self):
        with pytest.raises(DimensionError):
            ops.avg_pool2(Tensor(np.ones((1, 3, 4, 1))))
        with pytest.raises(DimensionError):
            ops.space_to_depth(Tensor(np.ones((1, 6, 4, 1))), 4)

    def test_upsample_then_pool_is_identity(self):
        x = Tensor(np.random.default_rng(9).standard_normal((1, 3, 2, 2)))
        np.testing.assert_allclose(ops.avg_pool2(ops.nearest_upsample2(x)).data, x.data, rtol=1e-15)


UNARY_CASES = {
    "avg_pool2": (ops.avg_pool2, [(2, 4, 4, 3)]),
    "nearest_upsample2": (ops.nearest_upsample2, [(1, 2, 3, 2)]),
    "space_to_depth": (lambda x: ops.space_to_depth(x, 2), [(1, 4, 4, 2)]),
    "depth_to_space": (lambda x: ops.depth_to_space(x, 2), [(1, 2, 2, 8)]),
    "silu": (ops.silu, [(3, 5)]),
    "softmax": (ops.softmax, [(3, 5)]),
    "square": (ops.square, [(4, 3)]),
    "sum": (lambda x: ops.sum(x, axis=(1, 2)), [(2, 3, 4)]),
    "mean": (lambda x: ops.mean(x, axis=1), [(2, 3, 4)]),
    "reshape": (lambda x: ops.reshape(x, (6, 2)), [(3, 4)]),
    "transpose": (lambda x: ops.transpose(x, (2, 0, 1)), [(2, 3, 4)]),
    "scale_batch": (lambda x: ops.scale_batch(x, [0.5, -2.0]), [(2, 3)]),
    "layer_norm": (ops.layer_norm, [(2, 3, 6)]),
    "layer_norm_affine": (ops.layer_norm, [(2, 3, 6), (6,), (6,)]),
    "linear": (ops.linear, [(2, 3, 4), (4, 5), (5,)]),
    "add": (ops.add, [(2, 3), (2, 3)]),
    "add_bias": (ops.add, [(2, 3, 4), (4,)]),
    "add_trailing": (ops.add, [(2, 3, 4), (3, 4)]),
    "sub": (ops.sub, [(2, 3), (3,)]),
    "mul": (ops.mul, [(2, 3), (2, 3)]),
    "concat": (lambda a, b: ops.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    "expand_batch": (lambda v: ops.expand_batch(v, (2, 3, 4, 5)), [(2, 5)]),
    "embedding": (lambda t: ops.embedding(t, [2, 0, 2, 1]), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_op_gradients(name):
    fn, shapes = UNARY_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs = [rand(rng, *s) for s in shapes]
    assert max(check_gradients(fn, inputs)) < TOL


def test_dropout_is_seeded_and_inverted():
    x = Tensor(np.ones((1000,)), requires_grad=True)
    a = ops.dropout(x, 0.25, np.random.default_rng(3))
    b = ops.dropout(x, 0.25, np.random.default_rng(3))
    np.testing.assert_array_equal(a.data, b.data)
    assert set(np.unique(a.data)) <= {0.0, 1.0 / 0.75}
    assert abs(a.data.mean() - 1.0) < 0.1
    ops.sum(a).backward()
    np.testing.assert_array_equal(x.grad, a.data)
    assert ops.dropout(x, 0.25, None) is x


def test_rank_broadcast_is_rejected():
    with pytest.raises(DimensionError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2,))))
    with pytest.raises(DimensionError):
        ops.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3,))))


def _graph(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    x = Tensor(rng.standard_normal((3, 4)))
    h = ops.silu(ops.linear(x, w))
    h = ops.add(h, ops.linear(h, w))
    return w, ops.mean(ops.square(h))


def test_backward_is_bit_deterministic():
    w1, loss1 = _graph(11)
    w2, loss2 = _graph(11)
    loss1.backward()
    loss2.backward()
    assert np.array_equal(w1.grad, w2.grad)


def test_all_reachable_grads_are_finite_and_shaped():
    w, loss = _graph(12)
    tape = Tape.from_output(loss)
    loss.backward()
    for t in tape.tensors:
        assert t.grad is not None and t.grad.shape == t.shape
        assert np.all(np.isfinite(t.grad))
    assert [n.op for n in tape.nodes][-1] == "scale"


def test_shared_input_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ops.sum(ops.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = ops.square(x)
    assert not y.requires_grad and y.node is None


def test_float32_opt_in():
    with precision("float32"):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_zero_sized_dims_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 0)))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a.weight": rng.standard_normal((2, 3)), "b": np.array(1.5), "ü": rng.standard_normal(4)}
        path = tmp_path / "m.ckpt"
        checkpoint.save(path, params)
        loaded = checkpoint.load(path)
        assert list(loaded) == list(params)
        for k in params:
            assert np.array_equal(loaded[k], params[k])

    def test_layout(self):
        blob = checkpoint.dumps({"w": np.array([[1.0, 2.0]])})
        assert blob[:4] == b"SID2"
        assert struct.unpack_from("<II", blob, 4) == (1, 1)
        assert struct.unpack_from("<I", blob, 12) == (1,)
        assert blob[16:17] == b"w"
        assert struct.unpack_from("<I", blob, 17) == (2,)
        assert struct.unpack_from("<QQ", blob, 21) == (1, 2)
        assert struct.unpack_from("<2d", blob, 37) == (1.0, 2.0)
        assert len(blob) == 53

    def test_rejects_garbage(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(b"NOPE" + bytes(8))
        blob = checkpoint.dumps({"w": np.ones(3)})
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(blob[:-4])
