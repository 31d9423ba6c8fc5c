from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biplanar3d.diff import (OptimizerState, Schedule, adamw_step, graph_inventory, load_checkpoint,
                             lr_at, no_grad, ops, precision, read_checkpoint, save_checkpoint, scope)
from biplanar3d.diff.array import DiffArray
from biplanar3d.diff.gradcheck import check_gradients, rel_error

OP_TOL = 1e-4


def _p(rng, *shape, positive=False, scale=1.0):
    v = rng.standard_normal(shape) * scale
    if positive:
        v = np.abs(v) + 0.5
    return ops.parameter(v)


def _weighted(out: DiffArray, rng_seed: int = 7) -> DiffArray:
    """Reduce to a scalar with fixed random weights so every output element matters."""
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return ops.sum(ops.mul(out, w))


def _cases(rng):
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    pos = _p(rng, 3, 4, positive=True)
    row = _p(rng, 1, 4)
    x3 = _p(rng, 2, 3, 4)
    w = _p(rng, 4, 5)
    bias = _p(rng, 5)
    vol = _p(rng, 5, 4, 6, 2)
    k3 = _p(rng, 3, 3, 3, 2, 3, scale=0.3)
    k1 = _p(rng, 1, 1, 1, 2, 3)
    k2 = _p(rng, 2, 2, 2, 2, 3, scale=0.3)
    g, beta = _p(rng, 2), _p(rng, 2)
    g4, b4 = _p(rng, 4), _p(rng, 4)
    table = _p(rng, 6, 3)
    # keep away from the kinks of relu-like ops
    kinked = ops.parameter(np.where(np.abs(a.value) < 0.1, 0.3, a.value))
    return {
        "add_broadcast": (lambda: ops.add(a, row), [a, row]),
        "sub": (lambda: ops.sub(a, b), [a, b]),
        "mul_broadcast": (lambda: ops.mul(a, row), [a, row]),
        "div": (lambda: ops.div(a, pos), [a, pos]),
        "neg_scale": (lambda: ops.scale(ops.neg(a), 2.5), [a]),
        "exp": (lambda: ops.exp(a), [a]),
        "log": (lambda: ops.log(pos), [pos]),
        "square": (lambda: ops.square(a), [a]),
        "clamp_min": (lambda: ops.clamp_min(kinked, 0.0), [kinked]),
        "relu": (lambda: ops.relu(kinked), [kinked]),
        "leaky_relu": (lambda: ops.leaky_relu(kinked, 0.1), [kinked]),
        "gelu": (lambda: ops.gelu(a), [a]),
        "sum_axis": (lambda: ops.sum(x3, axis=1, keepdims=True), [x3]),
        "mean": (lambda: ops.mean(x3, axis=(0, 2)), [x3]),
        "reshape_transpose": (lambda: ops.transpose(ops.reshape(x3, (6, 4)), (1, 0)), [x3]),
        "broadcast_to": (lambda: ops.broadcast_to(row, (3, 4)), [row]),
        "broadcast_along_axis": (lambda: ops.broadcast_along_axis(a, 1, 5), [a]),
        "getitem": (lambda: x3[:, 1:, ::2], [x3]),
        "concat": (lambda: ops.concat([a, b], axis=0), [a, b]),
        "split": (lambda: ops.split(x3, [1, 3], axis=-1)[1], [x3]),
        "pad": (lambda: ops.pad(x3, [(1, 0), (0, 2), (1, 1)]), [x3]),
        "roll": (lambda: ops.roll(x3, (1, -2), (1, 2)), [x3]),
        "take": (lambda: ops.take(table, np.array([[0, 5], [2, 2]])), [table]),
        "matmul_batched": (lambda: ops.matmul(x3, w), [x3, w]),
        "linear": (lambda: ops.linear(a, w, bias), [a, w, bias]),
        "softmax": (lambda: ops.softmax(x3, axis=-1), [x3]),
        "layer_norm": (lambda: ops.layer_norm(x3, g4, b4), [x3, g4, b4]),
        "instance_norm": (lambda: ops.instance_norm(vol, g, beta), [vol, g, beta]),
        "conv3d_k3_pad": (lambda: ops.conv3d(vol, k3, padding=1), [vol, k3]),
        "conv3d_k3_stride2": (lambda: ops.conv3d(vol, k3, stride=2, padding=1), [vol, k3]),
        "conv3d_pointwise_stride2": (lambda: ops.conv3d(vol, k1, bias[:3], stride=2), [vol, k1]),
        "conv3d_transpose": (lambda: ops.conv3d_transpose(vol, k2, stride=2), [vol, k2]),
    }


CASE_NAMES = list(_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", CASE_NAMES)
def test_op_gradients_match_central_differences(name):
    with precision(np.float64):
        fn, inputs = _cases(np.random.default_rng(0))[name]
        err = check_gradients(lambda: _weighted(fn()), inputs, eps=1e-6)
    assert err < OP_TOL, f"{name}: rel err {err:.2e}"


def _conv3d_brute(x, w, stride, padding):
    xp = np.pad(x, [(padding, padding)] * 3 + [(0, 0)])
    k = w.shape[0]
    oh, ow, od = ((n + 2 * padding - k) // stride + 1 for n in x.shape[:3])
    out = np.zeros((oh, ow, od, w.shape[-1]))
    for i in range(oh):
        for j in range(ow):
            for l in range(od):
                patch = xp[i * stride:i * stride + k, j * stride:j * stride + k,
                           l * stride:l * stride + k]
                out[i, j, l] = np.einsum("abcd,abcde->e", patch, w)
    return out


@given(st.integers(3, 6), st.integers(3, 6), st.integers(3, 6), st.sampled_from([1, 2]),
       st.sampled_from([0, 1]), st.sampled_from([1, 2, 3]), st.integers(0, 2 ** 16))
def test_conv3d_matches_direct_loops(h, w, d, stride, padding, k, seed):
    rng = np.random.default_rng(seed)
    if min(h, w, d) + 2 * padding < k:
        return
    x = rng.standard_normal((h, w, d, 2))
    kern = rng.standard_normal((k, k, k, 2, 3))
    with precision(np.float64):
        out = ops.conv3d(ops.constant(x), ops.constant(kern), stride=stride, padding=padding)
    np.testing.assert_allclose(out.value, _conv3d_brute(x, kern, stride, padding), atol=1e-10)


@given(st.integers(2, 5), st.integers(2, 5), st.integers(2, 5), st.sampled_from([1, 2]),
       st.integers(0, 2 ** 16))
def test_conv3d_transpose_is_adjoint_of_conv3d(h, w, d, stride, seed):
    rng = np.random.default_rng(seed)
    k = 2
    x = rng.standard_normal((h, w, d, 2))
    kern = rng.standard_normal((k, k, k, 2, 3))
    with precision(np.float64):
        y = ops.conv3d_transpose(ops.constant(x), ops.constant(kern), stride=stride).value
        z = rng.standard_normal(y.shape)
        cz = ops.conv3d(ops.constant(z), ops.constant(kern.transpose(0, 1, 2, 4, 3)), stride=stride)
    # <convT(x), z> == <x, conv(z)> with the kernel's channel axes swapped
    assert np.isclose(np.vdot(y, z), np.vdot(x, cz.value), rtol=1e-9)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_is_a_distribution(values):
    with precision(np.float64):
        p = ops.softmax(ops.constant(np.array(values)), axis=-1).value
    assert np.all(p >= 0)
    assert math.isclose(p.sum(), 1.0, rel_tol=1e-12)


def test_rel_error_is_norm_based():
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_error(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
    assert math.isclose(rel_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])), 1.0)


def test_gradients_accumulate_over_shared_inputs():
    with precision(np.float64):
        x = ops.parameter(np.array([1.0, 2.0]))
        y = ops.sum(ops.add(ops.mul(x, x), x))
        y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.value + 1)


def test_no_grad_builds_no_graph():
    x = ops.parameter(np.ones(3))
    with no_grad():
        y = ops.mul(x, 2.0)
    assert not y.requires_grad and y.parents == ()


def test_non_finite_values_raise():
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
        ops.log(ops.constant(np.array([-1.0])))


def test_graph_inventory_counts_scoped_ops():
    x = ops.parameter(np.ones(3))
    with scope("blk"):
        y = ops.sum(ops.exp(x))
    inv = graph_inventory(y)
    assert inv[("blk", "exp")] == 1 and inv[("blk", "sum")] == 1 and inv[("", "leaf")] == 1


# -- optimizer -------------------------------------------------------------------

def test_lr_schedule_warmup_and_cosine():
    s = Schedule(base_lr=1.0, warmup_epochs=10, total_epochs=110)
    assert lr_at(0, s) == 0.0
    assert math.isclose(lr_at(5, s), 0.5)
    assert math.isclose(lr_at(10, s), 1.0)
    assert math.isclose(lr_at(60, s), 0.5)
    assert lr_at(110, s) == 0.0 and lr_at(200, s) == 0.0


@given(st.floats(0, 300))
def test_lr_schedule_bounded(epoch):
    assert 0.0 <= lr_at(epoch, Schedule()) <= Schedule().base_lr


def test_adamw_matches_closed_form_steps():
    """Reference AdamW written out longhand for three steps."""
    rng = np.random.default_rng(3)
    w0 = rng.standard_normal(4)
    grads = [rng.standard_normal(4) for _ in range(3)]
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
    with precision(np.float64):
        p = {"w": ops.parameter(w0)}
    state = OptimizerState(weight_decay=wd)
    w, m, v = w0.copy(), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, start=1):
        adamw_step(p, state, lr, {"w": g})
        w = w * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p["w"].value, w, rtol=1e-12)
    assert state.step == 3


def test_adamw_skips_parameters_without_gradients():
    p = {"a": ops.parameter(np.ones(2)), "b": ops.parameter(np.ones(2))}
    p["a"].grad = np.ones(2)
    adamw_step(p, OptimizerState(), 0.1)
    assert np.all(p["b"].value == 1.0) and np.all(p["a"].value < 1.0)


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    p = {"a": ops.parameter(rng.standard_normal((2, 3))), "b": ops.parameter(rng.standard_normal(4))}
    for x in p.values():
        x.grad = rng.standard_normal(x.shape).astype(x.dtype)
    state = OptimizerState(schedule=Schedule(1e-3, 2, 10))
    adamw_step(p, state, 1e-3)
    save_checkpoint(tmp_path / "c.ckv1", p, state, {"note": 1})
    q = {k: ops.parameter(np.zeros(v.shape)) for k, v in p.items()}
    st2 = load_checkpoint(tmp_path / "c.ckv1", q)
    for k in p:
        np.testing.assert_array_equal(p[k].value, q[k].value)
        np.testing.assert_array_equal(state.m[k], st2.m[k])
        np.testing.assert_array_equal(state.v[k], st2.v[k])
    assert st2.step == 1 and st2.schedule == state.schedule
    _, header = read_checkpoint(tmp_path / "c.ckv1")
    assert header["format"] == "ckv1" and header["extra"] == {"note": 1}


def test_checkpoint_missing_parameter_is_an_error(tmp_path):
    save_checkpoint(tmp_path / "c.ckv1", {"a": ops.parameter(np.ones(2))})
    with pytest.raises(KeyError):
        load_checkpoint(tmp_path / "c.ckv1", {"a": ops.parameter(np.ones(2)),
                                              "b": ops.parameter(np.ones(1))})
