import itertools

import numpy as np
import numpy.testing as npt
import pytest

from voxatn.errors import CheckpointError, GradientCheckError, NonFiniteError, ShapeError
from voxatn.tengine import SGDM, SgdmState, Tensor, gradient_check, parameter, sgdm_step
from voxatn.tengine import functional as F
from voxatn.tengine import ops
from voxatn.tengine.checkpoint import read_checkpoint, write_checkpoint
from voxatn.tengine.gradcheck import kink_signature, relative_error, run_layer_checks


def naive_conv3d(x, w, b, stride, pad):
    n, c, d, h, wd = x.shape
    f, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0],) * 2, (pad[1],) * 2, (pad[2],) * 2))
    od = (d + 2 * pad[0] - kd) // stride[0] + 1
    oh = (h + 2 * pad[1] - kh) // stride[1] + 1
    ow = (wd + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((n, f, od, oh, ow))
    for i, o, p, q, r in itertools.product(range(n), range(f), range(od), range(oh), range(ow)):
        a, bb, cc = p * stride[0], q * stride[1], r * stride[2]
        out[i, o, p, q, r] = (xp[i, :, a : a + kd, bb : bb + kh, cc : cc + kw] * w[o]).sum() + b[o]
    return out


# --- convolution ---


@pytest.mark.parametrize(
    "shape, kernel, stride, pad",
    [
        ((2, 3, 5, 5, 5), (4, 3, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ((1, 2, 7, 6, 5), (3, 2, 5, 5, 5), (2, 2, 2), (2, 2, 2)),
        ((1, 1, 4, 4, 4), (2, 1, 2, 3, 1), (1, 2, 3), (0, 1, 0)),
    ],
)
def test_conv3d_matches_direct_sum(rng, shape, kernel, stride, pad):
    x, w, b = rng.normal(size=shape), rng.normal(size=kernel), rng.normal(size=kernel[0])
    y, _ = F.conv3d_forward(x, w, b, stride, pad)
    npt.assert_allclose(y, naive_conv3d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("block", [60, 8100])
def test_conv3d_tiling_keeps_results(rng, monkeypatch, block):
    x, w, b = rng.normal(size=(3, 2, 6, 5, 5)), rng.normal(size=(4, 2, 3, 3, 3)), rng.normal(size=4)
    y, cache = F.conv3d_forward(x, w, b, (2, 1, 1), (1, 1, 1))
    g = rng.normal(size=y.shape)
    grads = F.conv3d_backward(g, cache)

    monkeypatch.setattr(F, "COL_BLOCK_ELEMS", block)
    ty, tcache = F.conv3d_forward(x, w, b, (2, 1, 1), (1, 1, 1))
    npt.assert_allclose(ty, naive_conv3d(x, w, b, (2, 1, 1), (1, 1, 1)), rtol=1e-12, atol=1e-12)
    for full, tiled in zip(grads, F.conv3d_backward(g, tcache)):
        npt.assert_allclose(tiled, full, rtol=1e-12, atol=1e-12)


def test_conv3d_output_dims():
    assert F.conv3d_output_dims((64, 64, 64), (5, 5, 5), (2, 2, 2), (2, 2, 2)) == (32, 32, 32)
    assert F.conv3d_output_dims((32, 32, 32), (3, 3, 3), (1, 1, 1), (1, 1, 1)) == (32, 32, 32)
    with pytest.raises(ShapeError, match="exceeds"):
        F.conv3d_output_dims((2, 8, 8), (5, 3, 3), (1, 1, 1), (1, 1, 1))


def test_conv3d_shape_errors(rng):
    x = rng.normal(size=(1, 2, 4, 4, 4))
    with pytest.raises(ShapeError, match="channel"):
        F.conv3d_forward(x, rng.normal(size=(3, 1, 3, 3, 3)), np.zeros(3))
    with pytest.raises(ShapeError, match="rank 5"):
        F.conv3d_forward(x[0], rng.normal(size=(3, 2, 3, 3, 3)), np.zeros(3))
    with pytest.raises(ShapeError, match="bias"):
        F.conv3d_forward(x, rng.normal(size=(3, 2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match="no cached"):
        F.conv3d_backward(np.zeros((1, 3, 2, 2, 2)), None)


def test_conv3d_backward_is_adjoint(rng):
    # <conv(x), g> == <x, conv^T(g)> for the input gradient
    x, w, b = rng.normal(size=(2, 2, 5, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3)), np.zeros(3)
    y, cache = F.conv3d_forward(x, w, b, (2, 2, 2), (1, 1, 1))
    g = rng.normal(size=y.shape)
    gx, gw, gb = F.conv3d_backward(g, cache)
    assert np.vdot(y, g) == pytest.approx(np.vdot(x, gx), rel=1e-10)
    npt.assert_allclose(gb, g.sum(axis=(0, 2, 3, 4)))
    assert gw.shape == w.shape


# --- element ops ---


def test_leaky_relu_and_sigmoid_values():
    y, mask = F.leaky_relu_forward(np.array([-2.0, 0.0, 3.0]), 0.01)
    npt.assert_allclose(y, [-0.02, 0.0, 3.0])
    npt.assert_array_equal(mask, [False, True, True])
    s, _ = F.sigmoid_forward(np.array([0.0, 800.0, -800.0]))
    npt.assert_allclose(s, [0.5, 1.0, 0.0])


def test_global_max_pool_takes_first_argmax():
    x = np.zeros((1, 1, 2, 2, 2))
    x[0, 0, 0, 1, 0] = 5.0
    x[0, 0, 1, 1, 1] = 5.0
    y, cache = F.global_pool_forward(x, "max")
    assert y[0, 0] == 5.0
    g = F.global_pool_backward(np.ones((1, 1)), cache)
    assert g[0, 0, 0, 1, 0] == 1.0 and g.sum() == 1.0


def test_softmax_rows_sum_to_one(rng):
    p, _ = F.softmax_forward(rng.normal(0.0, 50.0, size=(20, 2)))
    npt.assert_allclose(p.sum(axis=1), 1.0)
    assert np.all(p >= 0)


def test_cross_entropy_value_and_clamp():
    probs = np.array([[0.25, 0.75], [1.0, 0.0]])
    targets = ops.one_hot([1, 1], 2)
    loss, _ = F.cross_entropy_forward(probs, targets)
    assert loss == pytest.approx((-np.log(0.75) - np.log(1e-12)) / 2)
    with pytest.raises(ShapeError, match="sum to 1"):
        F.cross_entropy_forward(np.array([[0.5, 0.6]]), ops.one_hot([0], 2))


def test_cross_entropy_loss_is_a_scalar_tensor():
    probs = parameter(np.array([[0.3, 0.7], [0.6, 0.4]]))
    targets = ops.one_hot([1, 0], 2)
    loss = ops.cross_entropy(probs, targets)
    assert loss.shape == ()
    assert Tensor(np.float64(2.5)).shape == ()
    loss.backward()
    npt.assert_allclose(probs.grad, -targets / probs.data / 2)


def test_concat_and_multiply_shapes(rng):
    with pytest.raises(ShapeError):
        F.concat_forward([np.zeros((2, 3)), np.zeros((3, 3))])
    with pytest.raises(ShapeError):
        F.multiply_broadcast_forward(np.zeros((2, 3)), np.zeros((2, 4, 2, 2, 2)))
    y, _ = F.multiply_broadcast_forward(np.full((1, 2), 2.0), np.ones((1, 2, 3, 3, 3)))
    assert np.all(y == 2.0)


# --- autograd ---


def test_backward_accumulates_shared_inputs():
    x = parameter(np.array([[1.0, -2.0]]))
    y = ops.concat([x, x])
    out = ops.cross_entropy(ops.softmax(y), ops.one_hot([0], 4))
    out.backward()
    assert x.grad.shape == (1, 2)
    x.zero_grad()
    assert x.grad is None


def test_backward_needs_scalar_seed():
    x = parameter(np.ones((2, 2)))
    with pytest.raises(ShapeError, match="scalar"):
        ops.sigmoid(x).backward()


def test_non_finite_forward_is_rejected():
    with pytest.raises(NonFiniteError, match="fully_connected"):
        ops.fully_connected(Tensor(np.array([[np.inf]])), parameter(np.ones((1, 1))), parameter(np.zeros(1)))


def test_constants_do_not_build_a_tape():
    out = ops.sigmoid(Tensor(np.zeros((1, 2))))
    assert not out.requires_grad and out._parents == ()


def test_kink_signature_tracks_relu_masks():
    x = parameter(np.array([[0.5, -0.5]]))
    a = kink_signature(ops.flatten(ops.leaky_relu(x, 0.01)))
    x.data[0, 1] = 0.5
    assert kink_signature(ops.flatten(ops.leaky_relu(x, 0.01))) != a


def test_relative_error_floor():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 1e-6) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_every_layer_passes_gradient_check():
    reports = run_layer_checks(seed=0, tolerance=1e-6)
    labels = [r.label for r in reports]
    assert labels == [
        "conv3d", "leaky_relu", "global_max_pool", "global_avg_pool", "fully_connected",
        "sigmoid", "softmax", "concat", "multiply_broadcast", "flatten",
    ]
    for report in reports:
        assert report.passed, "\n".join(report.lines())
        assert report.checked > 0


def test_corrupted_backward_is_caught(monkeypatch):
    original = F.fully_connected_backward

    def corrupted(grad, cache):
        gx, gw, gb = original(grad, cache)
        return gx, gw * 1.01, gb

    monkeypatch.setattr(F, "fully_connected_backward", corrupted)
    reports = {r.label: r for r in run_layer_checks(seed=0)}
    bad = reports["fully_connected"]
    assert not bad.passed
    assert bad.max_rel_error > 1e-3
    with pytest.raises(GradientCheckError, match="fully_connected"):
        bad.raise_for_failure()


def test_gradient_check_samples_at_least_requested(rng):
    w = parameter(rng.normal(size=(30, 2)))
    b = parameter(np.zeros(2))
    x = Tensor(rng.normal(size=(4, 30)))
    t = ops.one_hot([0, 1, 0, 1], 2)
    report = gradient_check(lambda: ops.cross_entropy(ops.softmax(ops.fully_connected(x, w, b)), t),
                            {"w": w, "b": b}, n_samples=20, tolerance=1e-6)
    by_name = {p.name: p for p in report.params}
    # the bias holds only 2 scalars; the weight picks up the rest of the quota
    assert by_name["b"].checked == 2
    assert by_name["w"].checked == 18
    assert [p.name for p in report.params] == ["w", "b"]
    assert report.passed


def test_gradient_check_redistributes_unused_quota(rng):
    w = parameter(rng.normal(0.0, 0.05, size=(500, 2)))
    b = parameter(np.zeros(2))
    x = Tensor(rng.normal(size=(3, 500)))
    t = ops.one_hot([0, 1, 1], 2)
    report = gradient_check(lambda: ops.cross_entropy(ops.softmax(ops.fully_connected(x, w, b)), t),
                            {"w": w, "b": b}, n_samples=200, tolerance=1e-6)
    assert report.checked == 200
    assert report.skipped == 0
    assert report.passed


# --- optimizer ---


def test_sgdm_matches_closed_form():
    p = np.array([1.0, -1.0])
    state = SgdmState(learning_rate=0.1, momentum=0.5)
    g = np.array([1.0, 2.0])
    sgdm_step({"p": p}, {"p": g}, state)
    npt.assert_allclose(p, [0.9, -1.2])
    sgdm_step({"p": p}, {"p": g}, state)
    # v = 0.5 * g + g
    npt.assert_allclose(p, [0.9 - 0.15, -1.2 - 0.3])


def test_sgdm_zero_momentum_is_plain_sgd(rng):
    p = rng.normal(size=5)
    start = p.copy()
    g = rng.normal(size=5)
    state = SgdmState(learning_rate=0.2, momentum=0.0)
    for _ in range(3):
        sgdm_step({"p": p}, {"p": g}, state)
    npt.assert_allclose(p, start - 0.6 * g)


def test_sgdm_zero_learning_rate_leaves_params(rng):
    p = rng.normal(size=(3, 4))
    before = p.copy()
    state = SgdmState(learning_rate=0.0, momentum=0.9)
    for _ in range(3):
        sgdm_step({"p": p}, {"p": rng.normal(size=(3, 4))}, state)
    npt.assert_array_equal(p, before)
    assert np.any(state.velocity["p"] != 0)


def test_sgdm_rejects_mismatches():
    with pytest.raises(ShapeError, match="names"):
        sgdm_step({"a": np.zeros(2)}, {"b": np.zeros(2)}, SgdmState())
    with pytest.raises(ShapeError, match="shape"):
        sgdm_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, SgdmState())
    with pytest.raises(ValueError):
        SgdmState(momentum=1.0)


def test_sgdm_optimizer_treats_missing_grad_as_zero():
    a, b = parameter(np.ones(2)), parameter(np.ones(2))
    opt = SGDM({"a": a, "b": b}, learning_rate=0.5, momentum=0.9)
    a.grad = np.array([1.0, 1.0])
    opt.step()
    npt.assert_allclose(a.data, [0.5, 0.5])
    npt.assert_allclose(b.data, [1.0, 1.0])
    opt.zero_grad()
    assert a.grad is None
    assert opt.names == ["a", "b"]


# --- checkpoint ---

MANIFEST = ['conv1 conv3d {"filters": 2}', "flatten flatten {}"]


def _params(rng):
    return [("conv1.weight", rng.normal(size=(2, 1, 3, 3, 3))), ("conv1.bias", rng.normal(size=2))]


def test_checkpoint_reload_is_exact(rng):
    params = _params(rng)
    blob = write_checkpoint(MANIFEST, params)
    assert blob.startswith(b"VXM1\nlayers 2\n")
    back = read_checkpoint(blob, MANIFEST, [(n, a.shape) for n, a in params])
    for name, arr in params:
        npt.assert_array_equal(back[name], arr)


def test_checkpoint_manifest_mismatch_names_line(rng):
    params = _params(rng)
    blob = write_checkpoint(MANIFEST, params)
    other = ['conv1 conv3d {"filters": 4}', "flatten flatten {}"]
    with pytest.raises(CheckpointError, match="line 1"):
        read_checkpoint(blob, other, [(n, a.shape) for n, a in params])


def test_checkpoint_shape_mismatch(rng):
    params = _params(rng)
    blob = write_checkpoint(MANIFEST, params)
    with pytest.raises(CheckpointError, match="parameter table"):
        read_checkpoint(blob, MANIFEST, [("conv1.weight", (2, 1, 5, 5, 5)), ("conv1.bias", (2,))])


def test_checkpoint_truncation_and_trailing(rng):
    params = _params(rng)
    shapes = [(n, a.shape) for n, a in params]
    blob = write_checkpoint(MANIFEST, params)
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(blob[:-3], MANIFEST, shapes)
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(blob + b"\x00", MANIFEST, shapes)
    with pytest.raises(CheckpointError, match="VXM1"):
        read_checkpoint(b"VXM2\nend_header\n", MANIFEST, shapes)


def test_checkpoint_rejects_non_finite(rng):
    params = [("conv1.weight", np.full((2, 1, 3, 3, 3), np.nan)), ("conv1.bias", np.zeros(2))]
    blob = write_checkpoint(MANIFEST, params)
    with pytest.raises(CheckpointError, match="non-finite"):
        read_checkpoint(blob, MANIFEST, [(n, a.shape) for n, a in params])
