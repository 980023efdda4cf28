import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from qdsr.gradcheck import gradcheck, relative_errors
from qdsr.net import (PRESETS, NetConfig, Params, backward, count_params, forward, init_params,
                      load_weights, save_weights, softmax_global)
from qdsr.numerics import make_rng
from qdsr.tensorio import FormatError

TINY = PRESETS["tiny"]


def interp_matrix(n):
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        pos = min(max((i + 0.5) / 2 - 0.5, 0.0), n - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, n - 1)
        m[i, lo] += 1 - (pos - lo)
        m[i, hi] += pos - lo
    return m


def reference_forward(params, cfg, image):
    """Eval-mode network from scipy correlations and dense interpolation matrices."""
    h = image[None].astype(np.float64)  # channels first
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = np.stack([sum(signal.correlate2d(h[c], w[f, c], mode="same") for c in range(h.shape[0]))
                      + b[f] for f in range(w.shape[0])])
        if layer == cfg.depth:
            logits = z[0]
            e = np.exp(logits - logits.max())
            return e / e.sum()
        h = np.where(z >= 0, z, cfg.leaky_slope * z)
        if layer + 1 in cfg.upsample_after:
            mr, mc = interp_matrix(h.shape[1]), interp_matrix(h.shape[2])
            h = np.stack([mr @ ch @ mc.T for ch in h])


# -- parameter counting ---------------------------------------------------------

def test_count_default():
    assert count_params(NetConfig()) == 1300 + 24 * 62550 + 1251 == 1_503_751


def test_count_minimal():
    assert count_params(NetConfig(depth=1, filters=1, kernel=1, upsample_after=())) == 4


def test_count_doubling_filters():
    # F=100: 2600 + 24 * 250100 + 2501
    k2 = 25
    expected = (k2 * 100 + 100) + 24 * (k2 * 100 * 100 + 100) + (k2 * 100 + 1)
    assert count_params(NetConfig(filters=100)) == expected == 6_007_501
    assert 3.9 < expected / 1_503_751 < 4.0


def test_count_matches_initialized_params():
    for cfg in PRESETS.values():
        assert init_params(make_rng(0), cfg).size() == count_params(cfg)


def test_config_validation():
    for kwargs in ({"kernel": 4}, {"upsample_after": (5, 5)}, {"upsample_after": (25,)},
                   {"dropout_rate": 1.0}, {"depth": 0}, {"output_channels": 2}):
        with pytest.raises(ValueError):
            NetConfig(**kwargs)


# -- initialization ---------------------------------------------------------------

def test_init_deterministic():
    a, b = init_params(make_rng(3), TINY), init_params(make_rng(3), TINY)
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors(), b.tensors()))


def test_init_variance_and_biases():
    cfg = NetConfig(depth=3, filters=50, upsample_after=())
    p = init_params(make_rng(4), cfg)
    for w in p.weights:
        fan_in = w.shape[1] * 25
        target = 2.0 / ((1 + 0.05**2) * fan_in)
        assert abs(w.var() / target - 1) < 0.15
    assert all(not b.any() for b in p.biases)


# -- forward ----------------------------------------------------------------------

def test_forward_matches_reference():
    cfg = NetConfig(depth=3, filters=3, upsample_after=(1, 2))
    p = init_params(make_rng(5), cfg)
    for b in p.biases:
        b[:] = make_rng(6).normal(size=b.shape) * 0.1
    x = make_rng(7).random((7, 9))
    out, cache = forward(p, cfg, x)
    assert cache is None
    np.testing.assert_allclose(out, reference_forward(p, cfg, x), rtol=1e-10, atol=1e-15)


def test_forward_output_layer_many_channels_reference():
    # filters > output channels exercises the shift-add path of the last layer
    cfg = NetConfig(depth=2, filters=6, upsample_after=(1,))
    p = init_params(make_rng(8), cfg)
    x = make_rng(9).random((8, 8))
    np.testing.assert_allclose(forward(p, cfg, x)[0], reference_forward(p, cfg, x), rtol=1e-10)


@pytest.mark.parametrize("shape", [(50, 50), (30, 40), (5, 5)])
def test_shape_law(shape):
    cfg = PRESETS["toy"]
    p = init_params(make_rng(1), cfg)
    out, _ = forward(p, cfg, make_rng(2).random(shape))
    assert out.shape == (4 * shape[0], 4 * shape[1])
    assert abs(out.sum() - 1) < 1e-6 and out.min() >= 0


def test_input_smaller_than_kernel_rejected():
    with pytest.raises(ValueError):
        forward(init_params(make_rng(1), TINY), TINY, np.ones((4, 8)))


def test_zero_weights_uniform():
    p = init_params(make_rng(1), TINY).zeros_like()
    out, _ = forward(p, TINY, make_rng(2).random((6, 7)))
    np.testing.assert_allclose(out, 1 / (24 * 28), rtol=1e-12)


def test_batch_equals_single():
    cfg = PRESETS["toy"]
    p = init_params(make_rng(3), cfg)
    xs = make_rng(4).random((3, 12, 12))
    batch, _ = forward(p, cfg, xs)
    for i in range(3):
        np.testing.assert_allclose(batch[i], forward(p, cfg, xs[i])[0], rtol=1e-12)


def test_eval_deterministic_and_dropout_in_train():
    cfg = NetConfig(depth=3, filters=4, upsample_after=(1, 2), dropout_rate=0.3)
    p = init_params(make_rng(5), cfg)
    x = make_rng(6).random((8, 8))
    assert forward(p, cfg, x)[0].tobytes() == forward(p, cfg, x)[0].tobytes()
    t1, c1 = forward(p, cfg, x, train=True, rng=make_rng(7))
    t2, _ = forward(p, cfg, x, train=True, rng=make_rng(7))
    t3, _ = forward(p, cfg, x, train=True, rng=make_rng(8))
    assert t1.tobytes() == t2.tobytes() and not np.allclose(t1, t3)
    # inverted dropout: kept units are scaled by 1 / (1 - rate)
    mask = c1.masks[0]
    assert set(np.unique(mask)) <= {0.0, 1 / 0.7}


def test_translation_covariance():
    cfg = PRESETS["toy"]
    p = init_params(make_rng(9), cfg)
    a = np.zeros((40, 40))
    a[16, 14] = 1.0
    b = np.roll(a, (4, 4), axis=(0, 1))
    oa, _ = forward(p, cfg, a)
    ob, _ = forward(p, cfg, b)
    band = 2 * cfg.depth * (cfg.kernel // 2)
    inner = slice(band + 16, 160 - band)
    src = slice(band, 160 - band - 16)
    np.testing.assert_allclose(ob[inner, inner], oa[src, src], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rows=st.integers(3, 12), cols=st.integers(3, 12),
       filters=st.integers(1, 4), depth=st.integers(2, 4))
def test_softmax_contract_random_nets(seed, rows, cols, filters, depth):
    cfg = NetConfig(depth=depth, filters=filters, kernel=3, upsample_after=(1,))
    p = init_params(make_rng(seed), cfg)
    out, _ = forward(p, cfg, make_rng(seed, 1).normal(size=(rows, cols)) * 10)
    assert out.shape == (2 * rows, 2 * cols)
    assert abs(out.sum() - 1) < 1e-6 and out.min() >= 0


# -- softmax ----------------------------------------------------------------------

def test_softmax_constant():
    out = softmax_global(np.full((200, 200), 3.3))
    np.testing.assert_allclose(out, 2.5e-5, rtol=1e-12)


def test_softmax_dominant_logit():
    logits = np.zeros((100, 100))
    logits[5, 5] = 20.0
    # closed form e^20 / (e^20 + 9999)
    expected = math.exp(20) / (math.exp(20) + 9999)
    assert softmax_global(logits)[5, 5] == pytest.approx(expected, rel=1e-12)
    assert expected > 0.999


def test_softmax_shift_and_range():
    logits = make_rng(1).normal(size=(9, 9)) * 300
    a = softmax_global(logits)
    np.testing.assert_allclose(softmax_global(logits + 123.4), a, atol=1e-12)
    big = np.array([[700.0, -700.0], [0.0, 699.0]])
    out = softmax_global(big)
    assert np.all(np.isfinite(out)) and abs(out.sum() - 1) < 1e-12


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax_global(np.array([[0.0, np.inf]]))


# -- backward ---------------------------------------------------------------------

def test_gradcheck_tiny_default():
    rep = gradcheck(TINY)
    assert len(rep.layer_errors) == TINY.depth + 1
    assert rep.max_error < 1e-5 and rep.passed


def test_gradcheck_negative_control():
    rep = gradcheck(TINY, corrupt=True)
    assert not rep.passed and rep.layer_errors[0] > 1e-3


@settings(max_examples=6, deadline=None)
@given(seed=st.integers(0, 2**16), depth=st.integers(2, 3), filters=st.integers(1, 3),
       size=st.integers(5, 8))
def test_gradcheck_random_configs(seed, depth, filters, size):
    cfg = NetConfig(depth=depth, filters=filters, kernel=3, upsample_after=(1,),
                    dropout_rate=0.2)
    assert gradcheck(cfg, size=size, seed=seed).max_error < 1e-5


def test_input_gradient_finite_difference():
    cfg = TINY
    p = init_params(make_rng(2), cfg)
    x = make_rng(3).random((8, 8))
    w = make_rng(4).normal(size=(32, 32))
    out, cache = forward(p, cfg, x, train=True, rng=make_rng(5))
    _, dx = backward(p, cfg, cache, w)
    num = np.empty_like(x)
    h = 1e-6
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fp = np.vdot(w, forward(p, cfg, xp, train=True, rng=make_rng(5))[0])
        fm = np.vdot(w, forward(p, cfg, xm, train=True, rng=make_rng(5))[0])
        num[idx] = (fp - fm) / (2 * h)
    assert relative_errors(dx, num, 1e-4 * np.abs(num).max()).max() < 1e-5


def test_zero_output_grad():
    p = init_params(make_rng(1), TINY)
    _, cache = forward(p, TINY, make_rng(2).random((8, 8)), train=True, rng=make_rng(3))
    grads, dx = backward(p, TINY, cache, np.zeros((32, 32)))
    assert all(not g.any() for g in grads.tensors()) and not dx.any()


def test_backward_deterministic():
    p = init_params(make_rng(1), TINY)
    _, cache = forward(p, TINY, make_rng(2).random((8, 8)), train=True, rng=make_rng(3))
    g = make_rng(4).normal(size=(32, 32))
    a, _ = backward(p, TINY, cache, g)
    b, _ = backward(p, TINY, cache, g)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.tensors(), b.tensors()))


def test_relative_error_floor():
    assert relative_errors([0.0], [1e-12], 1e-6)[0] == pytest.approx(1e-6)
    assert relative_errors([2.0], [1.0], 1e-6)[0] == pytest.approx(0.5)


# -- persistence ------------------------------------------------------------------

def test_weights_round_trip(tmp_path):
    cfg = PRESETS["toy"]
    p = init_params(make_rng(1), cfg, np.float32)
    save_weights(tmp_path / "w.qsrw", p, cfg)
    q, cfg2 = load_weights(tmp_path / "w.qsrw")
    assert cfg2 == cfg and q.dtype == np.float32
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.tensors(), q.tensors()))
    x = make_rng(2).random((10, 10)).astype(np.float32)
    assert forward(p, cfg, x)[0].tobytes() == forward(q, cfg, x)[0].tobytes()


def test_weights_mismatch(tmp_path):
    save_weights(tmp_path / "w.qsrw", init_params(make_rng(1), TINY), TINY)
    with pytest.raises(ValueError, match="shape mismatch"):
        load_weights(tmp_path / "w.qsrw", NetConfig(depth=3, filters=3, upsample_after=(1, 2)))


def test_weights_magic(tmp_path):
    save_weights(tmp_path / "w.qsrw", init_params(make_rng(1), TINY), TINY)
    buf = (tmp_path / "w.qsrw").read_bytes()
    assert buf[:4] == b"QSRW"
    (tmp_path / "bad.qsrw").write_bytes(b"QSRX" + buf[4:])
    with pytest.raises(FormatError, match="magic"):
        load_weights(tmp_path / "bad.qsrw")


def test_forward_rejects_mismatched_params():
    p = init_params(make_rng(1), TINY)
    with pytest.raises(ValueError):
        forward(p, NetConfig(depth=3, filters=3, upsample_after=(1, 2)), np.ones((8, 8)))


def test_params_helpers():
    p = init_params(make_rng(1), TINY)
    q = p.copy()
    q.weights[0][...] = 0
    assert p.weights[0].any()
    assert Params.from_tensors(p.tensors()).size() == p.size()
    assert p.astype(np.float32).dtype == np.float32
