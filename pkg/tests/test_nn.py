import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd_oracle import central_diff, max_rel_error
from fmcpe.core_math import RandomSource
from fmcpe.nn import (
    AdamState,
    GradClipConfig,
    Mlp,
    NonFiniteError,
    TimeEmbedding,
    adam_step,
    clip_global_norm,
    embed_time,
    params_hash,
    read_json,
    write_json,
)


def naive_forward(widths, params, x):
    # re-derives the parameter layout instead of using Mlp.layers
    h, off = np.asarray(x, dtype=float), 0
    n_layers = len(widths) - 1
    for k in range(n_layers):
        n_in, n_out = widths[k], widths[k + 1]
        out = np.zeros(n_out)
        for j in range(n_out):
            s = params[off + n_in * n_out + j]
            for i in range(n_in):
                s += params[off + j * n_in + i] * h[i]
            out[j] = s
        off += n_in * n_out + n_out
        h = np.tanh(out) if k < n_layers - 1 else out
    return h


def test_zero_network_outputs_zero():
    net = Mlp((4, 8, 3))
    np.testing.assert_array_equal(net(RandomSource(0).normal(4)), np.zeros(3))


def test_single_affine_layer():
    rng = RandomSource(1)
    net = Mlp.init((3, 2), rng)
    W, b = net.layers[0]
    b[:] = rng.normal(2)
    x = rng.normal(3)
    np.testing.assert_allclose(net(x), W @ x + b, atol=1e-15)


def test_forward_matches_naive_reimplementation():
    rng = RandomSource(2)
    for _ in range(5):
        widths = (3, 5, 4, 2)
        net = Mlp.init(widths, rng)
        net.params[:] += 0.1 * rng.normal(net.n_params)
        x = rng.normal(3)
        np.testing.assert_allclose(net(x), naive_forward(widths, net.params, x), atol=1e-12)


def test_batch_matches_rows():
    net = Mlp.init((3, 6, 2), RandomSource(3))
    x = RandomSource(4).normal((7, 3))
    out = net(x)
    for i in range(7):
        np.testing.assert_allclose(out[i], net(x[i]), atol=1e-15)


def test_wrong_input_dimension():
    with pytest.raises(ValueError):
        Mlp((3, 2))(np.zeros(4))


def test_linear_backward_row_k_is_input():
    net = Mlp.init((3, 2), RandomSource(5))
    x = np.array([0.3, -1.2, 2.0])
    grad, _ = net.backward(x, np.array([0.0, 1.0]))
    np.testing.assert_array_equal(grad[3:6], x)
    np.testing.assert_array_equal(grad[0:3], 0.0)
    np.testing.assert_array_equal(grad[6:8], [0.0, 1.0])


def test_zero_output_grad():
    net = Mlp.init((3, 4, 2), RandomSource(6))
    g, gx = net.backward(np.ones(3), np.zeros(2))
    assert not g.any() and not gx.any()


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    rng = RandomSource(seed)
    widths = tuple(int(w) for w in rng.integers(1, 9, size=int(rng.integers(2, 5))))
    net = Mlp.init(widths, rng)
    x = rng.normal((3, widths[0]))
    gout = rng.normal((3, widths[-1]))
    analytic, gin = net.backward(x, gout)
    numeric = central_diff(lambda: float(np.sum(net(x) * gout)), net.params)
    assert max_rel_error(analytic, numeric) < 1e-4
    xf = x.ravel().copy()
    numeric_x = central_diff(lambda: float(np.sum(net(xf.reshape(x.shape)) * gout)), xf)
    assert max_rel_error(gin.ravel(), numeric_x) < 1e-4


def test_adam_zero_grad_keeps_params():
    p = np.array([1.0, -2.0])
    np.testing.assert_array_equal(adam_step(AdamState(2), p, np.zeros(2)), p)


def test_adam_first_step_closed_form():
    st_ = AdamState(3, lr=0.01)
    g = np.array([0.5, -2.0, 1e-3])
    new = adam_step(st_, np.zeros(3), g)
    np.testing.assert_allclose(new, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_quadratic_bowl():
    w = RandomSource(7).normal(5)
    w /= np.linalg.norm(w)
    st_ = AdamState(5, lr=1e-2)
    for _ in range(500):
        w = adam_step(st_, w, 2 * w)
    assert np.linalg.norm(w) < 1e-2


def test_adam_rejects_nan():
    with pytest.raises(NonFiniteError):
        adam_step(AdamState(2), np.zeros(2), np.array([np.nan, 0.0]))


def test_clip_cases():
    cfg = GradClipConfig(1.0)
    g = np.array([0.3, 0.4])
    np.testing.assert_array_equal(clip_global_norm(g, cfg), g)
    big = np.array([6.0, 8.0])
    assert np.linalg.norm(clip_global_norm(big, cfg)) == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_clip_preserves_direction(values):
    g = np.array(values)
    c = clip_global_norm(g, GradClipConfig(1.0))
    cos = g @ c / (np.linalg.norm(g) * np.linalg.norm(c))
    assert abs(cos - 1) < 1e-12
    assert np.linalg.norm(c) <= 1.0 + 1e-12


def test_embed_time_at_zero():
    e = embed_time(0.0, TimeEmbedding(4, 0.25))
    np.testing.assert_array_equal(e[:4], 0.0)
    np.testing.assert_array_equal(e[4:], 1.0)


def test_embed_time_quarter_period():
    np.testing.assert_allclose(embed_time(0.25, TimeEmbedding(1, 1.0)), [1.0, 0.0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0))
def test_embed_time_unit_pairs(t):
    emb = TimeEmbedding(5, 0.25)
    e = embed_time(t, emb)
    np.testing.assert_allclose(e[:5] ** 2 + e[5:] ** 2, 1.0, atol=1e-12)


def test_embed_time_distinguishes_endpoints():
    emb = TimeEmbedding()
    assert not np.allclose(embed_time(0.0, emb), embed_time(1.0, emb))


def test_embed_time_clamps_with_warning():
    with pytest.warns(RuntimeWarning):
        e = embed_time(1.5, TimeEmbedding())
    np.testing.assert_array_equal(e, embed_time(1.0, TimeEmbedding()))


def test_checkpoint_round_trip(tmp_path):
    net = Mlp.init((3, 5, 2), RandomSource(8))
    path = write_json(tmp_path / "net.json", net.to_dict())
    back = Mlp.from_dict(read_json(path))
    assert back.widths == net.widths
    assert params_hash(back.params) == params_hash(net.params)


def test_checkpoint_rejects_other_versions():
    d = Mlp.init((2, 2), RandomSource(0)).to_dict()
    d["version"] = 99
    with pytest.raises(ValueError):
        Mlp.from_dict(d)
    d = json.loads(json.dumps(Mlp((2, 2)).to_dict()))
    d["activation"] = "relu"
    with pytest.raises(ValueError):
        Mlp.from_dict(d)
