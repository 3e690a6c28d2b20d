import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdgen import autograd as ag
from crowdgen.autograd import Param, StaleTapeError, Tape, Tensor
from crowdgen.nn import (
    MLP,
    AdamW,
    Linear,
    NetSpec,
    NonFiniteGradientError,
    SetAttentionBlock,
    adam_step,
    build_mlp,
    forward,
    load_checkpoint,
    save_checkpoint,
    set_attention_block,
)

from gradcheck import check_net, numeric_grad, random_nets, relative_error


def test_zero_initialized_linear_gives_zero_output(rng):
    net = MLP([4, 3], "relu", rng, last_init="zero")
    out, _ = forward(net, rng.normal(size=(5, 4)))
    assert not out.data.any()


def test_identity_initialized_layer_passes_input_through(rng):
    net = MLP([4, 4], "relu", rng, last_init="identity")
    x = rng.normal(size=(2, 4))
    assert np.array_equal(forward(net, x)[0].data, x)


def test_forward_matches_plain_numpy(rng):
    net = build_mlp(NetSpec(widths=[3, 5, 2], activation="relu", seed=4))
    x = rng.normal(size=(6, 3))
    l1, l2 = net.layers
    expected = np.maximum(x @ l1.w.data + l1.b.data, 0) @ l2.w.data + l2.b.data
    assert np.allclose(forward(net, x)[0].data, expected, atol=1e-14)


def test_forward_rejects_width_mismatch(rng):
    with pytest.raises(ValueError):
        forward(MLP([3, 2], "relu", rng), np.zeros((1, 4)))


def test_linear_weight_gradient_is_outer_product(rng):
    layer = Linear(3, 2, rng)
    layer.w.name, layer.b.name = "w", "b"
    x = rng.normal(size=(1, 3))
    gy = rng.normal(size=(1, 2))
    with Tape() as tape:
        layer(Tensor(x))
    grads = ag.backward(tape, gy)
    assert np.allclose(grads["w"], np.outer(x, gy))
    assert np.allclose(grads["b"], gy[0])


def test_zero_output_gradient_gives_zero_gradients(rng):
    net = build_mlp(NetSpec(widths=[3, 4, 2], seed=1))
    out, tape = forward(net, rng.normal(size=(2, 3)))
    grads = ag.backward(tape, np.zeros(out.shape))
    assert all(not g.any() for g in grads.values())


def test_stale_tape_is_rejected(rng):
    net = build_mlp(NetSpec(widths=[2, 2], seed=0))
    _, tape = forward(net, np.ones((1, 2)))
    net.layers[0].w.assign(net.layers[0].w.data + 1)
    with pytest.raises(StaleTapeError):
        ag.backward(tape)


def test_no_recording_outside_a_tape():
    a = Tensor([1.0, 2.0])
    assert (a * 3).parents == ()


@pytest.mark.parametrize("op", ["tanh", "exp", "square", "absolute", "softmax", "log_softmax", "gelu", "log"])
def test_elementwise_ops_gradcheck(op, rng):
    p = Param(rng.uniform(0.2, 2.0, (3, 4)), "p")
    fn = getattr(ag, op)
    w = rng.normal(size=(3, 4))

    def loss():
        return float((fn(Tensor(p.data)).data * w).sum())

    with Tape() as tape:
        out = fn(p)
    g = ag.backward(tape, w, out)["p"]
    assert relative_error(g, numeric_grad(loss, p)) < 1e-6


def test_structural_ops_gradcheck(rng):
    p = Param(rng.normal(size=(2, 3, 4)), "p")
    q = Param(rng.normal(size=(4, 3)), "q")

    def f(a, b):
        x = ag.transpose(a, (1, 0, 2))  # (3, 2, 4)
        y = ag.reshape(x, (6, 4)) @ b  # (6, 3)
        z = ag.concat([y, ag.getitem(y, (slice(None), slice(0, 1)))], axis=-1)
        return ag.mean(ag.sum_(z * z, axis=1, keepdims=True)) - z

    w = rng.normal(size=(6, 4))
    with Tape() as tape:
        out = f(p, q)
    grads = ag.backward(tape, w, out)
    for prm in (p, q):
        num = numeric_grad(lambda: float((f(Tensor(p.data), Tensor(q.data)).data * w).sum()), prm)
        assert relative_error(grads[prm.name], num) < 1e-6


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_random_nets_pass_gradcheck(seed):
    rng = np.random.default_rng(seed)
    for net, inputs in random_nets(seed, count=4):
        assert check_net(net, inputs, rng) < 1e-4


# --- attention -------------------------------------------------------------------

def block(rng, d=8):
    return SetAttentionBlock(d, 2, 16, "gelu", rng, d_ctx=5)


def test_single_token_output_count_and_no_context(rng):
    b = block(rng)
    out = set_attention_block(b, rng.normal(size=(1, 8)))
    assert out.shape == (1, 8)
    with pytest.raises(ValueError):
        set_attention_block(b, np.zeros((0, 8)))


def test_single_token_self_attention_is_a_feed_forward_map(rng):
    b = block(rng)
    x = rng.normal(size=(1, 8))
    attn = b.self_attn
    v = x @ attn.v.w.data + attn.v.b.data
    h = x + (v @ attn.o.w.data + attn.o.b.data)
    expected = h + b.ff(Tensor(h)).data
    assert np.allclose(set_attention_block(b, x), expected, atol=1e-12)


def test_permuting_tokens_permutes_outputs(rng):
    b = block(rng)
    x, c = rng.normal(size=(6, 8)), rng.normal(size=(4, 5))
    perm = rng.permutation(6)
    assert np.abs(set_attention_block(b, x, c)[perm] - set_attention_block(b, x[perm], c)).max() <= 1e-6


def test_equal_tokens_give_equal_outputs(rng):
    b = block(rng)
    t = rng.normal(size=8)
    out = set_attention_block(b, np.stack([t, t, rng.normal(size=8)]), rng.normal(size=(3, 5)))
    assert np.array_equal(out[0], out[1])


# --- optimizer ------------------------------------------------------------------

def test_zero_gradient_without_decay_leaves_params():
    p = Param(np.array([1.0, -2.0]), "p")
    adam_step([p], [np.zeros(2)], weight_decay=0.0)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_first_step_moves_by_learning_rate_against_sign():
    p = Param(np.array([1.0, 1.0, 1.0]), "p")
    adam_step([p], [np.array([3.0, -0.5, 1e-3])], lr=1e-2, weight_decay=0.0)
    assert np.allclose(p.data - 1.0, [-1e-2, 1e-2, -1e-2], rtol=1e-4)


def test_quadratic_loss_decreases():
    p = Param(np.array([5.0]), "p")
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    losses = []
    for _ in range(100):
        losses.append(float((p.data[0] - 2.0) ** 2))
        opt.step([2 * (p.data - 2.0)])
    assert all(b < a for a, b in zip(losses[5:40], losses[6:41]))
    assert losses[-1] < 1e-2 * losses[0]


def test_nan_gradient_rejects_the_step():
    p = Param(np.array([1.0]), "p")
    opt = AdamW([p])
    with pytest.raises(NonFiniteGradientError):
        opt.step([np.array([np.nan])])
    assert p.data[0] == 1.0 and opt.t == 0


# --- checkpoints --------------------------------------------------------------------

def test_checkpoint_round_trip_and_validation(tmp_path, rng):
    arrays = {"a": rng.normal(size=(2, 3)), "b": np.array(4.0)}
    save_checkpoint(tmp_path / "m.ckpt", arrays, {"model": "x"})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["model"] == "x" and np.array_equal(back["a"], arrays["a"])
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_load_state_rejects_shape_mismatch():
    net = build_mlp(NetSpec(widths=[2, 3]))
    with pytest.raises(ValueError):
        net.load_state({"layers.0.w": np.zeros((3, 3)), "layers.0.b": np.zeros(3)})


def test_same_seed_gives_bitwise_identical_params():
    a = build_mlp(NetSpec(widths=[4, 8, 2], seed=7)).state()
    b = build_mlp(NetSpec(widths=[4, 8, 2], seed=7)).state()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
