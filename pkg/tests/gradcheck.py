"""Finite-difference gradient checking shared by the unit and acceptance tests."""

import numpy as np

from crowdgen import autograd as ag
from crowdgen.nn import MLP, SetAttentionBlock, forward

STEP = 1e-5
# Central differences at STEP carry roundoff near 1e-11 * |loss|; gradients that are
# exactly zero (e.g. attention key biases under softmax shift invariance) need this floor.
FLOOR = 1e-5


def relative_error(analytic, numeric) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, FLOOR)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)))


def numeric_grad(loss_fn, param, h=STEP) -> np.ndarray:
    base = param.data.copy()
    g = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        param.assign(plus)
        fp = loss_fn()
        param.assign(minus)
        fm = loss_fn()
        g[idx] = (fp - fm) / (2 * h)
    param.assign(base)
    return g


def check_net(net, inputs, rng, max_entries=None) -> float:
    """Max relative error over every parameter of ``net`` for a random linear read-out of its output."""
    out, _ = forward(net, *inputs)
    weights = rng.normal(size=out.shape)

    def loss():
        return float((net(*[ag.Tensor(x) for x in inputs]).data * weights).sum())

    _, tape = forward(net, *inputs)
    grads = ag.backward(tape, weights)
    worst = 0.0
    for name, p in net.named_params():
        worst = max(worst, relative_error(grads[name], numeric_grad(loss, p)))
    return worst


class AttentionNet:
    """Attention block followed by an MLP read-out, so the check covers both."""

    def __init__(self, d, heads, rng, activation):
        self.block = SetAttentionBlock(d, heads, 2 * d, activation, rng, d_ctx=3)
        self.head = MLP([d, 5, 2], activation, rng)
        self.n_in = d

    def named_params(self):
        return self.block.named_params("block.") + self.head.named_params("head.")

    def __call__(self, tokens, context):
        return self.head(self.block(tokens, context))


def random_nets(seed: int, count: int = 20):
    """Alternating MLPs and attention nets of random sizes, each with matching inputs."""
    rng = np.random.default_rng(seed)
    nets = []
    for i in range(count):
        act = ("relu", "gelu")[i % 2]
        if i % 4 in (0, 1):
            widths = [int(w) for w in rng.integers(2, 7, size=int(rng.integers(2, 5)))]
            net = MLP(widths, act, rng)
            for n, p in net.named_params():
                p.name = n
                p.assign(p.data + rng.normal(0, 0.1, p.shape))  # nonzero biases
            nets.append((net, (rng.normal(size=(3, widths[0])),)))
        else:
            heads = int(rng.integers(1, 3))
            d = heads * int(rng.integers(2, 4))
            net = AttentionNet(d, heads, rng, act)
            for n, p in net.named_params():
                p.name = n
            nets.append((net, (rng.normal(size=(int(rng.integers(1, 5)), d)), rng.normal(size=(3, 3)))))
    return nets
