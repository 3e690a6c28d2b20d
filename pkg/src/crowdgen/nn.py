"""Small neural building blocks on top of :mod:`crowdgen.autograd`."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Param, Tape, Tensor

ACTIVATIONS = {"relu": ag.relu, "gelu": ag.gelu}
CHECKPOINT_MAGIC = b"CROWDGEN-CKPT 1\n"


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class NetSpec:
    """Architecture and seed of a network; enough to rebuild it before loading weights."""

    kind: str = "mlp"
    widths: list = field(default_factory=lambda: [8, 128, 128, 8])
    activation: str = "gelu"
    heads: int = 4
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(int(w) <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Module:
    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_params(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{name}.{i}."))
        return out

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def _name_params(self):
        for name, p in self.named_params():
            p.name = name

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_params()}

    def load_state(self, state: dict):
        own = dict(self.named_params())
        missing = set(own) - set(state)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        for n, p in own.items():
            v = np.asarray(state[n], dtype=float)
            if v.shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {v.shape} != model shape {p.shape}")
            p.assign(v)

    def zero_(self):
        for p in self.params():
            p.assign(np.zeros_like(p.data))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init: str = "default"):
        if init == "zero":
            w = np.zeros((n_in, n_out))
        elif init == "identity":
            w = np.eye(n_in, n_out)
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))
        self.w = Param(w)
        self.b = Param(np.zeros(n_out))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class MLP(Module):
    def __init__(self, widths, activation: str, rng: np.random.Generator, last_init: str = "default"):
        self.layers = [
            Linear(a, b, rng, init=(last_init if i == len(widths) - 2 else "default"))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.act = ACTIVATIONS[activation]
        self.n_in = widths[0]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


class Attention(Module):
    """Multi-head scaled dot-product attention from queries onto keys/values."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, d_kv: int | None = None):
        if d % heads:
            raise ValueError("token width must be divisible by the head count")
        d_kv = d_kv or d
        self.q = Linear(d, d, rng)
        self.k = Linear(d_kv, d, rng)
        self.v = Linear(d_kv, d, rng)
        self.o = Linear(d, d, rng)
        self.heads = heads
        self.d = d

    def _split(self, x: Tensor) -> Tensor:
        # (..., n, d) -> (..., h, n, d/h)
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = ag.reshape(x, (*lead, n, self.heads, self.d // self.heads))
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return ag.transpose(x, axes)

    def _merge(self, x: Tensor) -> Tensor:
        lead = x.shape[:-3]
        nl = len(lead)
        x = ag.transpose(x, list(range(nl)) + [nl + 1, nl, nl + 2])
        return ag.reshape(x, (*lead, x.shape[-3], self.d))

    def __call__(self, x: Tensor, kv: Tensor, key_mask=None) -> Tensor:
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        scores = (q @ ag.swap_last(k)) * (1.0 / math.sqrt(self.d // self.heads))
        if key_mask is not None:
            # key_mask: (..., n_kv) booleans, True = keep
            bias = np.where(np.asarray(key_mask), 0.0, -1e9)[..., None, None, :]
            scores = scores + bias
        return self.o(self._merge(ag.softmax(scores, axis=-1) @ v))


class SetAttentionBlock(Module):
    """Self-attention over agent tokens, cross-attention to context tokens, then a feed-forward layer.

    Every sub-layer is residual and no positional information is attached to the
    agent tokens, so the block is permutation-equivariant in its token order.
    """

    def __init__(self, d: int, heads: int, ff_width: int, activation: str, rng: np.random.Generator, d_ctx: int | None = None):
        self.self_attn = Attention(d, heads, rng)
        self.cross_attn = Attention(d, heads, rng, d_kv=d_ctx or d)
        self.ff = MLP([d, ff_width, d], activation, rng)

    def __call__(self, tokens: Tensor, context: Tensor | None = None, token_mask=None) -> Tensor:
        x = tokens + self.self_attn(tokens, tokens, token_mask)
        if context is not None and context.shape[-2] > 0:
            x = x + self.cross_attn(x, context)
        return x + self.ff(x)


def set_attention_block(block: SetAttentionBlock, tokens, context=None) -> np.ndarray:
    """Apply ``block`` to a list of token vectors with an optional list of context vectors."""
    t = Tensor(np.asarray(tokens, dtype=float))
    if t.shape[0] == 0:
        raise ValueError("set attention needs at least one token")
    c = None
    if context is not None and len(context):
        c = Tensor(np.asarray(context, dtype=float))
    return block(t, c).data


def build_mlp(spec: NetSpec, last_init: str = "default") -> MLP:
    net = MLP([int(w) for w in spec.widths], spec.activation, np.random.default_rng(spec.seed), last_init)
    net._name_params()
    return net


def forward(net, *inputs, **kw) -> tuple[Tensor, Tape]:
    """Run ``net`` on ``inputs`` while recording a tape for :func:`autograd.backward`."""
    n_in = getattr(net, "n_in", None)
    if n_in is not None and inputs and np.shape(inputs[0])[-1] != n_in:
        raise ValueError(f"input width {np.shape(inputs[0])[-1]} != expected {n_in}")
    with Tape() as tape:
        out = net(*[ag.as_tensor(x) for x in inputs], **kw)
    tape.output = out
    return out, tape


# --- optimizer -----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params] if grads is None else list(grads)
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {p.name!r}; step rejected")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            new = p.data * (1.0 - self.lr * self.wd)
            new = new - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.assign(new)


def adam_step(params, grads, state: AdamW | None = None, lr: float = 1e-4, weight_decay: float = 0.01) -> AdamW:
    """One AdamW update of ``params`` with ``grads``; returns the (possibly new) optimizer state."""
    if state is None:
        state = AdamW(params, lr=lr, weight_decay=weight_decay)
    state.step(grads)
    return state


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict) -> None:
    """Versioned binary dump: magic line, JSON header line, raw little-endian float64 payload."""
    names = sorted(arrays)
    meta = dict(header)
    meta["arrays"] = [[n, list(np.shape(arrays[n]))] for n in names]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(blob + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a crowdgen checkpoint")
    nl = data.index(b"\n", len(CHECKPOINT_MAGIC))
    meta = json.loads(data[len(CHECKPOINT_MAGIC):nl])
    pos = nl + 1
    arrays = {}
    for name, shape in meta.pop("arrays"):
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data[pos:pos + 8 * n], dtype="<f8").reshape(shape).copy()
        pos += 8 * n
    if pos != len(data):
        raise ValueError(f"{path}: payload size does not match header")
    return arrays, meta


def spec_to_dict(spec: NetSpec) -> dict:
    return asdict(spec)
