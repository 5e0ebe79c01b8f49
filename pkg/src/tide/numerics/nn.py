"""Parameters, modules and the layers the detector is assembled from."""
from __future__ import annotations

import hashlib
import math
import re

import numpy as np

from tide.errors import ConfigError, DimError
from tide.numerics import tensor as T
from tide.numerics.tensor import Tensor

_NAME_RE = re.compile(r"^[A-Za-z0-9._]+$")


class Parameter(Tensor):
    """A learnable leaf tensor. `name` is filled in by the owning model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def assign(self, value: np.ndarray) -> None:
        """Replace the value in place (optimizer and checkpoint use only)."""
        value = np.array(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise DimError(f"{self.name}: shape {value.shape} != {self.data.shape}")
        value.flags.writeable = False
        self.data = value


class Module:
    """Attribute-walking container: Parameters, Modules and lists of Modules."""

    def named_parameters(self, prefix: str = ""):
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        seen = set()
        for name, p in self.named_parameters(prefix):
            if not _NAME_RE.match(name):
                raise ConfigError(f"illegal parameter name {name!r}")
            if name in seen:
                raise ConfigError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in own.items():
            p.assign(state[name])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, zero: bool = False, gain: float = 1.0):
        w = np.zeros((d_in, d_out)) if zero else xavier(rng, d_in, d_out, gain)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y if self.b is None else y + self.b


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., n, d] -> [..., heads, n, d/heads]."""
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    nl = len(lead)
    return T.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nl = len(lead)
    x = T.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return x.reshape(*lead, n, h * dh)


def attention_weights(q: Tensor, k: Tensor, heads: int) -> Tensor:
    """Per-head softmax(q k^T / sqrt(d_head)) for already-projected q, k."""
    dh = q.shape[-1] // heads
    logits = T.matmul(split_heads(q, heads), T.swapaxes(split_heads(k, heads), -1, -2))
    return T.softmax(logits * (1.0 / math.sqrt(dh)), axis=-1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with input and output projections.

    Accepts any leading batch axes shared by q, k and v.
    """

    def __init__(self, rng, d: int, heads: int, zero_out: bool = False):
        if heads < 1 or d % heads:
            raise ConfigError(f"d={d} is not divisible by heads={heads}")
        self._heads = heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d, zero=zero_out)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
        if not (q.shape[-1] == k.shape[-1] == v.shape[-1] == self.q.w.shape[0]):
            raise DimError("attention feature dims disagree")
        if k.shape[-2] != v.shape[-2]:
            raise DimError("keys and values differ in length")
        attn = attention_weights(self.q(q), self.k(k), self._heads)
        ctx = merge_heads(T.matmul(attn, split_heads(self.v(v), self._heads)))
        out = self.o(ctx)
        return (out, attn) if return_weights else out


class FeedForward(Module):
    def __init__(self, rng, d: int, hidden: int, zero_out: bool = False):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm self-attention block used by both toy backbones."""

    def __init__(self, rng, d: int, heads: int, ffn_dim: int):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, ffn_dim)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h)
        return x + self.ffn(self.ln2(x))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, weights: dict) -> Tensor:
    """Functional attention with explicit projection matrices.

    `weights` maps "w_q", "w_k", "w_v", "w_o" to [d, d] tensors.
    """
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"d={d} is not divisible by heads={heads}")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimError("attention feature dims disagree")
    attn = attention_weights(T.matmul(q, weights["w_q"]), T.matmul(k, weights["w_k"]), heads)
    ctx = merge_heads(T.matmul(attn, split_heads(T.matmul(v, weights["w_v"]), heads)))
    return T.matmul(ctx, weights["w_o"])
