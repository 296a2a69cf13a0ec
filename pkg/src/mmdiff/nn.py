"""Parameter bundles and the transformer pieces shared by every network."""
from __future__ import annotations

import hashlib
import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamBundle:
    """Named parameters for one trainable component.

    Freezing a parameter clears its ``requires_grad`` flag, so a frozen tensor
    never receives a gradient and is skipped by the optimizer.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None, frozen=()):
        self.params: dict[str, Tensor] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)
        for name in frozen:
            self.params[name].requires_grad = False

    def add(self, name: str, array, frozen: bool = False) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(array, requires_grad=not frozen, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def values(self):
        return self.params.values()

    def freeze(self, prefix: str = "") -> ParamBundle:
        for name, t in self.params.items():
            if name.startswith(prefix):
                t.requires_grad = False
                t.grad = None
        return self

    def unfreeze(self, prefix: str = "") -> ParamBundle:
        for name, t in self.params.items():
            if name.startswith(prefix):
                t.requires_grad = True
        return self

    def is_frozen(self, name: str) -> bool:
        return not self.params[name].requires_grad

    @property
    def frozen_names(self) -> list[str]:
        return [n for n, t in self.params.items() if not t.requires_grad]

    def trainable(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        """Copies of every parameter array, keyed by name."""
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            t = self.params[name]
            if t.shape != arr.shape:
                raise T.ShapeError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.data = np.array(arr, dtype=t.data.dtype)

    def copy(self) -> ParamBundle:
        return ParamBundle(self.arrays(), frozen=self.frozen_names)

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
        return math.sqrt(total)

    def digest(self) -> str:
        """Content hash over names, shapes and raw bytes."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data)
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()[:16]


def init_linear(p: ParamBundle, prefix: str, n_in: int, n_out: int, rng, bias: bool = True,
                scale: float = 1.0) -> None:
    p.add(f"{prefix}.w", rng.normal(0.0, scale / math.sqrt(n_in), size=(n_in, n_out)))
    if bias:
        p.add(f"{prefix}.b", np.zeros(n_out))


def linear(x, p: ParamBundle, prefix: str) -> Tensor:
    y = T.matmul(x, p[f"{prefix}.w"])
    b = f"{prefix}.b"
    return y + p[b] if b in p else y


def init_layer_norm(p: ParamBundle, prefix: str, width: int) -> None:
    p.add(f"{prefix}.g", np.ones(width))
    p.add(f"{prefix}.b", np.zeros(width))


def layer_norm(x, p: ParamBundle, prefix: str) -> Tensor:
    return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def causal_mask(n: int, prefix_visible: int = 0) -> np.ndarray:
    """Additive mask: position i may attend to j <= i."""
    m = np.triu(np.full((n, n), -1e9), k=1)
    if prefix_visible:
        m[:, :prefix_visible] = 0.0
    return m


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, N, D = x.shape
    return x.reshape(B, N, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, N, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes."""
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + Tensor(mask)
    return T.matmul(T.softmax(scores, axis=-1), v)


def init_mha(p: ParamBundle, prefix: str, width: int, rng, kv_width: int | None = None) -> None:
    kv_width = kv_width or width
    init_linear(p, f"{prefix}.q", width, width, rng)
    init_linear(p, f"{prefix}.k", kv_width, width, rng)
    init_linear(p, f"{prefix}.v", kv_width, width, rng)
    init_linear(p, f"{prefix}.o", width, width, rng)


def mha(x: Tensor, p: ParamBundle, prefix: str, n_heads: int, mask=None, memory: Tensor | None = None) -> Tensor:
    src = x if memory is None else memory
    q = _split_heads(linear(x, p, f"{prefix}.q"), n_heads)
    k = _split_heads(linear(src, p, f"{prefix}.k"), n_heads)
    v = _split_heads(linear(src, p, f"{prefix}.v"), n_heads)
    return linear(_merge_heads(attention(q, k, v, mask)), p, f"{prefix}.o")


def init_block(p: ParamBundle, prefix: str, width: int, rng, cross: bool = False, mlp_ratio: int = 4) -> None:
    init_layer_norm(p, f"{prefix}.ln1", width)
    init_mha(p, f"{prefix}.attn", width, rng)
    if cross:
        init_layer_norm(p, f"{prefix}.lnx", width)
        init_mha(p, f"{prefix}.xattn", width, rng)
    init_layer_norm(p, f"{prefix}.ln2", width)
    init_linear(p, f"{prefix}.fc1", width, mlp_ratio * width, rng)
    init_linear(p, f"{prefix}.fc2", mlp_ratio * width, width, rng)


def block(x: Tensor, p: ParamBundle, prefix: str, n_heads: int, mask=None, memory: Tensor | None = None) -> Tensor:
    """Pre-norm transformer block; cross-attends to ``memory`` when given."""
    x = x + mha(layer_norm(x, p, f"{prefix}.ln1"), p, f"{prefix}.attn", n_heads, mask)
    if memory is not None:
        x = x + mha(layer_norm(x, p, f"{prefix}.lnx"), p, f"{prefix}.xattn", n_heads, memory=memory)
    h = T.gelu(linear(layer_norm(x, p, f"{prefix}.ln2"), p, f"{prefix}.fc1"))
    return x + linear(h, p, f"{prefix}.fc2")


def sinusoidal(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sin/cos features of shape ``positions.shape + (dim,)``."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = pos * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
