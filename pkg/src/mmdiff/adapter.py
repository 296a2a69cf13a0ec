"""Cross-attention adapter that injects LLM semantics into the text condition.

Queries come from the frozen text-encoder latent, keys and values from the
LLM's last hidden states after a linear projection. The adapter output is
blended with the raw latent and used as the denoiser's text condition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .diffusion import NoiseSchedule, q_sample
from .nn import ParamBundle
from .optim import AdamW
from .tensor import Tensor


class ContractError(RuntimeError):
    """A frozen component was found trainable."""


@dataclass(frozen=True)
class AdapterConfig:
    llm_width: int = 64
    adapter_width: int = 64
    clip_width: int = 32
    attn_width: int = 32

    def __post_init__(self):
        if self.attn_width != self.clip_width:
            raise ValueError("attention output width must equal the text-latent width")


def init_adapter(c: AdapterConfig = AdapterConfig(), seed: int = 0) -> ParamBundle:
    rng = np.random.default_rng(seed)
    p = ParamBundle()
    nn.init_linear(p, "mlp", c.llm_width, c.adapter_width, rng)
    p.add("wq", rng.normal(0.0, 1.0 / math.sqrt(c.clip_width), size=(c.clip_width, c.attn_width)))
    p.add("wk", rng.normal(0.0, 1.0 / math.sqrt(c.adapter_width), size=(c.adapter_width, c.attn_width)))
    p.add("wv", rng.normal(0.0, 1.0 / math.sqrt(c.adapter_width), size=(c.adapter_width, c.attn_width)))
    return p


def adapter_attention(clip_seq, llm_hidden, params: ParamBundle) -> tuple[Tensor, Tensor]:
    """Returns (y_sur, attention weights)."""
    q = T.as_tensor(clip_seq)
    h = T.as_tensor(llm_hidden)
    if q.ndim == 2:
        q = q.reshape(1, *q.shape)
    if h.ndim == 2:
        h = h.reshape(1, *h.shape)
    if q.shape[-1] != params["wq"].shape[0]:
        raise T.ShapeError(f"clip width {q.shape[-1]} != adapter query width {params['wq'].shape[0]}")
    if h.shape[-1] != params["mlp.w"].shape[0]:
        raise T.ShapeError(f"LLM width {h.shape[-1]} != adapter input width {params['mlp.w'].shape[0]}")
    m = nn.linear(h, params, "mlp")
    Q = T.matmul(q, params["wq"])
    K = T.matmul(m, params["wk"])
    V = T.matmul(m, params["wv"])
    scores = T.matmul(Q, T.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(Q.shape[-1]))
    w = T.softmax(scores, axis=-1)
    return T.matmul(w, V), w


def adapter_forward(clip_seq, llm_hidden, params: ParamBundle) -> Tensor:
    return adapter_attention(clip_seq, llm_hidden, params)[0]


def fuse(y_sur, clip_enc, lam: float):
    """lam * y_sur + (1 - lam) * clip_enc; the endpoints return an input unchanged."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if T.as_tensor(y_sur).shape != T.as_tensor(clip_enc).shape:
        raise T.ShapeError(f"fuse: shapes {np.shape(y_sur)} and {np.shape(clip_enc)} differ")
    if lam == 0.0:
        return clip_enc
    if lam == 1.0:
        return y_sur
    if isinstance(y_sur, Tensor) or isinstance(clip_enc, Tensor):
        return T.as_tensor(y_sur) * lam + T.as_tensor(clip_enc) * (1.0 - lam)
    return lam * np.asarray(y_sur) + (1.0 - lam) * np.asarray(clip_enc)


def assert_frozen(bundle: ParamBundle, what: str = "denoiser") -> None:
    live = [n for n, t in bundle.items() if t.requires_grad]
    if live:
        raise ContractError(f"{what} must be frozen, but {len(live)} parameters are trainable (e.g. {live[0]})")


def loss_ada(x0, y0_condition, denoiser, sched: NoiseSchedule, rng, tx=None) -> Tensor:
    """Image-noise MSE of the frozen denoiser conditioned on the fused latent."""
    if hasattr(denoiser, "params"):
        assert_frozen(denoiser.params)
    x0 = np.asarray(x0)
    B = len(x0)
    if tx is None:
        tx = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    xt = q_sample(x0, tx, eps, sched)
    eps_hat, _ = denoiser(xt, y0_condition, np.broadcast_to(tx, (B,)).copy(), np.zeros(B, np.int64))
    return T.mse(eps_hat, eps)


def condition(clip_enc, llm_hidden, params: ParamBundle | None, lam: float):
    """The fused text condition; skips the adapter entirely at lam = 0."""
    if lam == 0.0 or params is None:
        if lam != 0.0:
            raise ValueError("adapter parameters required when lambda > 0")
        return clip_enc
    return fuse(adapter_forward(clip_enc, llm_hidden, params), clip_enc, lam)


def train_adapter(params: ParamBundle, images, clip, hidden, denoiser, sched: NoiseSchedule, *,
                  lam: float = 0.3, steps: int = 400, batch_size: int = 32, lr: float = 3e-3,
                  seed: int = 0) -> list[float]:
    """Fit the adapter with the frozen denoiser's image-noise loss.

    ``clip`` (N, L, d) and ``hidden`` (N, L_h, W) are precomputed per caption:
    the text encoder and the LLM are both frozen in this stage.
    """
    assert_frozen(denoiser.params)
    rng = np.random.default_rng(seed)
    opt = AdamW([params], lr=lr, total_steps=max(steps, 1))
    images, clip, hidden = np.asarray(images), np.asarray(clip), np.asarray(hidden)
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        y0 = condition(clip[idx], hidden[idx], params, lam)
        loss = loss_ada(images[idx], y0, denoiser, sched, rng)
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses
