"""Joint image/text-latent noise predictor and its training objectives.

The network sees one token sequence: 16 image patches, the text-latent rows,
and one token per timestep. It predicts the noise of both modalities at once,
so any pair of noise levels (including a clean condition at t = 0) is a single
forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .diffusion import ConfigError, GuidanceConfig, NoiseSchedule, q_sample, sample_loop
from .nn import ParamBundle
from .optim import AdamW
from .tensor import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    patch: int = 4
    channels: int = 1
    latent_len: int = 4
    latent_dim: int = 32
    width: int = 64
    depth: int = 4
    heads: int = 4
    T: int = 100
    # what head_y regresses: the text noise ("eps") or the clean latent ("x0").
    # Either way the model's outputs are noise predictions; with "x0" the text
    # noise is derived from the clean-latent estimate and the schedule.
    text_target: str = "eps"

    def __post_init__(self):
        if self.text_target not in ("eps", "x0"):
            raise ConfigError(f"text_target must be 'eps' or 'x0', got {self.text_target!r}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def n_tokens(self) -> int:
        return 2 + self.n_patches + self.latent_len


def _time_features(t, width: int, T_max: int) -> np.ndarray:
    return nn.sinusoidal(np.asarray(t, dtype=np.float64) * (1000.0 / T_max), width)


class JointDenoiser:
    """U-ViT-style network predicting (eps_x, eps_y) from (x_t, y_t, t_x, t_y).

    Blocks are split into an input half and an output half joined by long
    skip connections, as in U-ViT.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), seed: int = 0,
                 params: ParamBundle | None = None, sched: NoiseSchedule | None = None):
        self.config = config
        self.params = params if params is not None else self.init_params(config, seed)
        self.alpha_bar = None
        if config.text_target == "x0":
            if sched is None or sched.T != config.T:
                raise ConfigError("an x0 text head needs the noise schedule it is trained with")
            self.alpha_bar = np.asarray(sched.alpha_bar)

    @staticmethod
    def init_params(c: DenoiserConfig, seed: int) -> ParamBundle:
        rng = np.random.default_rng(seed)
        p = ParamBundle()
        W = c.width
        nn.init_linear(p, "patch", c.patch_dim, W, rng)
        nn.init_linear(p, "text", c.latent_dim, W, rng)
        p.add("pos", rng.normal(0.0, 0.02, size=(c.n_tokens, W)))
        for name in ("tx", "ty"):
            nn.init_linear(p, f"{name}.fc1", W, W, rng)
            nn.init_linear(p, f"{name}.fc2", W, W, rng)
        for i in range(c.depth):
            nn.init_block(p, f"blocks.{i}", W, rng)
        for i in range(c.depth // 2, c.depth):
            nn.init_linear(p, f"skip.{i}", 2 * W, W, rng)
        nn.init_layer_norm(p, "ln_f", W)
        nn.init_linear(p, "head_x", W, c.patch_dim, rng, scale=0.1)
        nn.init_linear(p, "head_y", W, c.latent_dim, rng, scale=0.1)
        return p

    def _patchify(self, x: Tensor) -> Tensor:
        c = self.config
        B, g, P = x.shape[0], c.image_size // c.patch, c.patch
        x = x.reshape(B, g, P, g, P, c.channels).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, c.patch_dim)

    def _unpatchify(self, x: Tensor) -> Tensor:
        c = self.config
        B, g, P = x.shape[0], c.image_size // c.patch, c.patch
        x = x.reshape(B, g, g, P, P, c.channels).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, c.image_size, c.image_size, c.channels)

    def _time_token(self, t, B: int, name: str) -> Tensor:
        t = np.broadcast_to(np.asarray(t), (B,))
        feats = Tensor(_time_features(t, self.config.width, self.config.T))
        h = T.gelu(nn.linear(feats, self.params, f"{name}.fc1"))
        return nn.linear(h, self.params, f"{name}.fc2").reshape(B, 1, self.config.width)

    def check_inputs(self, xt, yt, tx, ty) -> None:
        c = self.config
        img = (c.image_size, c.image_size, c.channels)
        if xt.shape[1:] != img:
            raise T.ShapeError(f"image input must be (B, {img}), got {xt.shape}")
        if yt.shape[1:] != (c.latent_len, c.latent_dim):
            raise T.ShapeError(f"text input must be (B, {c.latent_len}, {c.latent_dim}), got {yt.shape}")
        if xt.shape[0] != yt.shape[0]:
            raise T.ShapeError(f"batch sizes differ: {xt.shape[0]} vs {yt.shape[0]}")
        for t in (tx, ty):
            t = np.asarray(t)
            if np.any(t < 0) or np.any(t > c.T):
                raise ValueError(f"timestep out of range [0, {c.T}]")
            if t.ndim and t.shape != (xt.shape[0],):
                raise T.ShapeError(f"per-sample timesteps must have shape ({xt.shape[0]},)")

    def __call__(self, xt, yt, tx, ty) -> tuple[Tensor, Tensor]:
        eps_x, head_y = self.forward_raw(xt, yt, tx, ty)
        if self.alpha_bar is None:
            return eps_x, head_y
        return eps_x, self.text_eps_from_x0(yt, ty, head_y)

    def text_eps_from_x0(self, yt, ty, y0_hat: Tensor) -> Tensor:
        """eps = (y_t - sqrt(abar) y0_hat) / sqrt(1 - abar).

        At t_y = 0 the text is a clean condition and its noise output is never
        used; 1 - abar is floored so the division stays finite there.
        """
        B = y0_hat.shape[0]
        ab = self.alpha_bar[np.broadcast_to(np.asarray(ty), (B,))].reshape(B, 1, 1)
        om = np.maximum(1.0 - ab, 1e-4)
        yt = np.asarray(yt.data if isinstance(yt, Tensor) else yt)
        dt = y0_hat.data.dtype
        scale = Tensor(np.broadcast_to(np.sqrt(ab / om), y0_hat.shape).astype(dt))
        return Tensor((yt / np.sqrt(om)).astype(dt)) - y0_hat * scale

    def forward_raw(self, xt, yt, tx, ty) -> tuple[Tensor, Tensor]:
        """(image-noise prediction, raw text head) before any x0 -> eps conversion."""
        xt, yt = T.as_tensor(xt), T.as_tensor(yt)
        self.check_inputs(xt, yt, tx, ty)
        c, p = self.config, self.params
        B = xt.shape[0]
        tokens = T.concat([
            self._time_token(tx, B, "tx"),
            self._time_token(ty, B, "ty"),
            nn.linear(self._patchify(xt), p, "patch"),
            nn.linear(yt, p, "text"),
        ], axis=1) + p["pos"]
        h = tokens
        half = c.depth // 2
        skips = []
        for i in range(c.depth):
            if i >= half:
                h = nn.linear(T.concat([h, skips.pop()], axis=-1), p, f"skip.{i}")
            h = nn.block(h, p, f"blocks.{i}", c.heads)
            if i < half:
                skips.append(h)
        h = nn.layer_norm(h, p, "ln_f")
        n_img = c.n_patches
        eps_x = self._unpatchify(nn.linear(h[:, 2:2 + n_img], p, "head_x"))
        eps_y = nn.linear(h[:, 2 + n_img:], p, "head_y")
        return eps_x, eps_y


def denoise_joint(xt, yt, tx, ty, model: JointDenoiser) -> tuple[Tensor, Tensor]:
    return model(xt, yt, tx, ty)


@dataclass
class NoisyBatch:
    x0: np.ndarray
    y0: np.ndarray
    eps_x: np.ndarray
    eps_y: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    xt: np.ndarray = field(init=False)
    yt: np.ndarray = field(init=False)
    sched: NoiseSchedule = field(repr=False, default=None)

    def __post_init__(self):
        self.xt = q_sample(self.x0, self.tx, self.eps_x, self.sched)
        self.yt = q_sample(self.y0, self.ty, self.eps_y, self.sched)


def make_noisy_batch(x0, y0, sched: NoiseSchedule, rng, t_low: int = 0, tx=None, ty=None) -> NoisyBatch:
    """Draw noises and independent timesteps uniformly in {t_low, ..., T}."""
    B = len(x0)
    if tx is None:
        tx = rng.integers(t_low, sched.T + 1, size=B)
    if ty is None:
        ty = rng.integers(t_low, sched.T + 1, size=B)
    return NoisyBatch(np.asarray(x0), np.asarray(y0), rng.standard_normal(np.shape(x0)),
                      rng.standard_normal(np.shape(y0)), np.broadcast_to(tx, (B,)).copy(),
                      np.broadcast_to(ty, (B,)).copy(), sched=sched)


def _sq_sum(a, b) -> Tensor:
    d = T.sub(a, b)
    return T.tsum(T.square(d))


def loss_unidiffuser(batch: NoisyBatch, model) -> Tensor:
    """Mean squared error over the concatenated residual [eps_x, eps_y]."""
    hx, hy = model(batch.xt, batch.yt, batch.tx, batch.ty)
    n = batch.eps_x.size + batch.eps_y.size
    return (_sq_sum(hx, batch.eps_x) + _sq_sum(hy, batch.eps_y)) * (1.0 / n)


def bidiffuser_terms(batch: NoisyBatch, model) -> tuple[Tensor, Tensor]:
    """(text-to-image MSE, image-to-text MSE), each with a clean condition.

    Both conditional passes run as one batch: the first half noises the image
    and conditions on y0 (t_y = 0), the second half noises the text and
    conditions on x0 (t_x = 0).
    """
    B = len(batch.x0)
    zeros = np.zeros(B, dtype=np.int64)
    hx, hy = model(np.concatenate([batch.xt, batch.x0]), np.concatenate([batch.y0, batch.yt]),
                   np.concatenate([batch.tx, zeros]), np.concatenate([zeros, batch.ty]))
    return T.mse(hx[:B], batch.eps_x), T.mse(hy[B:], batch.eps_y)


def loss_bidiffuser(batch: NoisyBatch, model, alpha: float = 1.0) -> Tensor:
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    l_t2i, l_i2t = bidiffuser_terms(batch, model)
    return l_t2i + l_i2t * float(alpha)


def _x0_target(model) -> bool:
    return getattr(model, "alpha_bar", None) is not None


def train_loss_unidiffuser(batch: NoisyBatch, model) -> Tensor:
    """Joint training loss. For an x0 text head the text residual is taken in
    clean-latent space (y0_hat - y0); otherwise this is ``loss_unidiffuser``."""
    if not _x0_target(model):
        return loss_unidiffuser(batch, model)
    hx, y0_hat = model.forward_raw(batch.xt, batch.yt, batch.tx, batch.ty)
    n = batch.eps_x.size + batch.eps_y.size
    return (_sq_sum(hx, batch.eps_x) + _sq_sum(y0_hat, batch.y0)) * (1.0 / n)


def train_loss_bidiffuser(batch: NoisyBatch, model, alpha: float = 1.0) -> Tensor:
    """Finetuning loss. For an x0 text head the image-to-text term is
    ||y0_hat - y0||^2, i.e. the noise MSE reweighted by 1/SNR(t_y); otherwise
    this is ``loss_bidiffuser``."""
    if not _x0_target(model):
        return loss_bidiffuser(batch, model, alpha)
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    B = len(batch.x0)
    zeros = np.zeros(B, dtype=np.int64)
    hx, y0_hat = model.forward_raw(np.concatenate([batch.xt, batch.x0]), np.concatenate([batch.y0, batch.yt]),
                                   np.concatenate([batch.tx, zeros]), np.concatenate([zeros, batch.ty]))
    return T.mse(hx[:B], batch.eps_x) + T.mse(y0_hat[B:], batch.y0) * float(alpha)


def finetune_step(model: JointDenoiser, batch: NoisyBatch, opt: AdamW, alpha: float = 1.0) -> float:
    loss = train_loss_bidiffuser(batch, model, alpha)
    T.backward(loss)
    opt.step()
    return loss.item()


def joint_step(model: JointDenoiser, batch: NoisyBatch, opt: AdamW) -> float:
    loss = train_loss_unidiffuser(batch, model)
    T.backward(loss)
    opt.step()
    return loss.item()


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def train_denoiser(model: JointDenoiser, x0: np.ndarray, y0: np.ndarray, sched: NoiseSchedule, *,
                   objective: str, steps: int, batch_size: int = 32, lr: float = 1e-3, alpha: float = 1.0,
                   seed: int = 0, opt: AdamW | None = None, log: TrainLog | None = None) -> TrainLog:
    """Run ``steps`` updates of either the joint ("unidiffuser") or the
    bidirectional ("bidiffuser") objective on minibatches drawn from (x0, y0)."""
    if objective not in ("unidiffuser", "bidiffuser"):
        raise ConfigError(f"unknown objective {objective!r}")
    rng = np.random.default_rng(seed)
    opt = opt or AdamW([model.params], lr=lr, total_steps=max(steps, 1))
    log = log or TrainLog()
    n = len(x0)
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        if objective == "unidiffuser":
            batch = make_noisy_batch(x0[idx], y0[idx], sched, rng, t_low=0)
            loss = train_loss_unidiffuser(batch, model)
        else:
            batch = make_noisy_batch(x0[idx], y0[idx], sched, rng, t_low=1)
            loss = train_loss_bidiffuser(batch, model, alpha)
        T.backward(loss)
        log.lrs.append(opt.step())
        log.losses.append(loss.item())
    return log


def eval_bidiffuser_terms(model: JointDenoiser, x0, y0, sched: NoiseSchedule, seed: int = 1234,
                          repeats: int = 4) -> tuple[float, float]:
    """Clean-condition losses averaged over fixed noise draws (no grad)."""
    rng = np.random.default_rng(seed)
    lx = ly = 0.0
    with T.no_grad():
        for _ in range(repeats):
            b = make_noisy_batch(x0, y0, sched, rng, t_low=1)
            a, c = bidiffuser_terms(b, model)
            lx += a.item()
            ly += c.item()
    return lx / repeats, ly / repeats


def eval_loss_bidiffuser(model, x0, y0, sched, alpha: float = 1.0, seed: int = 1234, repeats: int = 4) -> float:
    lx, ly = eval_bidiffuser_terms(model, x0, y0, sched, seed, repeats)
    return lx + alpha * ly


def _image_to_text_fn(model: JointDenoiser):
    def fn(y_t, cond_x, t, cond_t):
        return model(cond_x, y_t, cond_t, t)[1].data
    return fn


def _text_to_image_fn(model: JointDenoiser):
    def fn(x_t, cond_y, t, cond_t):
        if cond_y is None:
            cond_y = np.zeros((len(x_t), model.config.latent_len, model.config.latent_dim))
        return model(x_t, cond_y, t, cond_t)[0].data
    return fn


def sample_text_latents(model: JointDenoiser, images, sched: NoiseSchedule, guide: GuidanceConfig,
                        seed: int, chunk: int = 128) -> np.ndarray:
    """Reverse diffusion on the text branch conditioned on clean images."""
    images = np.asarray(images)
    c = model.config
    out = []
    with T.no_grad():
        for k, i in enumerate(range(0, len(images), chunk)):
            part = images[i:i + chunk]
            out.append(sample_loop(_image_to_text_fn(model), part, sched, guide, (seed, k),
                                   (len(part), c.latent_len, c.latent_dim)))
    return np.concatenate(out)


def sample_images(model: JointDenoiser, conditions, sched: NoiseSchedule, guide: GuidanceConfig,
                  seed: int, chunk: int = 128) -> np.ndarray:
    """Reverse diffusion on the image branch conditioned on clean text latents."""
    conditions = np.asarray(conditions)
    c = model.config
    out = []
    with T.no_grad():
        for k, i in enumerate(range(0, len(conditions), chunk)):
            part = conditions[i:i + chunk]
            out.append(sample_loop(_text_to_image_fn(model), part, sched, guide, (seed, k),
                                   (len(part), c.image_size, c.image_size, c.channels)))
    return np.concatenate(out)
