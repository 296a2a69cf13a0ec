"""Flat ``key = value`` run configuration.

Every key has a default in ``DEFAULTS``; a config file or ``--set key=value``
overrides only what it names, and values are coerced to the default's type.
Blank lines and ``#`` comments are ignored.
"""
from __future__ import annotations

from pathlib import Path

from .diffusion import ConfigError

# key: (default, description)
DEFAULTS: dict[str, tuple[object, str]] = {
    "run.seed": (0, "master seed for data order, noise and initialisation"),
    "run.dtype": ("float32", "float64 or float32 for training runs"),
    "diffusion.T": (100, "diffusion steps"),
    "diffusion.beta_start": (1e-3, "first beta of the linear schedule"),
    "diffusion.beta_end": (0.2, "last beta of the linear schedule"),
    "train.batch_size": (32, "minibatch size for every training stage"),
    "denoiser.pretrain_steps": (1500, "joint (all-timestep) pretraining steps"),
    "denoiser.finetune_steps": (2000, "bidirectional finetuning steps"),
    "denoiser.lr": (1e-3, "peak learning rate for the denoiser"),
    "denoiser.text_target": ("x0", "text head regresses the clean latent (x0) or the noise (eps)"),
    "denoiser.alpha": (0.25, "weight of the image-to-text term in the finetune loss"),
    "llm.steps": (600, "LLM language-model pretraining steps"),
    "llm.lr": (3e-3, "peak learning rate for LLM pretraining and dialogue tuning"),
    "align.steps": (300, "projection training steps"),
    "align.lr": (3e-3, "peak learning rate for projection training"),
    "adapter.steps": (400, "adapter training steps"),
    "adapter.lr": (3e-3, "peak learning rate for the adapter"),
    "dialogue.steps": (300, "dialogue tuning steps"),
    "adapter.lambda": (0.3, "fusion weight of the adapter output"),
    "guidance.scale": (2.0, "classifier-free guidance scale"),
    "guidance.uncond_mode": ("max-noise-condition", "unconditional branch: max-noise-condition or null-token"),
    "eval.n_generate": (256, "images generated per arm for toy-FID"),
}


def defaults() -> dict:
    return {k: v for k, (v, _) in DEFAULTS.items()}


def _coerce(key: str, raw: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    proto = DEFAULTS[key][0]
    raw = raw.strip()
    try:
        if isinstance(proto, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(proto).__name__}") from None
    return raw


def parse(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = _coerce(k.strip(), v)
    return out


def resolve(path=None, overrides: list[str] | None = None) -> dict:
    cfg = defaults()
    if path is not None:
        cfg.update(parse(Path(path).read_text()))
    for item in overrides or []:
        cfg.update(parse(item))
    return cfg


def dump(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def defaults_table() -> str:
    """Markdown table of every key, default and meaning."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    rows += [f"| `{k}` | `{v}` | {d} |" for k, (v, d) in DEFAULTS.items()]
    return "\n".join(rows)
