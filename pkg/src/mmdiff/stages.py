"""Training stages wired to a resolved config, shared by the CLI, tests and demos.

Every stage is a pure function of its inputs and the config's seeds, so a
rerun reproduces its outputs bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig, init_adapter, train_adapter
from .align import AlignLog, build_examples, init_projection, train_alignment
from .config import defaults
from .data import PairedSample, WorldSpec, dataset_hash, gen_dataset, images_array, make_dialogues, vqa_items
from .denoiser import DenoiserConfig, JointDenoiser, TrainLog, sample_text_latents, train_denoiser
from .dialogue import DialogueLog, train_dialogue
from .diffusion import GuidanceConfig, NoiseSchedule, make_schedule
from .llm import LLMConfig, ToyLLM, pretrain_llm
from .pipeline import caption_hidden
from .text import CaptionCodebook, TextEncoder, Vocab

# fixed seed offsets so every stage draws from its own stream
_SEED = {"denoiser-init": 0, "pretrain": 1, "finetune": 2, "llm": 3, "adapter": 4, "align": 5,
         "dialogue": 6, "sample": 7, "proj": 8}


def seed_for(cfg: dict, stage: str) -> int:
    return 1000 * int(cfg["run.seed"]) + _SEED[stage]


@dataclass
class World:
    samples: list[PairedSample]
    vocab: Vocab
    encoder: TextEncoder
    x0: np.ndarray
    y0: np.ndarray
    captions: list[str]
    codebook: CaptionCodebook
    dataset_hash: str

    @classmethod
    def build(cls, samples: list[PairedSample] | None = None, seed: int = 0) -> World:
        samples = samples if samples is not None else gen_dataset(WorldSpec(seed=seed))
        vocab = Vocab.build()
        enc = TextEncoder(vocab)
        caps = [s.caption for s in samples]
        y0 = enc.encode_batch(caps)
        return cls(samples, vocab, enc, images_array(samples), y0, caps, CaptionCodebook(caps, y0),
                   dataset_hash(samples))

    def image_of(self) -> dict[str, np.ndarray]:
        return {c: x for c, x in zip(self.captions, self.x0)}


def schedule(cfg: dict) -> NoiseSchedule:
    return make_schedule(cfg["diffusion.T"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"])


def denoiser_config(cfg: dict) -> DenoiserConfig:
    return DenoiserConfig(T=cfg["diffusion.T"], text_target=cfg["denoiser.text_target"])


def guidance(cfg: dict) -> GuidanceConfig:
    return GuidanceConfig(cfg["guidance.scale"], cfg["guidance.uncond_mode"])


def meta(cfg: dict, world: World, stage: str, **extra) -> dict:
    return {"stage": stage, "T": cfg["diffusion.T"], "beta_start": cfg["diffusion.beta_start"],
            "beta_end": cfg["diffusion.beta_end"], "vocab_size": len(world.vocab), "encoder_seed": 0,
            "dataset": world.dataset_hash, "lambda": cfg["adapter.lambda"],
            "guidance_scale": cfg["guidance.scale"], "uncond_mode": cfg["guidance.uncond_mode"],
            "text_target": cfg["denoiser.text_target"],
            "config": dict(cfg), **extra}


def pretrain_joint(world: World, cfg: dict | None = None) -> tuple[JointDenoiser, TrainLog]:
    cfg = cfg or defaults()
    with T.default_dtype(cfg["run.dtype"]):
        den = JointDenoiser(denoiser_config(cfg), seed=seed_for(cfg, "denoiser-init"), sched=schedule(cfg))
        log = train_denoiser(den, world.x0, world.y0, schedule(cfg), objective="unidiffuser",
                             steps=cfg["denoiser.pretrain_steps"], batch_size=cfg["train.batch_size"],
                             lr=cfg["denoiser.lr"], seed=seed_for(cfg, "pretrain"))
    return den, log


def finetune_bidiffuser(den: JointDenoiser, world: World, cfg: dict | None = None,
                        objective: str = "bidiffuser", steps: int | None = None, seed: int | None = None) -> TrainLog:
    """Continue training ``den`` in place; ``objective='unidiffuser'`` gives the
    equal-budget joint-training control."""
    cfg = cfg or defaults()
    with T.default_dtype(cfg["run.dtype"]):
        den.params.unfreeze()
        return train_denoiser(den, world.x0, world.y0, schedule(cfg), objective=objective,
                              steps=cfg["denoiser.finetune_steps"] if steps is None else steps,
                              batch_size=cfg["train.batch_size"], lr=cfg["denoiser.lr"],
                              alpha=cfg["denoiser.alpha"],
                              seed=seed_for(cfg, "finetune") if seed is None else seed)


def i2t_accuracy(den: JointDenoiser, world: World, cfg: dict | None = None, seed: int = 0) -> tuple[float, np.ndarray]:
    """Exact-caption accuracy of image -> sampled latent -> nearest caption."""
    cfg = cfg or defaults()
    with T.default_dtype(cfg["run.dtype"]):
        lat = sample_text_latents(den, world.x0, schedule(cfg), guidance(cfg), seed)
    dec = world.codebook.decode_batch(lat)
    return float(np.mean([a == b for a, b in zip(dec, world.captions)])), lat


def llm_corpus(world: World) -> list[str]:
    return list(world.captions)


def pretrain_language_model(world: World, cfg: dict, mode: str = "decoder-only") -> ToyLLM:
    with T.default_dtype(cfg["run.dtype"]):
        llm = ToyLLM(LLMConfig(len(world.vocab), mode=mode), seed=seed_for(cfg, "llm"))
        pretrain_llm(llm, llm_corpus(world), world.vocab, cfg["llm.steps"], cfg["train.batch_size"],
                     cfg["llm.lr"], seed=seed_for(cfg, "llm"))
    return llm


def adapter_stage(den: JointDenoiser, world: World, cfg: dict, llm: ToyLLM | None = None, seed: int | None = None):
    """Returns (llm, adapter params, per-step losses); denoiser and LLM frozen."""
    den.params.freeze()
    llm = llm or pretrain_language_model(world, cfg)
    llm.params.freeze()
    s = seed_for(cfg, "adapter") if seed is None else seed
    with T.default_dtype(cfg["run.dtype"]):
        with T.no_grad():
            hidden = caption_hidden(llm, world.captions, world.vocab).data
        ad = init_adapter(AdapterConfig(), seed=s)
        losses = train_adapter(ad, world.x0, world.y0, hidden, den, schedule(cfg), lam=cfg["adapter.lambda"],
                               steps=cfg["adapter.steps"], batch_size=cfg["train.batch_size"],
                               lr=cfg["adapter.lr"], seed=s)
    return llm, ad, losses


def align_stage(den: JointDenoiser, world: World, cfg: dict, manner: str = "pre", freeze_llm: bool = True,
                latents: np.ndarray | None = None):
    """Returns (llm, projection, AlignLog, latents) with the denoiser frozen."""
    den.params.freeze()
    if latents is None:
        _, latents = i2t_accuracy(den, world, cfg, seed=seed_for(cfg, "sample"))
    mode = "decoder-only" if manner == "pre" else "encoder-decoder"
    llm = pretrain_language_model(world, cfg, mode)
    rng = np.random.default_rng(seed_for(cfg, "align"))
    vqa = [vqa_items(s) for s in world.samples] if manner == "pre" else None
    variant = "decoder-only" if manner == "pre" else "encoder-decoder"
    with T.default_dtype(cfg["run.dtype"]):
        ex = build_examples(latents, world.captions, world.vocab, rng, vqa=vqa, variant=variant)
        proj = init_projection(latents.shape[-1], llm.width, seed=seed_for(cfg, "proj"))
        log = train_alignment(ex, proj, llm, world.vocab, manner=manner, freeze_llm=freeze_llm,
                              steps=cfg["align.steps"], batch_size=cfg["train.batch_size"],
                              lr=cfg["align.lr"], seed=seed_for(cfg, "align"))
    return llm, proj, log, latents


def dialogue_stage(den: JointDenoiser, llm: ToyLLM, adapter, world: World, cfg: dict) -> DialogueLog:
    den.params.freeze()
    dialogues = make_dialogues(world.samples, seed=seed_for(cfg, "dialogue"))
    with T.default_dtype(cfg["run.dtype"]):
        return train_dialogue(dialogues, world.image_of(), llm, adapter, world.encoder, den, schedule(cfg),
                              world.vocab, lam=cfg["adapter.lambda"], steps=cfg["dialogue.steps"],
                              batch_size=cfg["train.batch_size"], lr=cfg["llm.lr"],
                              seed=seed_for(cfg, "dialogue"))
