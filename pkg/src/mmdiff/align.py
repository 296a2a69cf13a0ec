"""Projection from the denoiser's text space into the LLM, in two placements.

Pre-placement: projected latent rows fill the ``<image>`` slots of the
instruction prompt of a decoder-only LLM, trained with the image-grounded
generation loss. Mid-placement: the mean of the projected rows replaces the
pooled encoder memory of an encoder-decoder LLM, trained with the generation
loss plus a squared-distance term pulling it onto the caption's own encoding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .diffusion import ConfigError
from .llm import ToyLLM, teacher_forced_nll
from .metrics import alignment_metrics
from .nn import ParamBundle
from .optim import AdamW
from .templates import CAPTION_QUERIES, render_template
from .tensor import Tensor

IMAGE_SLOTS = 4


def init_projection(latent_dim: int = 32, llm_width: int = 64, seed: int = 0) -> ParamBundle:
    p = ParamBundle()
    nn.init_linear(p, "proj", latent_dim, llm_width, np.random.default_rng(seed))
    return p


def project(latents, proj: ParamBundle) -> Tensor:
    """Apply the projection to every latent row: (B, L, d) -> (B, L, W)."""
    x = T.as_tensor(latents)
    if x.shape[-1] != proj["proj.w"].shape[0]:
        raise T.ShapeError(f"latent width {x.shape[-1]} != projection input {proj['proj.w'].shape[0]}")
    return nn.linear(x, proj, "proj")


def loss_itdm(d_diff, d_llm) -> Tensor:
    """Batch mean of squared Euclidean distances between paired vectors."""
    a, b = T.as_tensor(d_diff), T.as_tensor(d_llm)
    if a.shape != b.shape:
        raise T.ShapeError(f"ITDM: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 1:
        a, b = a.reshape(1, -1), b.reshape(1, -1)
    N = a.shape[0]
    return T.tsum(T.square(a - b)) * (1.0 / N)


def expand_image_slots(ids: list[int], image_id: int, k: int = IMAGE_SLOTS) -> list[int]:
    out = []
    for i in ids:
        out.extend([i] * k if i == image_id else [i])
    return out


def instruction_ids(vocab, task: str, fields: dict, variant: str = "decoder-only") -> list[int]:
    """BOS + rendered template, with the image placeholder widened to K slots."""
    text = render_template(task, fields, variant)
    return [vocab.bos] + expand_image_slots(vocab.tokenize(text), vocab.image)


def caption_embedding(llm: ToyLLM, caption_rows, vocab) -> Tensor:
    """The LLM-side vector a projected image is compared against, (B, W).

    Encoder-decoder: the pooled encoder memory of the caption. Decoder-only:
    the mean input embedding of the caption tokens.
    """
    N = max(len(r) for r in caption_rows)
    ids = np.full((len(caption_rows), N), vocab.pad, dtype=np.int64)
    for i, r in enumerate(caption_rows):
        ids[i, :len(r)] = r
    if llm.mode == "encoder-decoder":
        m = llm.memory(ids)
        return m.reshape(m.shape[0], m.shape[2])
    if len({len(r) for r in caption_rows}) != 1:
        raise ValueError("decoder-only caption embedding expects equal-length captions")
    return T.mean(T.embedding(llm.params["tok"], ids), axis=1)


def pooled_projection(latents, proj: ParamBundle) -> Tensor:
    p = project(latents, proj)
    return T.mean(p, axis=1)


def pre_align_loss(latents, prompts, targets, proj: ParamBundle, llm: ToyLLM, vocab) -> Tensor:
    if llm.mode != "decoder-only":
        raise ConfigError("this toy build places the projection before decoder-only LLMs only")
    embeds = project(latents, proj)
    if embeds.shape[-1] != llm.width:
        raise T.ShapeError(f"projection width {embeds.shape[-1]} != LLM width {llm.width}")
    return teacher_forced_nll(llm, prompts, targets, vocab.pad, prefix_embeds=embeds, image_id=vocab.image)


def mid_align_loss(latents, caption_rows, targets, proj: ParamBundle, llm: ToyLLM, vocab,
                   d_llm=None) -> tuple[Tensor, Tensor, Tensor]:
    """(L_mid, L_ITG, L_ITDM) with L_mid = L_ITG + L_ITDM."""
    if llm.mode != "encoder-decoder":
        raise ConfigError("mid placement needs the encoder-decoder LLM variant")
    d_diff = pooled_projection(latents, proj)
    if d_llm is None:
        d_llm = caption_embedding(llm, caption_rows, vocab)
    memory = d_diff.reshape(d_diff.shape[0], 1, d_diff.shape[1])
    l_itg = teacher_forced_nll(llm, [[vocab.bos]] * len(targets), targets, vocab.pad, memory=memory)
    l_itdm = loss_itdm(d_diff, d_llm)
    return l_itg + l_itdm, l_itg, l_itdm


def pre_align_forward(image, instruction, target_ids, proj, llm, vocab, image_to_latent) -> Tensor:
    """Single-example loss starting from pixels; ``image_to_latent`` runs the
    frozen denoiser (see :func:`mmdiff.pipeline.System.image_latents`)."""
    lat = image_to_latent(np.asarray(image)[None])
    return pre_align_loss(lat, [list(instruction)], [list(target_ids)], proj, llm, vocab)


def mid_align_forward(image, caption_ids, target_ids, proj, llm, vocab, image_to_latent):
    lat = image_to_latent(np.asarray(image)[None])
    return mid_align_loss(lat, [list(caption_ids)], [list(target_ids)], proj, llm, vocab)


@dataclass
class AlignmentExample:
    latent: np.ndarray          # (L, d) sampled from the frozen denoiser
    caption_ids: list[int]
    prompt: list[int]
    target: list[int]


def build_examples(latents, captions, vocab, rng, vqa: list | None = None,
                   variant: str = "decoder-only") -> list[AlignmentExample]:
    """Caption examples with a random query each, plus optional VQA examples.

    ``vqa`` holds one list of (question, answer) pairs per caption.
    """
    out = []
    for i, (lat, cap) in enumerate(zip(latents, captions)):
        cap_ids = vocab.tokenize(cap)
        query = CAPTION_QUERIES[int(rng.integers(len(CAPTION_QUERIES)))]
        out.append(AlignmentExample(lat, cap_ids, instruction_ids(vocab, "caption", {"query": query}, variant),
                                    cap_ids + [vocab.eos]))
        for q, a in (vqa[i] if vqa else []):
            out.append(AlignmentExample(lat, cap_ids, instruction_ids(vocab, "vqa", {"question": q}, variant),
                                        vocab.tokenize(a) + [vocab.eos]))
    return out


@dataclass
class AlignLog:
    rows: list[tuple] = field(default_factory=list)   # (step, L_ITG, L_ITDM, cosine, mse)
    before: tuple[float, float] | None = None
    after: tuple[float, float] | None = None

    def to_tsv(self) -> str:
        lines = ["step\tL_ITG\tL_ITDM\tcosine\tmse"]
        for r in self.rows:
            lines.append("\t".join([str(r[0])] + [f"{v:.8g}" for v in r[1:]]))
        return "\n".join(lines) + "\n"


def eval_alignment(latents, caption_rows, proj, llm, vocab) -> tuple[float, float]:
    with T.no_grad():
        d_diff = pooled_projection(latents, proj).data
        d_llm = caption_embedding(llm, caption_rows, vocab).data
    cos, mse, _ = alignment_metrics(d_diff, d_llm)
    return cos, mse


def train_alignment(examples: list[AlignmentExample], proj: ParamBundle, llm: ToyLLM, vocab, *,
                    manner: str, freeze_llm: bool = True, steps: int = 300, batch_size: int = 32,
                    lr: float = 3e-3, seed: int = 0, log_every: int = 10) -> AlignLog:
    """Train the projection (and the LLM when unfrozen, pre placement only)."""
    if manner not in ("pre", "mid"):
        raise ConfigError(f"unknown manner {manner!r}")
    if manner == "mid" and not freeze_llm:
        raise ConfigError("mid placement trains the projection only")
    if freeze_llm:
        llm.params.freeze()
    else:
        llm.params.unfreeze()
    rng = np.random.default_rng(seed)
    lat_all = np.stack([e.latent for e in examples])
    caps_all = [e.caption_ids for e in examples]
    # caption encodings are constants while the LLM is frozen
    d_llm_all = None
    if freeze_llm:
        with T.no_grad():
            d_llm_all = caption_embedding(llm, caps_all, vocab).data
    log = AlignLog(before=eval_alignment(lat_all, caps_all, proj, llm, vocab))
    bundles = [proj] if freeze_llm else [proj, llm.params]
    opt = AdamW(bundles, lr=lr, total_steps=max(steps, 1))
    for step in range(steps):
        idx = rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)
        batch = [examples[i] for i in idx]
        lat = np.stack([e.latent for e in batch])
        if manner == "pre":
            l_itg = pre_align_loss(lat, [e.prompt for e in batch], [e.target for e in batch], proj, llm, vocab)
            loss, l_itdm = l_itg, None
        else:
            d_llm = None if d_llm_all is None else Tensor(d_llm_all[idx])
            loss, l_itg, l_itdm = mid_align_loss(lat, [e.caption_ids for e in batch], [e.target for e in batch],
                                                 proj, llm, vocab, d_llm=d_llm)
        T.backward(loss)
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            cos, mse = eval_alignment(lat_all, caps_all, proj, llm, vocab)
            log.rows.append((step, l_itg.item(), float("nan") if l_itdm is None else l_itdm.item(), cos, mse))
    log.after = eval_alignment(lat_all, caps_all, proj, llm, vocab)
    return log
