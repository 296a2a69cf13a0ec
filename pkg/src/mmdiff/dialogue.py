"""Dialogue tuning: the LLM learns to answer with ``<Img>caption</Img>`` spans,
and its hidden states over the span condition the frozen denoiser through the
adapter.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapter import assert_frozen, condition, loss_ada
from .data import DialogueSample
from .llm import ToyLLM, pack, weighted_nll
from .nn import ParamBundle
from .optim import AdamW
from .templates import parse_img_spans, render_template
from .tensor import Tensor


def prompt_ids(d: DialogueSample, vocab, variant: str = "decoder-only") -> list[int]:
    text = render_template("dialogue", {"history": d.history, "photo": "", "history_after": ""}, variant)
    return [vocab.bos] + vocab.tokenize(text)


def target_ids(d: DialogueSample, vocab) -> list[int]:
    parse_img_spans(d.target)          # raises on unbalanced markers
    return vocab.tokenize(d.target) + [vocab.eos]


def span_positions(target: list[int], vocab) -> list[int]:
    """Offsets (within ``target``) of the tokens strictly inside the single
    ``<Img>...</Img>`` span."""
    o = vocab.id("<Img>")
    c = vocab.id("</Img>")
    opens = [i for i, t in enumerate(target) if t == o]
    closes = [i for i, t in enumerate(target) if t == c]
    if len(opens) != 1 or len(closes) != 1:
        raise ValueError(f"expected exactly one caption span, found {len(opens)}")
    if closes[0] <= opens[0] + 1:
        raise ValueError("empty caption span")
    return list(range(opens[0] + 1, closes[0]))


def caption_of(d: DialogueSample) -> str | None:
    _, caps = parse_img_spans(d.target)
    return caps[0] if caps else None


def _forward(llm: ToyLLM, dialogues, vocab):
    prompts = [prompt_ids(d, vocab) for d in dialogues]
    targets = [target_ids(d, vocab) for d in dialogues]
    ids, score = pack(prompts, targets, vocab.pad)
    hidden, logits = llm.forward(ids)
    return prompts, targets, hidden, logits, score


def loss_t2t(dialogues: list[DialogueSample], llm: ToyLLM, vocab) -> Tensor:
    """Teacher-forced NLL of each full response given its rendered history."""
    _, _, _, logits, score = _forward(llm, dialogues, vocab)
    return weighted_nll(logits, score)


def span_hidden(hidden: Tensor, prompts, targets, vocab) -> Tensor:
    """LLM hidden states at the caption tokens, (B, L_caption, W)."""
    rows, cols = [], []
    for b, (p, t) in enumerate(zip(prompts, targets)):
        pos = [len(p) + j for j in span_positions(t, vocab)]
        rows.append([b] * len(pos))
        cols.append(pos)
    if len({len(c) for c in cols}) != 1:
        raise ValueError("caption spans in one batch must have equal token length")
    return hidden[(np.asarray(rows), np.asarray(cols))]


@dataclass
class DialogueParts:
    l_all: Tensor
    l_t2i: Tensor
    l_t2t: Tensor


def loss_all(dialogues: list[DialogueSample], images, llm: ToyLLM, adapter: ParamBundle, encoder,
             denoiser, sched, vocab, lam: float, rng, tx=None) -> DialogueParts:
    """L_t2t over the responses plus L_t2i through adapter and frozen denoiser.

    Every dialogue must contain exactly one caption span; ``images[i]`` is the
    image paired with dialogue ``i``'s caption.
    """
    assert_frozen(denoiser.params)
    prompts, targets, hidden, logits, score = _forward(llm, dialogues, vocab)
    l_t2t = weighted_nll(logits, score)
    h = span_hidden(hidden, prompts, targets, vocab)
    clip = encoder.encode_batch([caption_of(d) for d in dialogues])
    y0 = condition(clip, h, adapter, lam)
    l_t2i = loss_ada(np.asarray(images), y0, denoiser, sched, rng, tx=tx)
    return DialogueParts(l_t2i + l_t2t, l_t2i, l_t2t)


@dataclass
class DialogueLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)   # (step, L_t2i, L_t2t)


def train_dialogue(dialogues: list[DialogueSample], image_of: dict[str, np.ndarray], llm: ToyLLM,
                   adapter: ParamBundle, encoder, denoiser, sched, vocab, *, lam: float = 0.3,
                   steps: int = 300, batch_size: int = 32, lr: float = 3e-3, seed: int = 0) -> DialogueLog:
    """Tune LLM and adapter; chit-chat dialogues (no span) add only to L_t2t."""
    assert_frozen(denoiser.params)
    llm.params.unfreeze()
    adapter.unfreeze()
    rng = np.random.default_rng(seed)
    opt = AdamW([llm.params, adapter], lr=lr, total_steps=max(steps, 1))
    photo = [d for d in dialogues if caption_of(d) is not None]
    chat = [d for d in dialogues if caption_of(d) is None]
    n_chat = max(1, round(batch_size * len(chat) / len(dialogues))) if chat else 0
    log = DialogueLog()
    for step in range(steps):
        pb = [photo[i] for i in rng.choice(len(photo), size=min(batch_size - n_chat, len(photo)), replace=False)]
        cb = [chat[i] for i in rng.choice(len(chat), size=min(n_chat, len(chat)), replace=False)] if chat else []
        parts = loss_all(pb, np.stack([image_of[caption_of(d)] for d in pb]), llm, adapter, encoder,
                         denoiser, sched, vocab, lam, rng)
        loss = parts.l_all
        if cb:
            # weight the chit-chat share of the text loss by its batch fraction
            n = len(pb) + len(cb)
            loss = parts.l_t2i + parts.l_t2t * (len(pb) / n) + loss_t2t(cb, llm, vocab) * (len(cb) / n)
        T.backward(loss)
        opt.step()
        log.rows.append((step, parts.l_t2i.item(), parts.l_t2t.item()))
    return log
