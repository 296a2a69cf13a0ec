"""Small transformer language models: decoder-only and encoder-decoder.

The encoder-decoder variant pools the encoder output into a single memory
vector that every decoder block cross-attends to. That pooled vector is the
caption encoding the mid-placed projection is aligned against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import ParamBundle
from .optim import AdamW
from .tensor import Tensor

MODES = ("decoder-only", "encoder-decoder")


@dataclass(frozen=True)
class LLMConfig:
    vocab_size: int
    mode: str = "decoder-only"
    width: int = 64
    depth: int = 4           # decoder-only blocks; split evenly for encoder-decoder
    heads: int = 4
    max_len: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown LLM mode {self.mode!r}")


class ToyLLM:
    def __init__(self, config: LLMConfig, seed: int = 0, params: ParamBundle | None = None):
        self.config = config
        self.params = params if params is not None else self.init_params(config, seed)

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def width(self) -> int:
        return self.config.width

    @staticmethod
    def init_params(c: LLMConfig, seed: int) -> ParamBundle:
        rng = np.random.default_rng(seed)
        p = ParamBundle()
        p.add("tok", rng.normal(0.0, 1.0, size=(c.vocab_size, c.width)))
        p.add("pos", rng.normal(0.0, 0.1, size=(c.max_len, c.width)))
        if c.mode == "decoder-only":
            for i in range(c.depth):
                nn.init_block(p, f"dec.{i}", c.width, rng)
        else:
            half = max(1, c.depth // 2)
            for i in range(half):
                nn.init_block(p, f"enc.{i}", c.width, rng)
            nn.init_layer_norm(p, "enc_ln", c.width)
            for i in range(half):
                nn.init_block(p, f"dec.{i}", c.width, rng, cross=True)
        nn.init_layer_norm(p, "ln_f", c.width)
        nn.init_linear(p, "head", c.width, c.vocab_size, rng)
        return p

    def _n_dec(self) -> int:
        c = self.config
        return c.depth if c.mode == "decoder-only" else max(1, c.depth // 2)

    def embed(self, ids, prefix_embeds=None, image_id: int | None = None) -> Tensor:
        """Token + position embeddings with projected image rows spliced in.

        Positions holding ``image_id`` take the prefix rows in order, one row
        per slot; when the ids carry no image slots the rows are prepended.
        """
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        B, N = ids.shape
        x = T.embedding(self.params["tok"], ids)
        if prefix_embeds is not None:
            pe = T.as_tensor(prefix_embeds)
            if pe.ndim == 2:
                pe = pe.reshape(1, *pe.shape)
            if pe.shape[-1] != self.width:
                raise T.ShapeError(f"prefix width {pe.shape[-1]} != model width {self.width}")
            if pe.shape[0] != B:
                raise T.ShapeError(f"prefix batch {pe.shape[0]} != ids batch {B}")
            K = pe.shape[1]
            slots = ids == image_id if image_id is not None else np.zeros_like(ids, dtype=bool)
            if slots.any():
                counts = slots.sum(axis=1)
                if np.any(counts != K):
                    raise T.ShapeError(f"each row needs {K} image slots, got {counts.tolist()}")
                sel = np.zeros((B, N, K))
                b, n = np.nonzero(slots)
                sel[b, n, np.tile(np.arange(K), B)] = 1.0
                keep = np.broadcast_to((~slots)[..., None], (B, N, self.width)).astype(float)
                x = x * Tensor(keep) + T.matmul(Tensor(sel), pe)
            else:
                x = T.concat([pe, x], axis=1)
        L = x.shape[1]
        if L > self.config.max_len:
            raise T.ShapeError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        return x + self.params["pos"][:L]

    def encode(self, src_ids, prefix_embeds=None, image_id=None) -> Tensor:
        """Encoder states (B, S, W); encoder-decoder only."""
        if self.mode != "encoder-decoder":
            raise ValueError("encode() needs the encoder-decoder variant")
        h = self.embed(src_ids, prefix_embeds, image_id)
        for i in range(max(1, self.config.depth // 2)):
            h = nn.block(h, self.params, f"enc.{i}", self.config.heads)
        return nn.layer_norm(h, self.params, "enc_ln")

    def memory(self, src_ids, prefix_embeds=None, image_id=None) -> Tensor:
        """Mean-pooled encoder output, shape (B, 1, W)."""
        return T.mean(self.encode(src_ids, prefix_embeds, image_id), axis=1, keepdims=True)

    def forward(self, ids, prefix_embeds=None, image_id=None, memory=None, src_ids=None):
        """(hidden states, next-token logits) for every position of ``ids``."""
        if self.mode == "encoder-decoder":
            if memory is None:
                if src_ids is None:
                    raise ValueError("encoder-decoder forward needs src_ids or memory")
                memory = self.memory(src_ids, prefix_embeds, image_id)
            h = self.embed(ids)
        else:
            if memory is not None:
                raise ValueError("decoder-only model takes no memory")
            h = self.embed(ids, prefix_embeds, image_id)
        mask = nn.causal_mask(h.shape[1])
        for i in range(self._n_dec()):
            h = nn.block(h, self.params, f"dec.{i}", self.config.heads, mask=mask, memory=memory)
        h = nn.layer_norm(h, self.params, "ln_f")
        return h, nn.linear(h, self.params, "head")


def llm_forward(ids, model: ToyLLM, mode: str | None = None, prefix_embeds=None, image_id=None, **kw):
    if mode is not None and mode != model.mode:
        raise ValueError(f"model is {model.mode}, asked for {mode}")
    return model.forward(ids, prefix_embeds, image_id, **kw)


# teacher-forced likelihoods


def pack(prompts: list[list[int]], targets: list[list[int]], pad: int):
    """Right-pad prompt+target rows; returns ids and the (row, position,
    token, weight) arrays that score each target token once."""
    rows = [list(p) + list(t) for p, t in zip(prompts, targets)]
    N = max(len(r) for r in rows)
    ids = np.full((len(rows), N), pad, dtype=np.int64)
    b_idx, p_idx, tok, w = [], [], [], []
    for b, (p, t) in enumerate(zip(prompts, targets)):
        if len(t) == 0:
            raise ValueError("empty target")
        if len(p) == 0:
            raise ValueError("empty prompt; start it with BOS")
        ids[b, :len(p) + len(t)] = rows[b]
        for j, tk in enumerate(t):
            b_idx.append(b)
            p_idx.append(len(p) - 1 + j)
            tok.append(tk)
            w.append(1.0 / len(t))
    w = np.asarray(w) / len(rows)
    return ids, (np.asarray(b_idx), np.asarray(p_idx), np.asarray(tok), w)


def weighted_nll(logits: Tensor, score) -> Tensor:
    """Sum over scored positions of weight * -log p(token)."""
    b, p, tok, w = score
    picked = logits[(b, p)]
    logp = T.log_softmax(picked, axis=-1)
    onehot = np.zeros(picked.shape)
    onehot[np.arange(len(tok)), tok] = -w
    return T.tsum(logp * Tensor(onehot))


def teacher_forced_nll(model, prompts, targets, pad: int, prefix_embeds=None, image_id=None,
                       memory=None) -> Tensor:
    """Batch mean of per-example mean target NLL given each prompt.

    Decoder-only: the prompt (possibly with image slots) precedes the target.
    Encoder-decoder: pass ``memory``; prompts are then the decoder start
    tokens (usually just BOS).
    """
    ids, score = pack(prompts, targets, pad)
    kw = {} if memory is None else {"memory": memory}
    _, logits = model.forward(ids, prefix_embeds, image_id, **kw)
    return weighted_nll(logits, score)


def loss_itg(image_embeds, instruction_ids, target_ids, model, image_id: int, pad: int = 0) -> Tensor:
    """Mean NLL of ``target_ids`` given projected image rows and an instruction."""
    if len(target_ids) == 0:
        raise ValueError("empty target")
    return teacher_forced_nll(model, [list(instruction_ids)], [list(target_ids)], pad,
                              prefix_embeds=image_embeds, image_id=image_id)


def per_step_nll(model, prompt, target, prefix_embeds=None, image_id=None, memory=None) -> list[float]:
    """Independent oracle: run the model on each growing prefix separately."""
    out = []
    seq = list(prompt)
    kw = {} if memory is None else {"memory": memory}
    for tok in target:
        with T.no_grad():
            _, logits = model.forward(np.asarray([seq]), prefix_embeds, image_id, **kw)
        z = logits.data[0, -1]
        z = z - z.max()
        out.append(float(np.log(np.exp(z).sum()) - z[tok]))
        seq.append(tok)
    return out


def generate_greedy(prefix_ids, model, max_len: int, eos: int, prefix_embeds=None, image_id=None,
                    memory=None) -> list[int]:
    return generate_greedy_batch([prefix_ids], model, max_len, eos, prefix_embeds, image_id, memory)[0]


def generate_greedy_batch(prefixes, model, max_len: int, eos: int, prefix_embeds=None, image_id=None,
                          memory=None, pad: int = 0) -> list[list[int]]:
    """Argmax decoding for each prefix until EOS or ``max_len`` new tokens.

    Rows are right-padded; causal masking keeps padding from affecting the
    logits read at each row's last real position.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    seqs = [list(p) for p in prefixes]
    outs: list[list[int]] = [[] for _ in seqs]
    live = list(range(len(seqs)))
    kw = {}
    if memory is not None:
        kw["memory"] = T.as_tensor(memory)
    pe = None if prefix_embeds is None else T.as_tensor(prefix_embeds)
    if pe is not None and pe.ndim == 2:
        pe = pe.reshape(1, *pe.shape)
    with T.no_grad():
        for _ in range(max_len):
            if not live:
                break
            N = max(len(seqs[i]) for i in live)
            ids = np.full((len(live), N), pad, dtype=np.int64)
            for r, i in enumerate(live):
                ids[r, :len(seqs[i])] = seqs[i]
            sub_kw = {k: T.getitem(v, np.asarray(live)) for k, v in kw.items()}
            sub_pe = None if pe is None else T.getitem(pe, np.asarray(live))
            _, logits = model.forward(ids, sub_pe, image_id, **sub_kw)
            n_prefix = 0
            if sub_pe is not None and not (image_id is not None and np.any(ids == image_id)):
                n_prefix = sub_pe.shape[1]
            still = []
            for r, i in enumerate(live):
                tok = int(np.argmax(logits.data[r, n_prefix + len(seqs[i]) - 1]))
                if tok == eos:
                    continue
                outs[i].append(tok)
                seqs[i].append(tok)
                still.append(i)
            live = still
    return outs


def pretrain_llm(model: ToyLLM, texts: list[str], vocab, steps: int, batch_size: int = 32, lr: float = 3e-3,
                 seed: int = 0) -> list[float]:
    """Toy language-model pretraining.

    Decoder-only: next-token prediction on ``BOS text EOS``. Encoder-decoder:
    reconstruct each text from its own pooled encoding.
    """
    rng = np.random.default_rng(seed)
    seqs = [vocab.tokenize(t) for t in texts]
    opt = AdamW([model.params], lr=lr, total_steps=max(steps, 1))
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(seqs), size=min(batch_size, len(seqs)), replace=False)
        batch = [seqs[i] for i in idx]
        targets = [s + [vocab.eos] for s in batch]
        if model.mode == "decoder-only":
            loss = teacher_forced_nll(model, [[vocab.bos]] * len(batch), targets, vocab.pad)
        else:
            mem = model.memory(_pad_rows(batch, vocab.pad))
            loss = teacher_forced_nll(model, [[vocab.bos]] * len(batch), targets, vocab.pad, memory=mem)
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses


def _pad_rows(rows, pad: int) -> np.ndarray:
    N = max(len(r) for r in rows)
    out = np.full((len(rows), N), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def last_hidden(model: ToyLLM, ids_rows, bos: int, pad: int) -> Tensor:
    """Final-layer hidden states of ``BOS + ids`` (decoder-only), (B, N+1, W)."""
    rows = [[bos] + list(r) for r in ids_rows]
    if len({len(r) for r in rows}) != 1:
        raise ValueError("last_hidden expects equal-length rows")
    h, _ = model.forward(_pad_rows(rows, pad))
    return h


def perplexity(model: ToyLLM, texts: list[str], vocab) -> float:
    """exp of the mean per-token NLL of ``BOS text EOS`` under the model.

    An encoder-decoder model is scored as in its pretraining: conditioned on
    the text's own encoding (a reconstruction perplexity).
    """
    total, count = 0.0, 0
    with T.no_grad():
        for t in texts:
            ids = vocab.tokenize(t) + [vocab.eos]
            kw = {"src_ids": np.asarray([ids[:-1]])} if model.mode == "encoder-decoder" else {}
            _, logits = model.forward(np.asarray([[vocab.bos] + ids[:-1]]), **kw)
            z = logits.data[0]
            z = z - z.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(z).sum(-1))
            total += float((lse - z[np.arange(len(ids)), ids]).sum())
            count += len(ids)
    return float(np.exp(total / count))
