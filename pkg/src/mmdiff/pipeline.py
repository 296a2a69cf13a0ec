"""End-to-end composition over a set of trained components.

Every call returns (or logs) a ``CallRecord`` holding the exact prompt string,
conditioning text, seed and component hashes, which is enough to replay it.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .adapter import condition
from .align import instruction_ids, project
from .checkpoint import Checkpoint, CompatibilityError
from .data import DialogueSample
from .denoiser import DenoiserConfig, JointDenoiser, sample_images, sample_text_latents
from .diffusion import GuidanceConfig, NoiseSchedule, make_schedule
from .llm import LLMConfig, ToyLLM, generate_greedy, last_hidden
from .nn import ParamBundle
from .templates import SpanParseError, parse_img_spans, render_template
from .text import CaptionCodebook, TextEncoder, Vocab

MAX_NEW_TOKENS = 24


@dataclass
class CallRecord:
    op: str
    seed: int
    prompt: str | None = None
    conditioning: str | None = None
    output: str | None = None
    lam: float | None = None
    hashes: dict[str, str] = field(default_factory=dict)
    warning: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def caption_hidden(llm: ToyLLM, captions: list[str], vocab: Vocab) -> T.Tensor:
    """Frozen-LLM hidden states over each caption's own tokens (BOS dropped)."""
    rows = [vocab.tokenize(c) for c in captions]
    h = last_hidden(llm, rows, vocab.bos, vocab.pad)
    return h[:, 1:]


@dataclass
class System:
    vocab: Vocab
    encoder: TextEncoder
    sched: NoiseSchedule
    denoiser: JointDenoiser
    llm: ToyLLM | None = None
    proj: ParamBundle | None = None
    adapter: ParamBundle | None = None
    codebook: CaptionCodebook | None = None
    lam: float = 0.3
    guide: GuidanceConfig = GuidanceConfig()
    stage: str = ""
    log: list[CallRecord] = field(default_factory=list)

    # -- construction -----------------------------------------------------
    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, codebook: CaptionCodebook | None = None) -> System:
        m = ckpt.meta
        vocab = Vocab.build()
        if m.get("vocab_size", len(vocab)) != len(vocab):
            raise CompatibilityError("checkpoint vocabulary size differs from this build")
        sched = make_schedule(m.get("T", 100), m.get("beta_start", 1e-3), m.get("beta_end", 0.2))
        den = JointDenoiser(DenoiserConfig(T=sched.T, text_target=m.get("text_target", "eps")),
                            params=ckpt.bundle("denoiser/"), sched=sched)
        den.params.freeze()
        llm = None
        if any(k.startswith("llm/") for k in ckpt.arrays):
            llm = ToyLLM(LLMConfig(len(vocab), mode=m.get("llm_mode", "decoder-only")), params=ckpt.bundle("llm/"))
        has = lambda p: any(k.startswith(p) for k in ckpt.arrays)
        return cls(vocab, TextEncoder(vocab, m.get("encoder_seed", 0)), sched, den, llm,
                   ckpt.bundle("proj/") if has("proj/") else None,
                   ckpt.bundle("adapter/") if has("adapter/") else None,
                   codebook, float(m.get("lambda", 0.3)),
                   GuidanceConfig(float(m.get("guidance_scale", 2.0)), m.get("uncond_mode", "max-noise-condition")),
                   m.get("stage", ""))

    def hashes(self) -> dict[str, str]:
        out = {"denoiser": self.denoiser.params.digest(), "encoder": self.encoder.digest()}
        if self.llm is not None:
            out["llm"] = self.llm.params.digest()
        if self.proj is not None:
            out["proj"] = self.proj.digest()
        if self.adapter is not None:
            out["adapter"] = self.adapter.digest()
        return out

    def _require(self, what: str, ok: bool) -> None:
        if not ok:
            raise CompatibilityError(f"{what} is not available in a stage-{self.stage!r} checkpoint set")

    # -- image -> text ------------------------------------------------------
    def image_latents(self, images, seed: int = 0) -> np.ndarray:
        return sample_text_latents(self.denoiser, images, self.sched, self.guide, seed)

    def image_to_text(self, image, task: str = "caption", question: str | None = None,
                      seed: int = 0, query: str | None = None) -> tuple[str, CallRecord]:
        self._require("image-to-text", self.llm is not None and self.proj is not None
                      and self.llm.mode == "decoder-only")
        from .templates import CAPTION_QUERIES
        if task == "caption":
            fields = {"query": query or CAPTION_QUERIES[0]}
        elif task == "vqa":
            if not question:
                raise ValueError("vqa needs a question")
            fields = {"question": question}
        else:
            raise ValueError(f"unsupported image-to-text task {task!r}")
        prompt = render_template(task, fields)
        lat = self.image_latents(np.asarray(image)[None], seed)
        with T.no_grad():
            embeds = project(lat, self.proj)
        ids = instruction_ids(self.vocab, task, fields)
        out = generate_greedy(ids, self.llm, MAX_NEW_TOKENS, self.vocab.eos, prefix_embeds=embeds,
                              image_id=self.vocab.image)
        text = self.vocab.detokenize(out)
        rec = CallRecord("image_to_text", seed, prompt=prompt, output=text, hashes=self.hashes())
        self.log.append(rec)
        return text, rec

    # -- text -> image ------------------------------------------------------
    def text_condition(self, descriptions: list[str], lam: float | None = None, hidden=None) -> np.ndarray:
        lam = self.lam if lam is None else lam
        clip = self.encoder.encode_batch(descriptions)
        if lam == 0.0:
            return clip
        self._require("the adapter", self.adapter is not None and self.llm is not None)
        with T.no_grad():
            if hidden is None:
                hidden = caption_hidden(self.llm, descriptions, self.vocab)
            return condition(clip, hidden, self.adapter, lam).data

    def text_to_image(self, description: str, seed: int = 0, lam: float | None = None,
                      guide: GuidanceConfig | None = None, hidden=None) -> tuple[np.ndarray, CallRecord]:
        lam = self.lam if lam is None else lam
        cond = self.text_condition([description], lam, hidden)
        img = sample_images(self.denoiser, cond, self.sched, guide or self.guide, seed)[0]
        rec = CallRecord("text_to_image", seed, conditioning=description, lam=lam, hashes=self.hashes())
        self.log.append(rec)
        return img, rec

    def images_for(self, descriptions: list[str], seed: int = 0, lam: float | None = None) -> np.ndarray:
        """Batched text-to-image for evaluation."""
        return sample_images(self.denoiser, self.text_condition(descriptions, lam), self.sched, self.guide, seed)

    # -- dialogue -----------------------------------------------------------
    def dialogue_respond(self, d: DialogueSample, seed: int = 0,
                         ) -> tuple[str, np.ndarray | None, CallRecord]:
        from .dialogue import prompt_ids
        self._require("dialogue", self.stage == "dialogue" and self.llm is not None)
        ids = prompt_ids(d, self.vocab)
        out = generate_greedy(ids, self.llm, MAX_NEW_TOKENS, self.vocab.eos)
        text = self.vocab.detokenize(out)
        prompt = render_template("dialogue", {"history": d.history, "photo": "", "history_after": ""})
        rec = CallRecord("dialogue_respond", seed, prompt=prompt, output=text, lam=self.lam, hashes=self.hashes())
        self.log.append(rec)
        try:
            visible, caps = parse_img_spans(text)
        except SpanParseError as e:
            rec.warning = f"unbalanced image markers at {e.position}; returned as text only"
            warnings.warn(rec.warning)
            return text, None, rec
        if not caps:
            return visible, None, rec
        rec.conditioning = caps[0]
        # hidden states over the generated caption span, as during dialogue tuning
        hidden = None
        if self.lam != 0.0:
            from .dialogue import span_positions
            full = ids + out
            with T.no_grad():
                h, _ = self.llm.forward(np.asarray([full]))
            tgt = out + [self.vocab.eos]
            pos = [len(ids) + j for j in span_positions(tgt, self.vocab)]
            hidden = h.data[:, pos]
        img, _ = self.text_to_image(caps[0], seed, hidden=hidden)
        self.log.pop()   # the nested text_to_image record is folded into this one
        return visible, img, rec
