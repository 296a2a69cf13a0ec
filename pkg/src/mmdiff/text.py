"""Word-level vocabulary, the frozen text encoder, and latent-to-caption decoding."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import data
from .nn import sinusoidal
from .templates import CAPTION_QUERIES, IMAGE, IMG_CLOSE, IMG_OPEN, TASK_TEMPLATES

PAD, BOS, EOS = "<pad>", "<s>", "</s>"
SPECIALS = (PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE, IMAGE)

LATENT_LEN = 4
LATENT_DIM = 32

_SPLIT = re.compile("(" + "|".join(re.escape(s) for s in (IMG_OPEN, IMG_CLOSE, IMAGE)) + ")")
_NO_SPACE_AFTER = {IMG_OPEN, IMAGE}
_NO_SPACE_BEFORE = {IMG_CLOSE}


class VocabError(KeyError):
    pass


def _words(text: str) -> list[str]:
    out = []
    for part in _SPLIT.split(text):
        if part in (IMG_OPEN, IMG_CLOSE, IMAGE):
            out.append(part)
        else:
            out.extend(part.split())
    return out


def _corpus_words() -> list[str]:
    texts = list(CAPTION_QUERIES) + list(data.VQA_QUESTIONS.values())
    for tpl in TASK_TEMPLATES.values():
        texts.append(re.sub(r"\{\w+\}", " ", tpl))
    texts.append("Human:")
    texts += ["a at", " ".join(data.SHAPES + data.COLORS + data.SIZES + data.POSITIONS)]
    texts += ["can you show me ?", "hello there", "i like things", "sure! hi! how are you? me too!"]
    seen: dict[str, None] = {}
    for t in texts:
        for w in _words(t):
            if w not in SPECIALS:
                seen.setdefault(w, None)
    return list(seen)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls) -> Vocab:
        return cls(SPECIALS + tuple(_corpus_words()))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    @property
    def pad(self) -> int:
        return self._index[PAD]

    @property
    def bos(self) -> int:
        return self._index[BOS]

    @property
    def eos(self) -> int:
        return self._index[EOS]

    @property
    def image(self) -> int:
        return self._index[IMAGE]

    def tokenize(self, text: str) -> list[int]:
        words = _words(text)
        unknown = [w for w in words if w not in self._index]
        if unknown:
            raise VocabError(f"out-of-vocabulary words: {unknown}")
        return [self._index[w] for w in words]

    def detokenize(self, ids) -> str:
        """Inverse of :meth:`tokenize` for text in canonical spacing.

        Control tokens (pad, bos, eos) are dropped; no space is emitted after
        ``<Img>`` or ``<image>`` nor before ``</Img>``.
        """
        out: list[str] = []
        prev = None
        for i in ids:
            tok = self.tokens[int(i)]
            if tok in (PAD, BOS, EOS):
                continue
            if out and prev not in _NO_SPACE_AFTER and tok not in _NO_SPACE_BEFORE:
                out.append(" ")
            out.append(tok)
            prev = tok
        return "".join(out)


def _hash_seed(seed: int, word: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{word}".encode()).digest()[:8], "little")


def pool_windows(n: int, rows: int = LATENT_LEN) -> list[tuple[int, int]]:
    """Contiguous token windows pooled into each latent row; short inputs reuse tokens."""
    out = []
    for r in range(rows):
        lo = (r * n) // rows
        hi = max(((r + 1) * n) // rows, lo + 1)
        out.append((min(lo, n - 1), min(hi, n)))
    return out


class TextEncoder:
    """Frozen map from token ids to a (LATENT_LEN, LATENT_DIM) text latent.

    Each word gets a fixed Gaussian vector derived from a hash of the word and
    the seed, positions add a scaled sinusoid, and contiguous windows of
    tokens are mean-pooled into the latent rows. Nothing here is trainable.
    """

    POS_SCALE = 0.5

    def __init__(self, vocab: Vocab, seed: int = 0, dim: int = LATENT_DIM, rows: int = LATENT_LEN):
        self.vocab, self.seed, self.dim, self.rows = vocab, seed, dim, rows
        table = np.stack([np.random.default_rng(_hash_seed(seed, w)).standard_normal(dim) for w in vocab.tokens])
        table.setflags(write=False)
        self.table = table

    def encode_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("cannot encode an empty token sequence")
        if ids.min() < 0 or ids.max() >= len(self.vocab):
            raise VocabError("token id out of range")
        tok = self.table[ids] + self.POS_SCALE * sinusoidal(np.arange(len(ids)), self.dim)
        return np.stack([tok[lo:hi].mean(axis=0) for lo, hi in pool_windows(len(ids), self.rows)])

    def encode(self, text: str) -> np.ndarray:
        return self.encode_ids(self.vocab.tokenize(text))

    def encode_batch(self, texts) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts])

    def digest(self) -> str:
        return hashlib.sha256(self.table.tobytes()).hexdigest()[:16]


class CaptionCodebook:
    def __init__(self, captions, latents: np.ndarray):
        self.captions = list(captions)
        self.latents = np.asarray(latents, dtype=np.float64)
        if len(self.captions) != len(self.latents):
            raise ValueError("captions and latents differ in length")
        self._flat = self.latents.reshape(len(self.captions), -1)
        if len(self.captions) > 1 and self.min_pairwise_distance() <= 0:
            raise ValueError("codebook latents are not pairwise distinct")

    @classmethod
    def from_captions(cls, captions, encoder: TextEncoder) -> CaptionCodebook:
        captions = list(dict.fromkeys(captions))
        return cls(captions, encoder.encode_batch(captions))

    def __len__(self) -> int:
        return len(self.captions)

    def min_pairwise_distance(self) -> float:
        f = self._flat
        sq = (f * f).sum(1)
        d2 = sq[:, None] + sq[None, :] - 2 * f @ f.T
        np.fill_diagonal(d2, np.inf)
        return float(np.sqrt(max(d2.min(), 0.0)))

    def nearest(self, latents) -> np.ndarray:
        """Codebook index of the nearest entry for each latent (lowest index on ties)."""
        if not self.captions:
            raise ValueError("empty codebook")
        q = np.asarray(latents, dtype=np.float64).reshape(-1, self._flat.shape[1])
        d2 = ((q[:, None, :] - self._flat[None, :, :]) ** 2).sum(-1)
        return np.argmin(d2, axis=1)

    def decode(self, latent) -> str:
        return self.captions[int(self.nearest(latent)[0])]

    def decode_batch(self, latents) -> list[str]:
        return [self.captions[i] for i in self.nearest(latents)]


def decode_text_latent(latent, codebook: CaptionCodebook) -> str:
    return codebook.decode(latent)
