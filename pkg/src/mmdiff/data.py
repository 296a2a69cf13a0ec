"""Synthetic shapes world: paired images and captions, VQA and dialogue data."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .templates import wrap_caption

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "white")
SIZES = ("small", "big")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right", "center")

# grayscale level per color; the background sits at -1
COLOR_LEVEL = {"red": -0.2, "green": 0.25, "blue": 0.6, "white": 1.0}
SIZE_RADIUS = {"small": 2.5, "big": 4.5}
POSITION_CENTER = {
    "top-left": (4.0, 4.0),
    "top-right": (4.0, 11.0),
    "bottom-left": (11.0, 4.0),
    "bottom-right": (11.0, 11.0),
    "center": (7.5, 7.5),
}

VQA_QUESTIONS = {
    "color": "what color is it?",
    "shape": "what shape is it?",
    "size": "what size is it?",
    "position": "where is it?",
}


@dataclass(frozen=True)
class WorldSpec:
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = COLORS
    sizes: tuple[str, ...] = SIZES
    positions: tuple[str, ...] = POSITIONS
    image_size: int = 16
    seed: int = 0

    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


@dataclass
class PairedSample:
    image: np.ndarray            # (H, W, 1)
    caption: str
    attrs: dict = field(default_factory=dict)
    latent: np.ndarray | None = None   # (L_lat, d_lat), filled by the text codec


def caption_for(size: str, color: str, shape: str, position: str) -> str:
    return f"a {size} {color} {shape} at {position}"


def render(shape: str, color: str, size: str, position: str, n: int = 16) -> np.ndarray:
    r = SIZE_RADIUS[size]
    cy, cx = POSITION_CENTER[position]
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        mask = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape == "circle":
        mask = dx * dx + dy * dy <= r * r
    elif shape == "triangle":
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    img = np.full((n, n), -1.0)
    img[mask] = COLOR_LEVEL[color]
    return img[..., None]


def gen_dataset(spec: WorldSpec = WorldSpec()) -> list[PairedSample]:
    """Every (shape, color, size, position) combination, shuffled by seed."""
    samples = []
    for shape, color, size, pos in itertools.product(spec.shapes, spec.colors, spec.sizes, spec.positions):
        samples.append(PairedSample(
            image=render(shape, color, size, pos, spec.image_size),
            caption=caption_for(size, color, shape, pos),
            attrs={"shape": shape, "color": color, "size": size, "position": pos},
        ))
    order = np.random.default_rng(spec.seed).permutation(len(samples))
    return [samples[i] for i in order]


def dataset_hash(samples: list[PairedSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.caption.encode())
        h.update(np.ascontiguousarray(s.image, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def images_array(samples: list[PairedSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def save_jsonl(samples: list[PairedSample], path) -> None:
    with open(path, "w") as f:
        for s in samples:
            h, w = s.image.shape[:2]
            rec = {"image": s.image.reshape(-1).tolist(), "h": h, "w": w, "caption": s.caption}
            f.write(json.dumps(rec) + "\n")


def load_jsonl(path) -> list[PairedSample]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        img = np.asarray(rec["image"], dtype=np.float64).reshape(rec["h"], rec["w"], 1)
        out.append(PairedSample(image=img, caption=rec["caption"]))
    return out


# question answering and dialogue


def vqa_items(sample: PairedSample) -> list[tuple[str, str]]:
    """(question, answer) pairs for one sample."""
    attrs = sample.attrs or attrs_from_caption(sample.caption)
    return [(VQA_QUESTIONS[k], attrs[k]) for k in ("color", "shape", "size", "position")]


def attrs_from_caption(caption: str) -> dict:
    words = caption.split()
    _, size, color, shape, _, pos = words
    return {"shape": shape, "color": color, "size": size, "position": pos}


@dataclass
class DialogueSample:
    turns: list[tuple[str, str]]
    target: str

    @property
    def history(self) -> str:
        return " ".join(text for _, text in self.turns)


def make_dialogues(samples: list[PairedSample], seed: int = 0) -> list[DialogueSample]:
    """One photo-sharing dialogue per sample plus a few chit-chat ones."""
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        if rng.random() < 0.5:
            turns = [("USER", f"can you show me {s.caption} ?")]
        else:
            turns = [("USER", "hello there"), ("USER", f"i like {s.caption} ?")]
        out.append(DialogueSample(turns, f"sure! {wrap_caption(s.caption)}"))
    for color in COLORS:
        out.append(DialogueSample([("USER", "hello there")], "hi! how are you?"))
        out.append(DialogueSample([("USER", f"i like {color} things")], "me too!"))
    return out
