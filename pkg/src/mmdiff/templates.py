"""Instruction templates and ``<Img>...</Img>`` span handling.

The strings below are byte-exact transcriptions of the published instruction
tables. A ``+`` in the printed tables means direct concatenation, so the
caption query follows ``<image>`` without a space. Templates are written for
the decoder-only model; the encoder-decoder model swaps the ``USER`` role tag
for ``Human``.
"""
from __future__ import annotations

import re
import string

IMG_OPEN = "<Img>"
IMG_CLOSE = "</Img>"
IMAGE = "<image>"

# task templates, one row per printed template
TASK_TEMPLATES: dict[str, str] = {
    "caption": "USER: <image>{query} Assistant:",
    "llava-1": "USER: Please answer question from this image: <image> Question: {question} Assistant:",
    "llava-2": "USER: Image: <image> Question: {question} Assistant:",
    "llava-3": "USER: Answer question {question} through the image <image> Assistant:",
    "dialogue": "USER: {history}{photo}{history_after} Assistant:",
    "vqa": "USER: Image: <image> Question: {question} Short answer: Assistant:",
    "vqa-option": "USER: Image: <image> Question: {question} Answer the option’s letter. Assistant:",
    # general form used when introducing instruction tuning
    "general": "USER: <Img><image></Img>{instruction} Assistant:",
}

LLAVA_TASKS = ("llava-1", "llava-2", "llava-3")

# captioning queries; one is drawn at random per training example
CAPTION_QUERIES: tuple[str, ...] = (
    "Describe the image concisely.",
    "Provide a brief description of the given image.",
    "Can you describe this image briefly?",
    "Provide a summary of visual elements depicted in the image.",
    "Give me the essential characteristics of the photograph in a concise manner.",
    "Rephrase the image depicted in a concise manner.",
    "Describe the objects in this image no in detail.",
    "Please introduce the image for me briefly.",
    "Give me the image's short descriptions.",
    "Please provide a general depiction of the image presented.",
)

# bold instruction suffixes of the output-format examples
OUTPUT_FORMAT_EXAMPLES: dict[str, tuple[str, str]] = {
    "caption": ("Provide a brief description of the given image. Assistant:",
                "Buses parked with a snow mountain view behind them."),
    "vqa": ("What numbers are displayed on the front of the bus on the right? Short answer: Assistant:", "6044"),
    "dialogue": ("What might be the purpose of the buses in this location? Assistant:",
                 "It is plausible that they are in this location for multiple reasons. "
                 "Some possible reasons might be: 1)...2)..."),
}

ROLE_TAGS = {"decoder-only": "USER", "encoder-decoder": "Human"}


class TemplateError(KeyError):
    pass


class SpanParseError(ValueError):
    def __init__(self, msg: str, position: int):
        super().__init__(f"{msg} at position {position}")
        self.position = position


def caption_query(number: int) -> str:
    """Query by its 1-based table number."""
    if not 1 <= number <= len(CAPTION_QUERIES):
        raise TemplateError(f"caption query number must be in 1..{len(CAPTION_QUERIES)}, got {number}")
    return CAPTION_QUERIES[number - 1]


def template_fields(task: str) -> list[str]:
    if task not in TASK_TEMPLATES:
        raise TemplateError(f"unknown task {task!r}; known: {sorted(TASK_TEMPLATES)}")
    return [f for _, f, _, _ in string.Formatter().parse(TASK_TEMPLATES[task]) if f]


def render_template(task: str, fields: dict[str, str], variant: str = "decoder-only") -> str:
    if variant not in ROLE_TAGS:
        raise TemplateError(f"unknown model variant {variant!r}")
    needed = template_fields(task)
    missing = [f for f in needed if f not in fields]
    if missing:
        raise TemplateError(f"template {task!r} is missing fields {missing}")
    tpl = TASK_TEMPLATES[task]
    if variant == "encoder-decoder":
        tpl = tpl.replace("USER:", "Human:", 1)
    return tpl.format(**{f: fields[f] for f in needed})


def wrap_caption(caption: str) -> str:
    return f"{IMG_OPEN}{caption}{IMG_CLOSE}"


_MARK = re.compile(re.escape(IMG_OPEN) + "|" + re.escape(IMG_CLOSE))


def parse_img_spans(text: str) -> tuple[str, list[str]]:
    """Split ``text`` into the visible response and its caption spans.

    Nested or unbalanced markers raise :class:`SpanParseError` carrying the
    offending character offset.
    """
    visible: list[str] = []
    captions: list[str] = []
    pos = 0
    open_at = None
    for m in _MARK.finditer(text):
        if m.group() == IMG_OPEN:
            if open_at is not None:
                raise SpanParseError("nested <Img>", m.start())
            visible.append(text[pos:m.start()])
            open_at = m.end()
        else:
            if open_at is None:
                raise SpanParseError("</Img> without matching <Img>", m.start())
            captions.append(text[open_at:m.start()])
            open_at = None
        pos = m.end()
    if open_at is not None:
        raise SpanParseError("unclosed <Img>", open_at - len(IMG_OPEN))
    visible.append(text[pos:])
    return "".join(visible), captions
