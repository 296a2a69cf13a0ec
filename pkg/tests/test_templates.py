import pytest
from hypothesis import given, settings, strategies as st

from mmdiff.templates import (CAPTION_QUERIES, SpanParseError, TemplateError, caption_query, parse_img_spans,
                              render_template, template_fields, wrap_caption)

# frozen byte-exact renderings; any change to the template table must update these on purpose
GOLDEN = [
    ("caption", {"query": caption_query(1)}, "decoder-only",
     "USER: <image>Describe the image concisely. Assistant:"),
    ("caption", {"query": caption_query(1)}, "encoder-decoder",
     "Human: <image>Describe the image concisely. Assistant:"),
    ("vqa", {"question": "Q"}, "decoder-only",
     "USER: Image: <image> Question: Q Short answer: Assistant:"),
    ("vqa", {"question": "Q"}, "encoder-decoder",
     "Human: Image: <image> Question: Q Short answer: Assistant:"),
    ("vqa-option", {"question": "Q"}, "decoder-only",
     "USER: Image: <image> Question: Q Answer the option’s letter. Assistant:"),
    ("llava-1", {"question": "Q"}, "decoder-only",
     "USER: Please answer question from this image: <image> Question: Q Assistant:"),
    ("llava-2", {"question": "Q"}, "decoder-only", "USER: Image: <image> Question: Q Assistant:"),
    ("llava-3", {"question": "Q"}, "decoder-only",
     "USER: Answer question Q through the image <image> Assistant:"),
    ("general", {"instruction": "Describe it."}, "decoder-only",
     "USER: <Img><image></Img>Describe it. Assistant:"),
    ("dialogue", {"history": "hello there ", "photo": "<Img>a red square</Img>", "history_after": " ok"},
     "decoder-only", "USER: hello there <Img>a red square</Img> ok Assistant:"),
]

GOLDEN_QUERIES = (
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


@pytest.mark.parametrize("task,fields,variant,expected", GOLDEN)
def test_render_golden(task, fields, variant, expected):
    assert render_template(task, fields, variant) == expected


def test_caption_queries_frozen():
    assert CAPTION_QUERIES == GOLDEN_QUERIES
    assert [caption_query(i) for i in range(1, 11)] == list(GOLDEN_QUERIES)
    with pytest.raises(TemplateError):
        caption_query(11)


def test_no_trailing_space_and_human_substitution_only_in_role_tag():
    for task, fields, variant, _ in GOLDEN:
        s = render_template(task, fields, "encoder-decoder")
        assert s.endswith("Assistant:") and s.startswith("Human: ") and "USER" not in s


def test_render_errors():
    with pytest.raises(TemplateError):
        render_template("nope", {})
    with pytest.raises(TemplateError, match="question"):
        render_template("vqa", {})
    with pytest.raises(TemplateError):
        render_template("vqa", {"question": "q"}, variant="gpt")
    assert template_fields("vqa") == ["question"]


def test_parse_examples():
    assert parse_img_spans("sure! <Img>a red square</Img>") == ("sure! ", ["a red square"])
    assert parse_img_spans("just text") == ("just text", [])
    with pytest.raises(SpanParseError) as e:
        parse_img_spans("<Img>a<Img>b</Img>")
    assert e.value.position == 6
    with pytest.raises(SpanParseError):
        parse_img_spans("a</Img>")
    with pytest.raises(SpanParseError):
        parse_img_spans("<Img>open")


_caption = st.text(st.characters(blacklist_characters="<>", blacklist_categories=("Cs",)), max_size=30)


@settings(max_examples=200, deadline=None)
@given(_caption, _caption, _caption)
def test_dialogue_render_parse_bijective(history, caption, after):
    s = render_template("dialogue", {"history": history, "photo": wrap_caption(caption), "history_after": after})
    visible, caps = parse_img_spans(s)
    assert caps == [caption]
    assert visible == render_template("dialogue", {"history": history, "photo": "", "history_after": after})
