import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmdiff import tensor as T
from mmdiff.align import (IMAGE_SLOTS, build_examples, caption_embedding, init_projection, instruction_ids,
                          loss_itdm, mid_align_forward, mid_align_loss, pre_align_forward, pre_align_loss, project,
                          train_alignment)
from mmdiff.data import gen_dataset, vqa_items
from mmdiff.diffusion import ConfigError
from mmdiff.llm import LLMConfig, ToyLLM, loss_itg
from mmdiff.text import Vocab

VOCAB = Vocab.build()
SAMPLES = gen_dataset()[:8]
CAPS = [s.caption for s in SAMPLES]
W = 16


def llm(mode="decoder-only", seed=0):
    return ToyLLM(LLMConfig(len(VOCAB), mode=mode, width=W, depth=2, heads=2), seed=seed)


def latents(n=8, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 4, 32))


def test_itdm_examples():
    a = np.random.default_rng(0).normal(size=(3, 5))
    assert loss_itdm(a, a).item() == 0.0
    assert loss_itdm(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item() == 2.0
    b = np.random.default_rng(1).normal(size=(3, 5))
    assert np.isclose(loss_itdm(2 * a, 2 * b).item(), 4 * loss_itdm(a, b).item(), rtol=1e-14)
    with pytest.raises(T.ShapeError):
        loss_itdm(a, b[:2])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)), arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_itdm_symmetric_and_zero_iff_equal(a, b):
    assert loss_itdm(a, b).item() == loss_itdm(b, a).item()
    assert (loss_itdm(a, b).item() == 0.0) == bool(np.array_equal(a, b))


def test_instruction_ids_have_k_image_slots():
    ids = instruction_ids(VOCAB, "caption", {"query": "Describe the image concisely."})
    assert ids[0] == VOCAB.bos and ids.count(VOCAB.image) == IMAGE_SLOTS
    assert VOCAB.detokenize(ids).startswith("USER: <image><image><image><image>Describe")


def test_pre_align_equals_loss_itg_on_projected_embeds():
    m = llm()
    proj = init_projection(32, W, seed=1)
    lat = latents(1)
    prompt = instruction_ids(VOCAB, "caption", {"query": "Describe the image concisely."})
    target = VOCAB.tokenize(CAPS[0]) + [VOCAB.eos]
    got = pre_align_loss(lat, [prompt], [target], proj, m, VOCAB).item()
    ref = loss_itg(project(lat, proj), prompt, target, m, VOCAB.image, VOCAB.pad).item()
    assert got == ref
    with pytest.raises(ConfigError):
        pre_align_loss(lat, [prompt], [target], proj, llm("encoder-decoder"), VOCAB)
    with pytest.raises(T.ShapeError):
        pre_align_loss(lat, [prompt], [target], init_projection(32, 8), m, VOCAB)


def test_pre_align_forward_from_pixels_leaves_denoiser_untouched():
    m = llm()
    proj = init_projection(32, W, seed=1)
    seen = []

    def image_to_latent(img):
        seen.append(img.shape)
        return latents(1)

    prompt = instruction_ids(VOCAB, "caption", {"query": "Describe the image concisely."})
    loss = pre_align_forward(SAMPLES[0].image, prompt, [VOCAB.eos], proj, m, VOCAB, image_to_latent)
    T.backward(loss)
    assert seen == [(1, 16, 16, 1)]
    assert proj["proj.w"].grad is not None


def test_mid_align_additivity_and_freeze():
    m = llm("encoder-decoder")
    m.params.freeze()
    proj = init_projection(32, W, seed=2)
    rows = [VOCAB.tokenize(c) for c in CAPS[:3]]
    targets = [r + [VOCAB.eos] for r in rows]
    l_mid, l_itg, l_itdm = mid_align_loss(latents(3), rows, targets, proj, m, VOCAB)
    assert l_mid.item() == l_itg.item() + l_itdm.item()
    T.backward(l_mid, inputs=list(m.params.values()) + list(proj.values()))
    assert all(t.grad is None for t in m.params.values())
    assert np.any(proj["proj.w"].grad != 0)
    with pytest.raises(ConfigError):
        mid_align_loss(latents(3), rows, targets, proj, llm(), VOCAB)


def test_mid_align_with_matched_vectors_reduces_to_itg():
    m = llm("encoder-decoder")
    rows = [VOCAB.tokenize(CAPS[0])]
    d_llm = caption_embedding(m, rows, VOCAB).data       # (1, W)
    proj = init_projection(W, W)
    proj["proj.w"].data[:] = np.eye(W)
    proj["proj.b"].data[:] = 0.0
    lat = np.tile(d_llm[:, None, :], (1, 4, 1))           # mean-pooled projection == d_llm
    l_mid, l_itg, l_itdm = mid_align_loss(lat, rows, [rows[0] + [VOCAB.eos]], proj, m, VOCAB)
    assert l_itdm.item() < 1e-24
    assert abs(l_mid.item() - l_itg.item()) < 1e-12


def test_mid_align_forward_from_pixels():
    m = llm("encoder-decoder")
    proj = init_projection(32, W)
    cap = VOCAB.tokenize(CAPS[0])
    out = mid_align_forward(SAMPLES[0].image, cap, cap + [VOCAB.eos], proj, m, VOCAB, lambda x: latents(1))
    assert len(out) == 3 and out[0].item() == out[1].item() + out[2].item()


def _examples(variant="decoder-only", vqa=False):
    rng = np.random.default_rng(3)
    q = [vqa_items(s) for s in SAMPLES] if vqa else None
    return build_examples(latents(8), CAPS, VOCAB, rng, vqa=q, variant=variant)


def test_build_examples():
    ex = _examples(vqa=True)
    assert len(ex) == 8 * 5
    assert all(e.prompt.count(VOCAB.image) == IMAGE_SLOTS for e in ex)
    vqa_prompts = [VOCAB.detokenize(e.prompt) for e in ex if "Short answer:" in VOCAB.detokenize(e.prompt)]
    assert len(vqa_prompts) == 32


def test_train_alignment_zero_steps_keeps_init():
    proj = init_projection(32, W, seed=4)
    before = proj.arrays()
    train_alignment(_examples(), proj, llm(), VOCAB, manner="pre", steps=0)
    assert all(np.array_equal(before[k], v.data) for k, v in proj.items())


def test_train_alignment_mid_changes_only_projection_and_raises_cosine():
    m = llm("encoder-decoder")
    llm_before = m.params.digest()
    proj = init_projection(32, W, seed=5)
    log = train_alignment(_examples("encoder-decoder"), proj, m, VOCAB, manner="mid", steps=60,
                          batch_size=8, lr=2e-2, log_every=20)
    assert m.params.digest() == llm_before
    assert log.after[0] > log.before[0]
    assert log.to_tsv().startswith("step\tL_ITG\tL_ITDM\tcosine\tmse\n")
    with pytest.raises(ConfigError):
        train_alignment(_examples("encoder-decoder"), proj, m, VOCAB, manner="mid", freeze_llm=False)


def test_pre_align_loss_decreases_over_300_steps():
    m = llm()
    proj = init_projection(32, W, seed=6)
    ex = _examples()[:4]
    log = train_alignment(ex, proj, m, VOCAB, manner="pre", steps=300, batch_size=4, lr=1e-2, log_every=299)
    assert log.rows[-1][1] < log.rows[0][1]
