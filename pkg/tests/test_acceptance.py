"""End-to-end acceptance checks A1-A9 on the full-size toy system.

Slow (about 15 minutes on one core): the trained denoiser is built once per
session and shared. Each test records one PASS/FAIL line, printed in the
terminal summary.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from mmdiff import checkpoint as ck
from mmdiff import config as C
from mmdiff import stages as S
from mmdiff import tensor as T
from mmdiff.adapter import AdapterConfig, fuse, init_adapter
from mmdiff.align import init_projection, mid_align_loss
from mmdiff.cli import main
from mmdiff.data import gen_dataset, make_dialogues
from mmdiff.denoiser import (JointDenoiser, eval_bidiffuser_terms, loss_bidiffuser, make_noisy_batch)
from mmdiff.dialogue import caption_of, loss_all
from mmdiff.diffusion import cfg_combine, ddpm_step, make_schedule, q_sample
from mmdiff.gradcheck import MICRO_DEN, run_suite
from mmdiff.llm import LLMConfig, ToyLLM
from mmdiff.metrics import toy_fid
from mmdiff.pipeline import System
from mmdiff.templates import parse_img_spans, render_template, wrap_caption
from mmdiff.text import TextEncoder, Vocab

from conftest import record
from test_templates import GOLDEN, GOLDEN_QUERIES

SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def cfg():
    return C.defaults()


@pytest.fixture(scope="session")
def world():
    return S.World.build()


@pytest.fixture(scope="session")
def trained(cfg, world):
    """Joint pretraining then bidirectional finetuning at the default config."""
    t0 = time.perf_counter()
    den, _ = S.pretrain_joint(world, cfg)
    pre = den.params.arrays()
    with T.default_dtype(cfg["run.dtype"]):
        L0 = eval_bidiffuser_terms(den, world.x0, world.y0, S.schedule(cfg))
    S.finetune_bidiffuser(den, world, cfg)
    with T.default_dtype(cfg["run.dtype"]):
        L1 = eval_bidiffuser_terms(den, world.x0, world.y0, S.schedule(cfg))
    acc, _ = S.i2t_accuracy(den, world, cfg, seed=S.seed_for(cfg, "sample"))
    return {"den": den, "pre": pre, "L0": L0, "L1": L1, "acc": acc, "seconds": time.perf_counter() - t0}


# -- A1 ---------------------------------------------------------------------

def test_a1_gradient_suite():
    t0 = time.perf_counter()
    res = run_suite()
    secs = time.perf_counter() - t0
    worst = max(res, key=lambda r: r.rel_error)
    ok = all(r.rel_error < 1e-5 for r in res) and secs < 120
    record("A1", ok, f"{len(res)} losses, worst rel_err {worst.rel_error:.2e} ({worst.name}), {secs:.1f}s")
    assert ok


# -- A2 ---------------------------------------------------------------------

def test_a2_exact_identities():
    rng = np.random.default_rng(0)
    checks = {}
    eu, ec = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    checks["cfg s=0"] = np.array_equal(cfg_combine(eu, ec, 0.0), eu)
    checks["cfg s=1"] = np.array_equal(cfg_combine(eu, ec, 1.0), ec)
    a, b = rng.normal(size=(2, 4, 32)), rng.normal(size=(2, 4, 32))
    checks["fuse l=0"] = np.array_equal(fuse(a, b, 0.0), b)
    checks["fuse l=1"] = np.array_equal(fuse(a, b, 1.0), a)

    vocab = Vocab.build()
    caps = [s.caption for s in gen_dataset()[:3]]
    ed = ToyLLM(LLMConfig(len(vocab), mode="encoder-decoder", width=16, depth=2, heads=2), seed=1)
    ed.params.freeze()
    rows = [vocab.tokenize(c) for c in caps]
    l_mid, l_itg, l_itdm = mid_align_loss(rng.normal(size=(3, 4, 32)), rows, [r + [vocab.eos] for r in rows],
                                          init_projection(32, 16, seed=2), ed, vocab)
    checks["L_mid sum"] = l_mid.item() == l_itg.item() + l_itdm.item()

    samples = gen_dataset()[:4]
    dl = [d for d in make_dialogues(samples, seed=0) if caption_of(d) is not None][:3]
    image_of = {s.caption: s.image for s in samples}
    den = JointDenoiser(S.denoiser_config(C.defaults()), seed=0, sched=S.schedule(C.defaults()))
    den.params.freeze()
    llm = ToyLLM(LLMConfig(len(vocab)), seed=3)
    p = loss_all(dl, np.stack([image_of[caption_of(d)] for d in dl]), llm, init_adapter(AdapterConfig(), seed=4),
                 TextEncoder(vocab), den, S.schedule(C.defaults()), vocab, 0.3, np.random.default_rng(5))
    checks["L_all sum"] = p.l_all.item() == p.l_t2i.item() + p.l_t2t.item()

    with T.default_dtype("float64"):
        micro = JointDenoiser(MICRO_DEN, seed=6)
        sched = make_schedule(MICRO_DEN.T)
        batch = make_noisy_batch(rng.normal(size=(3, 4, 4, 1)), rng.normal(size=(3, 2, 4)), sched, rng, t_low=1)
        l0, l1 = loss_bidiffuser(batch, micro, 0.0).item(), loss_bidiffuser(batch, micro, 1.0).item()
        checks["L_d affine"] = all(abs(loss_bidiffuser(batch, micro, al).item() - (l0 + al * (l1 - l0))) < 1e-12
                                   for al in (0.25, 0.5, 2.0))

    sched = make_schedule(100)
    x0, eps = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    x1 = q_sample(x0, 1, eps, sched)
    err = np.max(np.abs(ddpm_step(x1, eps, 1, sched, np.zeros_like(x0)) - x0))
    checks["ddpm inverts"] = err < 1e-10

    failed = [k for k, v in checks.items() if not v]
    record("A2", not failed, f"{len(checks)} identities" + (f", failed: {failed}" if failed else ""))
    assert not failed


# -- A3 and A9 share two identical CLI runs ---------------------------------

CLI_SETS = ["denoiser.pretrain_steps=20", "denoiser.finetune_steps=20", "llm.steps=20", "align.steps=20",
            "adapter.steps=20", "dialogue.steps=20", "eval.n_generate=16", "diffusion.T=20"]


def _cli_chain(d: Path) -> None:
    s = [x for kv in CLI_SETS for x in ("--set", kv)]
    p = str(d)
    steps = [
        ["gen-data", "--out", f"{p}/data.jsonl"],
        ["pretrain-joint", *s, "--data", f"{p}/data.jsonl", "--out", f"{p}/u.ckpt"],
        ["finetune-bidiffuser", *s, "--init", f"{p}/u.ckpt", "--out", f"{p}/b.ckpt"],
        ["train-adapter", *s, "--init", f"{p}/b.ckpt", "--out", f"{p}/a.ckpt"],
        ["align", *s, "--init", f"{p}/b.ckpt", "--out", f"{p}/p.ckpt"],
        ["align", *s, "--init", f"{p}/b.ckpt", "--out", f"{p}/m.ckpt", "--manner", "mid"],
        ["train-dialogue", *s, "--init", f"{p}/a.ckpt", "--out", f"{p}/g.ckpt"],
        ["generate", *s, "--ckpt", f"{p}/p.ckpt", "--task", "caption", "--index", "0", "--index", "5",
         "--out", f"{p}/gen-caption"],
        ["generate", *s, "--ckpt", f"{p}/p.ckpt", "--task", "vqa", "--question", "what color is it?",
         "--out", f"{p}/gen-vqa"],
        ["generate", *s, "--ckpt", f"{p}/a.ckpt", "--task", "t2i", "--seed", "2", "--out", f"{p}/gen-t2i"],
        ["generate", *s, "--ckpt", f"{p}/g.ckpt", "--task", "dialogue", "--out", f"{p}/gen-dialogue"],
        *[["evaluate", *s, "--ckpt", f"{p}/{c}.ckpt", "--metric", m, "--out", f"{p}/eval-{c}"]
          for c, m in [("b", "ld"), ("b", "i2t"), ("a", "fid"), ("m", "alignment"), ("p", "bleu"),
                       ("p", "ppl")]],
        ["gradcheck", "--out", f"{p}/gc"],
    ]
    for argv in steps:
        assert main(argv) == 0, argv


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    dirs = [tmp_path_factory.mktemp(f"run{i}") for i in range(2)]
    for d in dirs:
        _cli_chain(d)
    return dirs


def test_a3_freeze_contracts(cli_runs):
    d = cli_runs[0]
    ckpts = {k: ck.load(d / f"{k}.ckpt") for k in "ubapmg"}
    # (earlier, later): every array flagged frozen in the later run is unchanged
    pairs = [("b", "a"), ("b", "p"), ("b", "m"), ("a", "g")]
    problems, n_frozen = [], 0
    for prev, cur in pairs:
        c0, c1 = ckpts[prev], ckpts[cur]
        if not any(k.startswith("denoiser/") for k in c1.frozen):
            problems.append(f"{cur}: denoiser not flagged frozen")
        for name in c1.frozen:
            if name in c0.arrays:
                n_frozen += 1
                if c0.arrays[name].tobytes() != c1.arrays[name].tobytes():
                    problems.append(f"{prev}->{cur}: {name} changed")
    # alignment with a frozen LLM leaves it exactly as pretrained
    cfg = C.resolve(None, CLI_SETS)
    world = S.World.build()
    for tag, mode in (("p", "decoder-only"), ("m", "encoder-decoder")):
        fresh = S.pretrain_language_model(world, cfg, mode).params.arrays()
        got = ckpts[tag].bundle("llm/").arrays()
        if any(fresh[k].tobytes() != got[k].tobytes() for k in fresh):
            problems.append(f"{tag}: frozen LLM changed during alignment")
        if not all(ckpts[tag].bundle("llm/").is_frozen(k) for k in fresh):
            problems.append(f"{tag}: LLM not flagged frozen")
    record("A3", not problems, f"{n_frozen} frozen arrays over {len(pairs)} checkpoint transitions"
           + (f"; {problems[:3]}" if problems else ""))
    assert not problems


def test_a9_cli_determinism(cli_runs):
    a, b = cli_runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    diff = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    ok = files == other and not diff and len(files) > 20
    record("A9", ok, f"{len(files)} artifacts and reports compared byte for byte"
           + (f"; differing: {diff[:5]}" if diff else ""))
    assert ok


# -- A4 ---------------------------------------------------------------------

def test_a4_image_to_text(cfg, trained):
    a = cfg["denoiser.alpha"]
    (x0, y0), (x1, y1) = trained["L0"], trained["L1"]
    ratio = (x1 + a * y1) / (x0 + a * y0)
    ok = (ratio <= 0.5 and trained["acc"] >= 0.9 and trained["seconds"] < 900
          and cfg["denoiser.finetune_steps"] <= 2000)
    record("A4", ok, f"L_d after/before {ratio:.3f} in {cfg['denoiser.finetune_steps']} steps, "
           f"exact-caption accuracy {trained['acc']:.3f}, {trained['seconds']:.0f}s")
    assert ok


# -- A5 ---------------------------------------------------------------------

def test_a5_alignment(cfg, world, trained):
    _, _, log, _ = S.align_stage(trained["den"], world, cfg, manner="mid")
    (cos0, mse0), (cos1, mse1) = log.before, log.after
    ok = cos1 >= 0.8 and mse0 / mse1 >= 10
    record("A5", ok, f"cosine {cos0:.3f} -> {cos1:.3f}, mse {mse0:.4f} -> {mse1:.5f} ({mse0 / mse1:.0f}x)")
    assert ok


# -- A6 ---------------------------------------------------------------------

def test_a6_adapter_ablation(cfg, world, trained):
    den = trained["den"]
    n = 256
    caps = [world.captions[i % len(world.captions)] for i in range(n)]
    real = np.stack([world.image_of()[c] for c in caps])
    llm = S.pretrain_language_model(world, cfg)
    with_ad, without = [], []
    for seed in SEEDS:
        _, ad, _ = S.adapter_stage(den, world, {**cfg, "run.seed": seed}, llm=llm)
        sysm = System(world.vocab, world.encoder, S.schedule(cfg), den, llm, None, ad,
                      lam=cfg["adapter.lambda"], guide=S.guidance(cfg))
        with T.default_dtype(cfg["run.dtype"]):
            with_ad.append(toy_fid(real, sysm.images_for(caps, seed=seed)))
            without.append(toy_fid(real, sysm.images_for(caps, seed=seed, lam=0.0)))
    m1, m0 = float(np.median(with_ad)), float(np.median(without))
    ok = m1 <= m0
    record("A6", ok, f"median toy-FID with adapter {m1:.4f} vs without {m0:.4f} "
           f"(per seed {[round(x, 3) for x in with_ad]} vs {[round(x, 3) for x in without]})")
    assert ok


# -- A7 ---------------------------------------------------------------------

A7_STEPS = 500


def test_a7_finetune_vs_joint(cfg, world, trained):
    res = {"bidiffuser": [], "unidiffuser": []}
    for seed in SEEDS:
        for obj in res:
            with T.default_dtype(cfg["run.dtype"]):
                den = JointDenoiser(S.denoiser_config(cfg), sched=S.schedule(cfg))
                den.params.load_arrays(trained["pre"])
            S.finetune_bidiffuser(den, world, cfg, objective=obj, steps=A7_STEPS, seed=100 + seed)
            with T.default_dtype(cfg["run.dtype"]):
                res[obj].append(eval_bidiffuser_terms(den, world.x0, world.y0, S.schedule(cfg)))
    bi, uni = np.median(res["bidiffuser"], axis=0), np.median(res["unidiffuser"], axis=0)
    ok = bool(bi[0] < uni[0] and bi[1] < uni[1])
    record("A7", ok, f"{A7_STEPS} steps, 3-seed median (t2i, i2t): finetune ({bi[0]:.4f}, {bi[1]:.4f}) "
           f"vs joint ({uni[0]:.4f}, {uni[1]:.4f})")
    assert ok


# -- A8 ---------------------------------------------------------------------

def _fuzz_text(rng, n):
    # printable ASCII plus a few multi-byte characters; never the span markers' brackets
    alphabet = [chr(c) for c in range(32, 127) if chr(c) not in "<>"] + list("éßλ中—’\t")
    return "".join(rng.choice(alphabet, size=n))


def test_a8_template_fidelity():
    from mmdiff.templates import CAPTION_QUERIES
    bad = [exp for task, fields, variant, exp in GOLDEN if render_template(task, fields, variant) != exp]
    if tuple(CAPTION_QUERIES) != GOLDEN_QUERIES:
        bad.append("caption query table")
    rng = np.random.default_rng(0)
    n_ok = 0
    for _ in range(1000):
        cap, hist, after = (_fuzz_text(rng, int(rng.integers(0, 40))) for _ in range(3))
        for variant in ("decoder-only", "encoder-decoder"):
            s = render_template("dialogue", {"history": hist, "photo": wrap_caption(cap), "history_after": after},
                                variant)
            visible, caps = parse_img_spans(s)
            plain = render_template("dialogue", {"history": hist, "photo": "", "history_after": after}, variant)
            n_ok += caps == [cap] and visible == plain
    ok = not bad and n_ok == 2000
    record("A8", ok, f"{len(GOLDEN)} golden renderings + 10 queries, {n_ok}/2000 fuzzed round trips"
           + (f"; mismatched: {bad[:2]}" if bad else ""))
    assert ok
