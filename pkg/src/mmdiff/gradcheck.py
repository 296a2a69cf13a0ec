"""Finite-difference checks of every training loss on micro-sized models.

Each check builds a deterministic loss closure plus the parameters to test,
runs one backward pass, and compares a seeded sample of gradient entries
against central differences at 64-bit precision.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig, condition, init_adapter, loss_ada
from .align import init_projection, loss_itdm, mid_align_loss, pre_align_loss, instruction_ids
from .data import gen_dataset, make_dialogues
from .denoiser import (DenoiserConfig, JointDenoiser, loss_bidiffuser, loss_unidiffuser, make_noisy_batch,
                       train_loss_bidiffuser)
from .dialogue import loss_all, loss_t2t
from .diffusion import loss_eps, make_schedule
from .llm import LLMConfig, ToyLLM
from .text import TextEncoder, Vocab

TOL = 1e-5
FD_EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    rel_error: float
    n_entries: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.rel_error < TOL


def check(name: str, loss_fn, params: list[T.Tensor], per_tensor: int = 3, seed: int = 0) -> CheckResult:
    """Compare analytic and central-difference gradients on sampled entries."""
    t0 = time.perf_counter()
    for p in params:
        p.grad = None
    T.backward(loss_fn(), inputs=params)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    a_vals, n_vals = [], []
    with T.no_grad():
        for p, g in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + FD_EPS
                fp = loss_fn().item()
                flat[i] = old - FD_EPS
                fm = loss_fn().item()
                flat[i] = old
                a_vals.append(g.reshape(-1)[i])
                n_vals.append((fp - fm) / (2 * FD_EPS))
    err = T.rel_error(np.asarray(a_vals), np.asarray(n_vals))
    return CheckResult(name, err, len(a_vals), time.perf_counter() - t0)


# -- micro fixtures ---------------------------------------------------------

MICRO_DEN = DenoiserConfig(image_size=4, patch=2, latent_len=2, latent_dim=4, width=8, depth=2, heads=2, T=10)


def _micro():
    vocab = Vocab.build()
    sched = make_schedule(MICRO_DEN.T, 1e-3, 0.2)
    rng = np.random.default_rng(0)
    den = JointDenoiser(MICRO_DEN, seed=1)
    x0 = rng.normal(size=(3, 4, 4, 1))
    y0 = rng.normal(size=(3, 2, 4))
    llm = ToyLLM(LLMConfig(len(vocab), width=8, depth=2, heads=2), seed=2)
    return vocab, sched, den, x0, y0, llm


def _checks():
    vocab, sched, den, x0, y0, llm = _micro()
    dp = list(den.params.values())
    lp = list(llm.params.values())
    out = []

    eps = np.random.default_rng(3).normal(size=x0.shape)
    tt = np.array([1, 5, 10])
    zy = np.zeros((3, 2, 4))
    out.append(("eps-prediction", lambda: loss_eps(lambda xt, t: den(xt, zy, t, np.full(3, 10))[0], x0, tt, eps, sched),
                dp))

    batch = make_noisy_batch(x0, y0, sched, np.random.default_rng(4))
    out.append(("L_uni", lambda: loss_unidiffuser(batch, den), dp))
    fbatch = make_noisy_batch(x0, y0, sched, np.random.default_rng(5), t_low=1)
    out.append(("L_d", lambda: loss_bidiffuser(fbatch, den, alpha=0.7), dp))
    x0den = JointDenoiser(replace(MICRO_DEN, text_target="x0"), seed=1, sched=sched)
    out.append(("L_d train (x0 head)", lambda: train_loss_bidiffuser(fbatch, x0den, alpha=0.7),
                list(x0den.params.values())))

    proj = init_projection(MICRO_DEN.latent_dim, 8, seed=6)
    pp = list(proj.params.values())
    caption = gen_dataset()[0].caption
    prompt = instruction_ids(vocab, "caption", {"query": "Describe the image concisely."})
    target = vocab.tokenize(caption) + [vocab.eos]
    lat = np.random.default_rng(15).normal(size=(1, 4, MICRO_DEN.latent_dim))
    out.append(("L_ITG", lambda: pre_align_loss(lat, [prompt], [target], proj, llm, vocab), pp + lp))

    a = T.Tensor(np.random.default_rng(7).normal(size=(3, 8)), requires_grad=True)
    b = np.random.default_rng(8).normal(size=(3, 8))
    out.append(("L_ITDM", lambda: loss_itdm(a, b), [a]))

    ed = ToyLLM(LLMConfig(len(vocab), mode="encoder-decoder", width=8, depth=2, heads=2), seed=9)
    ed.params.freeze()
    cap_ids = vocab.tokenize(caption)
    out.append(("L_mid", lambda: mid_align_loss(y0[:2], [cap_ids] * 2, [target] * 2, proj, ed, vocab)[0], pp))

    ad = init_adapter(AdapterConfig(llm_width=8, adapter_width=8, clip_width=4, attn_width=4), seed=10)
    ap = list(ad.params.values())
    hidden = np.random.default_rng(11).normal(size=(3, 5, 8))
    frozen = JointDenoiser(MICRO_DEN, seed=1)
    frozen.params.freeze()
    out.append(("L_ada", lambda: loss_ada(x0, condition(y0, hidden, ad, 0.3), frozen, sched,
                                          np.random.default_rng(12)), ap))

    samples = gen_dataset()[:2]
    dl = [d for d in make_dialogues(samples, seed=0) if "<Img>" in d.target][:2]
    imgs = np.random.default_rng(13).normal(size=(len(dl), 4, 4, 1))
    enc = TextEncoder(vocab, dim=MICRO_DEN.latent_dim, rows=MICRO_DEN.latent_len)
    args = (dl, imgs, llm, ad, enc, frozen, sched, vocab, 0.3)
    out.append(("L_t2t", lambda: loss_t2t(dl, llm, vocab), lp))
    out.append(("L_t2i", lambda: loss_all(*args, np.random.default_rng(14)).l_t2i, ap + lp))
    out.append(("L_all", lambda: loss_all(*args, np.random.default_rng(14)).l_all, ap + lp))
    return out


def run_suite(verbose: bool = False) -> list[CheckResult]:
    with T.default_dtype("float64"):
        results = []
        for name, fn, params in _checks():
            r = check(name, fn, params)
            if verbose:
                print(f"{'PASS' if r.ok else 'FAIL'} {name:20s} rel_err={r.rel_error:.2e} "
                      f"entries={r.n_entries} {r.seconds:.2f}s")
            results.append(r)
    return results
