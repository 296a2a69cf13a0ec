"""Toy-FID, alignment cosine/MSE and BLEU."""
from __future__ import annotations

import math
from collections import Counter

import numpy as np

FID_DIM = 16
FID_REG = 1e-6


class MetricError(ValueError):
    pass


def fid_projection(n_in: int, dim: int = FID_DIM, seed: int = 0) -> np.ndarray:
    """The fixed random feature map, (n_in, dim); depends only on the seed."""
    return np.random.default_rng(seed).normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, dim))


def features(images, dim: int = FID_DIM, seed: int = 0) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    x = x.reshape(len(x), -1)
    return x @ fid_projection(x.shape[1], dim, seed)


def _trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    # tr((S1 S2)^1/2) == tr((S1^1/2 S2 S1^1/2)^1/2); the latter is symmetric PSD.
    w, v = np.linalg.eigh(s1)
    if w.min() < -1e-8:
        raise MetricError(f"covariance has negative eigenvalue {w.min():.3g}")
    r = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    m = r @ s2 @ r
    ev = np.linalg.eigvalsh((m + m.T) / 2)
    if ev.min() < -1e-8:
        raise MetricError(f"symmetrized product has negative eigenvalue {ev.min():.3g}")
    return float(np.sum(np.sqrt(np.clip(ev, 0.0, None))))


def frechet_distance(mu1, s1, mu2, s2) -> float:
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    s1, s2 = np.asarray(s1, float), np.asarray(s2, float)
    d = mu1 - mu2
    val = float(d @ d + np.trace(s1) + np.trace(s2) - 2.0 * _trace_sqrt_product(s1, s2))
    return max(val, 0.0)


def gaussian_stats(feats) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise MetricError("need at least 2 feature rows")
    cov = np.cov(f, rowvar=False) + FID_REG * np.eye(f.shape[1])
    return f.mean(axis=0), cov


def fid_from_features(f1, f2) -> float:
    return frechet_distance(*gaussian_stats(f1), *gaussian_stats(f2))


def toy_fid(real_images, gen_images, seed: int = 0) -> float:
    """Fréchet distance between Gaussians fit to 16-dim random-projection features."""
    if len(real_images) < 2 or len(gen_images) < 2:
        raise MetricError("toy_fid needs >= 2 images per set")
    return fid_from_features(features(real_images, seed=seed), features(gen_images, seed=seed))


def alignment_metrics(d_diff, d_llm) -> tuple[float, float, list[int]]:
    """(avg cosine, avg per-pair MSE, indices of pairs with a zero vector)."""
    a, b = np.atleast_2d(np.asarray(d_diff, float)), np.atleast_2d(np.asarray(d_llm, float))
    if a.shape != b.shape:
        raise MetricError(f"shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    zero = (na == 0) | (nb == 0)
    cos = np.where(zero, 0.0, np.sum(a * b, axis=1) / np.where(zero, 1.0, na * nb))
    mse = np.mean((a - b) ** 2, axis=1)
    return float(cos.mean()), float(mse.mean()), [int(i) for i in np.flatnonzero(zero)]


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 2) -> float:
    """Corpus BLEU with clipped n-gram precision and brevity penalty.

    ``references[i]`` is a string (or token list) or a list of alternatives.
    """
    if not candidates or not references:
        raise MetricError("empty candidate or reference set")
    if len(candidates) != len(references):
        raise MetricError("one reference entry per candidate required")
    tok = lambda s: s.split() if isinstance(s, str) else list(s)
    match = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if isinstance(refs, str) or (refs and not isinstance(refs[0], (str, list, tuple))):
            refs = [refs]
        if not refs:
            raise MetricError("empty reference set")
        c = tok(cand)
        rs = [tok(r) for r in refs]
        c_len += len(c)
        r_len += min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
        for n in range(1, max_n + 1):
            cc = _ngrams(c, n)
            best = Counter()
            for r in rs:
                best |= _ngrams(r, n)
            match[n - 1] += sum(min(k, best[g]) for g, k in cc.items())
            total[n - 1] += max(len(c) - n + 1, 0)
    if min(match) == 0:
        return 0.0
    logp = sum(math.log(m / t) for m, t in zip(match, total)) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / max(c_len, 1))
    return bp * math.exp(logp)
