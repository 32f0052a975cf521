"""Finite-difference gradient checks for every training objective.

Each check draws a random interior point, runs :func:`rnada.tensor.gradcheck`
and returns the max relative error. ``grl`` instead returns the largest
absolute gap between the reversed gradient and ``-beta`` times the gradient
obtained with an identity in place of the reversal layer (0 when exact).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .losses import (
    adversarial_domain_loss, attentive_entropy_loss, cent_loss, classification_loss,
    mean_feature_norm, mec_loss, rna_loss,
)
from .nn import ModelSpec, bind, discriminate, init_params, mlp
from .tensor import Graph, Tensor, gradcheck

TOLERANCE = 1e-4
EPS = 1e-5


def _split(x: Tensor, sizes) -> list[Tensor]:
    out, start = [], 0
    flat = T.reshape(x, (-1,))
    for shape in sizes:
        n = int(np.prod(shape))
        idx = np.arange(start, start + n)
        out.append(T.reshape(T.take_rows(flat, idx), shape))
        start += n
    return out


def check_rna(seed: int) -> float:
    rng = np.random.default_rng(seed)
    shapes = [(6, 4)] * 3
    x = np.concatenate([rng.normal(scale=s, size=sh).ravel()
                        for s, sh in zip((3.0, 2.0, 1.0), shapes)])

    def f(t):
        blocks = _split(t, shapes)
        return rna_loss({m: mean_feature_norm(b) for m, b in zip(("rgb", "flow", "audio"), blocks)})
    return gradcheck(f, x, EPS)


def check_ce(seed: int) -> float:
    rng = np.random.default_rng(seed)
    verbs, nouns = rng.integers(0, 4, 5), rng.integers(0, 3, 5)
    x = rng.standard_normal(5 * 4 + 5 * 3)

    def f(t):
        v, n = _split(t, [(5, 4), (5, 3)])
        return classification_loss(v, n, verbs, nouns)
    return gradcheck(f, x, EPS)


def _disc_setup(seed: int, level: str):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(("rgb", "audio"), 3, 3, 2, 2, 3)
    params = init_params(spec, seed)
    feats = rng.standard_normal((5, spec.fused_dim))
    if level == "spatial":
        prefix, labels = "disc.spatial", rng.integers(0, spec.n_kitchens, 5)
    else:
        k = int(rng.integers(0, spec.n_kitchens))
        prefix, labels = f"disc.{level}.{k}", rng.integers(0, 2, 5)
    return spec, params, feats, prefix, labels


def check_adversarial(level: str) -> Callable[[int], float]:
    """Domain loss w.r.t. the discriminator weights and (identity path) the features."""
    def run(seed: int) -> float:
        spec, params, feats, prefix, labels = _disc_setup(seed, level)
        w1_shape = params.arrays[f"{prefix}.w1"].shape

        def f(t):
            weights = bind(params, requires_grad=False)
            w1, x = _split(t, [w1_shape, feats.shape])
            weights[f"{prefix}.w1"] = w1
            return adversarial_domain_loss(mlp(weights, prefix, x), labels)
        return gradcheck(f, np.concatenate([params.arrays[f"{prefix}.w1"].ravel(), feats.ravel()]),
                         EPS)
    return run


def check_attentive_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    shapes = [(5, 4), (5, 3), (5, 2)]
    x = rng.standard_normal(sum(int(np.prod(s)) for s in shapes))

    def f(t):
        v, n, d = _split(t, shapes)
        return attentive_entropy_loss([v, n], d)
    return gradcheck(f, x, EPS)


def check_mec(seed: int) -> float:
    rng = np.random.default_rng(seed)
    b, m, c = 3, 4, 5
    x = rng.standard_normal(b * m * c)

    def f(t):
        return mec_loss([T.log_softmax(lg) for lg in _split(t, [(m, c)] * b)])
    return gradcheck(f, x, EPS)


def check_cent(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(6 * 5)
    return gradcheck(lambda t: cent_loss(T.softmax(T.reshape(t, (6, 5)))), x, EPS)


def grl_gap(seed: int, beta: float = 0.75) -> float:
    """Max |reversed grad - (-beta) * identity grad| into the features, all branches."""
    worst = 0.0
    for level in ("frame", "video", "spatial"):
        spec, params, feats, prefix, labels = _disc_setup(seed, level)
        branch = "spatial" if level == "spatial" else (level, int(prefix.rsplit(".", 1)[1]))
        with Graph() as g:
            x = Tensor(feats, requires_grad=True)
            loss = adversarial_domain_loss(
                discriminate(bind(params, False), x, branch, beta, spec.n_kitchens), labels)
            T.backward(loss, g)
        with Graph() as g:
            y = Tensor(feats, requires_grad=True)
            loss = adversarial_domain_loss(mlp(bind(params, False), prefix, y), labels)
            T.backward(loss, g)
        worst = max(worst, float(np.abs(x.grad - (-beta) * y.grad).max()))
    return worst


CHECKS: dict[str, Callable[[int], float]] = {
    "rna": check_rna,
    "ce": check_ce,
    "adv_frame": check_adversarial("frame"),
    "adv_video": check_adversarial("video"),
    "adv_spatial": check_adversarial("spatial"),
    "attentive_entropy": check_attentive_entropy,
    "mec": check_mec,
    "cent": check_cent,
    "grl": grl_gap,
}


def run_checks(names=None, seed: int = 0, n_seeds: int = 10) -> dict[str, dict]:
    """Worst error of each named check over seeds ``seed .. seed+n_seeds-1``."""
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s) {unknown}; known: {sorted(CHECKS)}")
    results = {}
    for name in names:
        worst = max(CHECKS[name](seed + i) for i in range(n_seeds))
        limit = 0.0 if name == "grl" else TOLERANCE
        passed = worst == 0.0 if name == "grl" else worst < limit
        results[name] = {"max_error": worst, "tolerance": limit, "passed": bool(passed)}
    return results
