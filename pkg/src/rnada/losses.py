"""Training objectives: relative norm alignment, classification and domain
cross-entropy, attentive entropy, min-entropy consensus, complement entropy,
and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .nn import modality_order
from .tensor import Tensor

LOSS_NAMES = ("rna", "adv_frame", "adv_video", "adv_spatial", "attentive_entropy", "mec", "cent")
CENT_DEGENERATE = 1e-8
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_rna: float = 1.0
    lambda_cent: float = 0.31
    lambda_mec: float = 0.22
    gamma: float = 0.003
    beta: tuple[float, float, float] = (0.75, 0.75, 0.75)

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta)
        if len(beta) != 3:
            raise ValueError(f"beta must hold three values (frame, video, spatial), got {beta}")
        object.__setattr__(self, "beta", beta)
        for name in ("lambda_rna", "lambda_cent", "lambda_mec", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if min(beta) < 0:
            raise ValueError("beta values must be non-negative")

    def to_dict(self) -> dict:
        return {"lambda_rna": self.lambda_rna, "lambda_cent": self.lambda_cent,
                "lambda_mec": self.lambda_mec, "gamma": self.gamma, "beta": list(self.beta)}


@dataclass
class LossReport:
    components: dict[str, float]
    coefficients: dict[str, float]
    total: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def recombine(self) -> float:
        return float(sum(self.coefficients[k] * v for k, v in self.components.items()))


def mean_feature_norm(feats: Tensor) -> Tensor:
    """Average L2 norm of the rows of ``feats``."""
    return T.mean(T.l2_norm_rows(feats))


def rna_loss(mean_norms: Mapping[str, Tensor | float]) -> Tensor:
    """Relative norm alignment over every canonically ordered modality pair.

    For two modalities this is ``(E_p / E_q - 1)**2``; with more, the squared
    deviations of all ordered pairs (earlier modality on top) are averaged.
    """
    if len(mean_norms) < 2:
        raise ValueError(f"rna_loss needs at least two modalities, got {list(mean_norms)}")
    names = modality_order(mean_norms)
    norms = {m: T.as_tensor(mean_norms[m]) for m in names}
    for m, v in norms.items():
        if not np.all(v.data > 0):
            raise ValueError(f"mean norm of modality {m!r} must be positive, got {v.data}")
    terms = []
    for i, p in enumerate(names):
        for q in names[i + 1:]:
            d = norms[p] / norms[q] - 1.0
            terms.append(d * d)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.reshape(total, ()) / float(len(terms))


def _check_labels(labels, n_rows: int, n_classes: int, what: str) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ValueError(f"{what}: expected {n_rows} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError(f"{what}: labels must be integers")
        labels = labels.astype(np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"{what}: label out of range [0, {n_classes})")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows."""
    logits = T.as_tensor(logits)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1], "cross_entropy")
    if logits.shape[0] == 0:
        raise ValueError("cross_entropy: empty batch")
    return -T.mean(T.pick(T.log_softmax(logits), labels))


def classification_loss(verb_logits: Tensor, noun_logits: Tensor, verbs, nouns) -> Tensor:
    return (cross_entropy(verb_logits, verbs) + cross_entropy(noun_logits, nouns)) * 0.5


def adversarial_domain_loss(disc_logits: Tensor, domain_labels) -> Tensor:
    """Discriminator cross-entropy; the encoder sees it reversed via the GRL."""
    return cross_entropy(disc_logits, domain_labels)


def entropy(logits: Tensor) -> Tensor:
    """Row-wise Shannon entropy of ``softmax(logits)`` (natural log)."""
    return -T.sum_(T.softmax(logits) * T.log_softmax(logits), axis=1)


def attentive_entropy_loss(class_logits, domain_logits: Tensor) -> Tensor:
    """Prediction entropy weighted by ``1 + H(domain prediction)``.

    ``class_logits`` is one ``(N, C)`` tensor or a sequence of them (one per
    head); heads are averaged with equal weight.
    """
    heads = [class_logits] if isinstance(class_logits, Tensor) else list(class_logits)
    domain_logits = T.as_tensor(domain_logits)
    if domain_logits.shape[0] == 0:
        raise ValueError("attentive_entropy_loss: empty batch")
    weight = entropy(domain_logits) + 1.0
    out = None
    for logits in heads:
        logits = T.as_tensor(logits)
        if logits.shape[0] != domain_logits.shape[0]:
            raise T.ShapeError("attentive_entropy_loss: class and domain logits disagree on N")
        term = T.mean(weight * entropy(logits))
        out = term if out is None else out + term
    return out / float(len(heads))


def _stack_log_probs(log_probs) -> list[Tensor]:
    if isinstance(log_probs, np.ndarray):
        if log_probs.ndim != 3:
            raise T.ShapeError(f"mec: expected b x m x C log-probabilities, got {log_probs.shape}")
        return [Tensor(lp) for lp in log_probs]
    members = [T.as_tensor(lp) for lp in log_probs]
    if not members:
        raise ValueError("mec: need at least one backbone")
    shape = members[0].shape
    for lp in members:
        if lp.ndim != 2 or lp.shape != shape:
            raise T.ShapeError(f"mec: mismatched per-backbone shapes {[t.shape for t in members]}")
    return members


def mec_scores(log_probs) -> Tensor:
    """``sum_b log p_b(y | x_i)`` as an ``(m, C)`` tensor."""
    members = _stack_log_probs(log_probs)
    total = members[0]
    for lp in members[1:]:
        total = total + lp
    return total


def mec_labels(log_probs) -> np.ndarray:
    """Consensus label per sample (ties resolve to the lowest class index)."""
    return mec_scores(log_probs).data.argmax(axis=1)


def mec_loss(log_probs) -> Tensor:
    """Min-entropy consensus across ``b`` backbones.

    ``-(1/m) (1/b) sum_i max_y sum_b log p_b(y | x_i)``
    """
    members = _stack_log_probs(log_probs)
    if members[0].shape[0] == 0:
        raise ValueError("mec: empty batch")
    best = T.max_(mec_scores(members), axis=1)
    return -T.mean(best) / float(len(members))


def cent_loss(probs: Tensor) -> Tensor:
    """Complement entropy: entropy of the renormalized non-argmax classes.

    Rows whose top probability leaves less than 1e-8 for the complement
    contribute zero.
    """
    probs = T.as_tensor(probs)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise T.ShapeError(f"cent_loss: expected (N, C>=2) probabilities, got {probs.shape}")
    if probs.shape[0] == 0:
        raise ValueError("cent_loss: empty batch")
    p = probs.data
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("cent_loss: rows must lie on the probability simplex")
    top_idx = p.argmax(axis=1)
    complement = np.ones_like(p)
    complement[np.arange(p.shape[0]), top_idx] = 0.0
    top = T.max_(probs, axis=1)
    rest = 1.0 - top
    live = (rest.data >= CENT_DEGENERATE).astype(np.float64)
    # dead rows get a unit denominator and are masked out afterwards
    denom = rest * live + (1.0 - live)
    q = probs / T.reshape(denom, (-1, 1))
    h = -T.sum_(q * T.log(q) * (complement * live[:, None]), axis=1)
    return T.mean(h)


def loss_family(name: str) -> str:
    for fam in ("adv_frame", "adv_video"):
        if name == fam or name.startswith(fam + "_"):
            return fam
    return name


def coefficient(name: str, weights: LossWeights) -> float:
    fam = loss_family(name)
    table = {
        "cls": 1.0,
        "rna": weights.lambda_rna,
        "attentive_entropy": weights.gamma,
        "adv_frame": 1.0,
        "adv_video": 1.0,
        "adv_spatial": 1.0,
        "mec": weights.lambda_mec,
        "cent": -weights.lambda_cent,
    }
    if fam not in table:
        raise ValueError(f"unknown loss component {name!r}")
    return table[fam]


def total_loss(components: Mapping[str, Tensor | float], weights: LossWeights,
               enabled: Iterable[str]) -> LossReport:
    """Weighted sum of the enabled components.

    ``cls`` is always on; adversarial branches enter with coefficient 1
    (their beta lives in the gradient-reversal layer) and complement
    entropy with ``-lambda_cent`` so it is maximized.
    """
    enabled = set(enabled) | {"cls"}
    unknown = enabled - set(LOSS_NAMES) - {"cls"}
    if unknown:
        raise ValueError(f"unknown losses enabled: {sorted(unknown)}")
    present = {loss_family(k) for k in components}
    missing = enabled - present
    if missing:
        raise ValueError(f"enabled loss components missing: {sorted(missing)}")
    values: dict[str, float] = {}
    coefs: dict[str, float] = {}
    objective = None
    for name, comp in components.items():
        if loss_family(name) not in enabled:
            continue
        c = coefficient(name, weights)
        comp = T.as_tensor(comp)
        term = T.reshape(comp, ()) * c
        objective = term if objective is None else objective + term
        values[name] = comp.item()
        coefs[name] = c
    return LossReport(values, coefs, objective.item(), objective)


def heads_mean(fn, heads: Sequence) -> Tensor:
    """Average ``fn`` over verb/noun heads with equal weight."""
    out = None
    for h in heads:
        v = fn(h)
        out = v if out is None else out + v
    return out / float(len(heads))
