"""Top-k verb / noun / action accuracy, per-kitchen breakdowns and ensemble
disagreement."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

TABLE_COLUMNS = ("verb_top1", "noun_top1", "action_top1", "verb_top5", "noun_top5", "action_top5")


def _rank(probs: np.ndarray) -> np.ndarray:
    # stable sort on the negated scores: equal scores keep the lower index first
    return np.argsort(-probs, axis=1, kind="stable")


def _labels(labels, n: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return labels.astype(np.intp)


def topk(probs, labels, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` highest scores."""
    probs = np.asarray(probs, dtype=np.float64)
    n, c = probs.shape
    if not 1 <= k <= c:
        raise ValueError(f"k must lie in [1, {c}], got {k}")
    labels = _labels(labels, n, c)
    if n == 0:
        return 0.0
    hits = (_rank(probs)[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def action_topk(verb_probs, noun_probs, verb_labels, noun_labels, k: int) -> float:
    """Joint (verb, noun) accuracy.

    Top-1 needs both heads right. For larger ``k`` candidate pairs are
    ranked by ``p(verb) * p(noun)``.
    """
    vp = np.asarray(verb_probs, dtype=np.float64)
    np_ = np.asarray(noun_probs, dtype=np.float64)
    if vp.shape[0] != np_.shape[0]:
        raise ValueError(f"verb and noun predictions disagree on N: {vp.shape[0]} vs {np_.shape[0]}")
    n, cv = vp.shape
    cn = np_.shape[1]
    vl = _labels(verb_labels, n, cv)
    nl = _labels(noun_labels, n, cn)
    if not 1 <= k <= cv * cn:
        raise ValueError(f"k must lie in [1, {cv * cn}], got {k}")
    if n == 0:
        return 0.0
    if k == 1:
        return float(((vp.argmax(axis=1) == vl) & (np_.argmax(axis=1) == nl)).mean())
    joint = (vp[:, :, None] * np_[:, None, :]).reshape(n, cv * cn)
    truth = vl * cn + nl
    hits = (_rank(joint)[:, :k] == truth[:, None]).any(axis=1)
    return float(hits.mean())


def disagreement(preds) -> float:
    """Fraction of samples on which the ``b >= 2`` members' top-1 differ."""
    preds = np.asarray(preds)
    if preds.ndim != 2 or preds.shape[0] < 2:
        raise ValueError(f"disagreement needs b >= 2 prediction rows, got shape {preds.shape}")
    if preds.shape[1] == 0:
        return 0.0
    return float((preds != preds[0]).any(axis=0).mean())


@dataclass
class EvalReport:
    verb_top1: float
    verb_top5: float
    noun_top1: float
    noun_top5: float
    action_top1: float
    action_top5: float
    n_samples: int
    disagreement: float | None = None
    per_kitchen: dict[int, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "verb": {"top1": self.verb_top1, "top5": self.verb_top5},
            "noun": {"top1": self.noun_top1, "top5": self.noun_top5},
            "action": {"top1": self.action_top1, "top5": self.action_top5},
            "n_samples": self.n_samples,
        }
        if self.disagreement is not None:
            out["disagreement"] = self.disagreement
        if self.per_kitchen:
            out["per_kitchen"] = {str(k): r.to_dict() for k, r in sorted(self.per_kitchen.items())}
        return out

    def to_csv(self) -> str:
        """Header plus one row per report, in leaderboard column order."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("subset",) + TABLE_COLUMNS)
        rows = [("all", self)] + [(f"kitchen_{k}", r) for k, r in sorted(self.per_kitchen.items())]
        for name, r in rows:
            writer.writerow((name,) + tuple(f"{getattr(r, c):.6f}" for c in TABLE_COLUMNS))
        return buf.getvalue()


def evaluate_predictions(verb_probs, noun_probs, verbs, nouns, kitchens=None,
                         member_preds=None, k: int = 5) -> EvalReport:
    """Build an :class:`EvalReport`; ``k`` is clipped to the class counts.

    ``member_preds`` is an optional pair ``(verb_preds, noun_preds)`` of
    ``b x N`` top-1 arrays used for the disagreement score.
    """
    vp = np.asarray(verb_probs, dtype=np.float64)
    np_ = np.asarray(noun_probs, dtype=np.float64)
    verbs, nouns = np.asarray(verbs), np.asarray(nouns)
    kv, kn = min(k, vp.shape[1]), min(k, np_.shape[1])
    ka = min(k, vp.shape[1] * np_.shape[1])
    dis = None
    if member_preds is not None and np.asarray(member_preds[0]).shape[0] >= 2:
        dis = 0.5 * (disagreement(member_preds[0]) + disagreement(member_preds[1]))
    report = EvalReport(
        verb_top1=topk(vp, verbs, 1), verb_top5=topk(vp, verbs, kv),
        noun_top1=topk(np_, nouns, 1), noun_top5=topk(np_, nouns, kn),
        action_top1=action_topk(vp, np_, verbs, nouns, 1),
        action_top5=action_topk(vp, np_, verbs, nouns, ka),
        n_samples=int(vp.shape[0]), disagreement=dis)
    if kitchens is not None:
        kitchens = np.asarray(kitchens)
        for kk in np.unique(kitchens):
            m = kitchens == kk
            sub = None if member_preds is None else (np.asarray(member_preds[0])[:, m],
                                                      np.asarray(member_preds[1])[:, m])
            report.per_kitchen[int(kk)] = evaluate_predictions(
                vp[m], np_[m], verbs[m], nouns[m], None, sub, k)
    return report
