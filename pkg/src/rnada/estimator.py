"""scikit-learn style wrapper around :func:`rnada.training.train`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_clips, check_dual_labels, check_kitchens
from .data import Batch, Dataset, Sample
from .losses import LossWeights
from .nn import modality_order
from .training import PRESETS, OptimizerConfig, RunConfig, ensemble_predict, train


class DomainAdaptiveClassifier(ClassifierMixin, BaseEstimator):
    """Verb/noun clip classifier trained on labelled source and unlabelled
    target clips.

    ``X`` arrays have shape ``(n_clips, n_modalities, T, frame_dim)`` with
    modalities in the order given by ``modalities``; ``y`` is ``(n_clips, 2)``
    holding (verb, noun) labels. ``losses=None`` takes the loss set of
    ``preset``.
    """

    def __init__(self, preset="uda", losses=None, multi_target=None,
                 modalities=("rgb", "flow", "audio"), feat_dim=32, epochs=30, batch_size=32,
                 ensemble_size=1, lr=0.001, momentum=0.9, lambda_rna=1.0, lambda_cent=0.31,
                 lambda_mec=0.22, gamma=0.003, beta=(0.75, 0.75, 0.75), random_state=0):
        self.preset = preset
        self.losses = losses
        self.multi_target = multi_target
        self.modalities = modalities
        self.feat_dim = feat_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.ensemble_size = ensemble_size
        self.lr = lr
        self.momentum = momentum
        self.lambda_rna = lambda_rna
        self.lambda_cent = lambda_cent
        self.lambda_mec = lambda_mec
        self.gamma = gamma
        self.beta = beta
        self.random_state = random_state

    def _run_config(self) -> RunConfig:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        losses, multi = PRESETS[self.preset]
        return RunConfig(
            losses=tuple(losses if self.losses is None else self.losses),
            multi_target=multi if self.multi_target is None else bool(self.multi_target),
            weights=LossWeights(self.lambda_rna, self.lambda_cent, self.lambda_mec, self.gamma,
                                tuple(self.beta)),
            optimizer=OptimizerConfig(lr=self.lr, momentum=self.momentum),
            feat_dim=self.feat_dim, epochs=self.epochs, batch_size=self.batch_size,
            ensemble_size=self.ensemble_size, seed=int(self.random_state or 0))

    def _samples(self, X, kitchens, domain, verbs=None, nouns=None):
        out = []
        for i in range(X.shape[0]):
            frames = {m: X[i, j] for j, m in enumerate(self.modalities_)}
            out.append(Sample(f"{domain}-{i}", int(kitchens[i]), domain, frames,
                              None if verbs is None else int(verbs[i]),
                              None if nouns is None else int(nouns[i])))
        return out

    def fit(self, X, y, X_target, kitchens=None, target_kitchens=None):
        """Train on source clips ``X``/``y`` and unlabelled target clips ``X_target``."""
        mods = list(self.modalities)
        if modality_order(mods) != mods:
            raise ValueError(f"modalities must be listed in canonical order, got {mods}")
        X = check_clips(X, len(mods))
        y = check_dual_labels(y, X.shape[0])
        X_target = check_clips(X_target, len(mods), X.shape[2:])
        kitchens = check_kitchens(kitchens, X.shape[0])
        target_kitchens = check_kitchens(target_kitchens, X_target.shape[0])

        self.modalities_ = mods
        self.classes_verb_, verbs = np.unique(y[:, 0], return_inverse=True)
        self.classes_noun_, nouns = np.unique(y[:, 1], return_inverse=True)
        self.classes_ = [self.classes_verb_, self.classes_noun_]
        self.n_kitchens_ = int(max(kitchens.max(initial=0), target_kitchens.max(initial=0))) + 1
        meta = {
            "modalities": mods, "n_kitchens": self.n_kitchens_,
            "n_verbs": len(self.classes_verb_), "n_nouns": len(self.classes_noun_),
            "n_frames": X.shape[2], "frame_dim": X.shape[3],
        }
        dataset = Dataset(meta, {
            "source_train": self._samples(X, kitchens, "source", verbs, nouns),
            "target_train": self._samples(X_target, target_kitchens, "target"),
            "target_eval": [],
        })
        ckpt = train(self._run_config(), dataset)
        self.members_ = ckpt.members
        self.history_ = ckpt.history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        """Late-fused ``(verb_probs, noun_probs)``."""
        check_is_fitted(self, "members_")
        X = check_clips(X, len(self.modalities_))
        spec = self.members_[0].spec
        if X.shape[3] != spec.frame_dim:
            raise ValueError(f"X frames have dim {X.shape[3]}, model expects {spec.frame_dim}")
        n = X.shape[0]
        frames = {m: X[:, j] for j, m in enumerate(self.modalities_)}
        batch = Batch(frames, np.zeros(n, dtype=np.intp), np.ones(n, dtype=np.intp), None, None)
        return ensemble_predict(self.members_, batch)

    def predict(self, X):
        """``(n_clips, 2)`` array of predicted (verb, noun) labels."""
        verb, noun = self.predict_proba(X)
        return np.column_stack([self.classes_verb_[verb.argmax(axis=1)],
                                self.classes_noun_[noun.argmax(axis=1)]])

    def score(self, X, y, sample_weight=None):
        """Action top-1 accuracy: verb and noun both correct."""
        pred = self.predict(X)
        y = check_dual_labels(y, pred.shape[0])
        return float(np.average((pred == y).all(axis=1), weights=sample_weight))
