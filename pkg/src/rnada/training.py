"""Single-backbone and ensemble domain-adaptive training with SGD, late
fusion at prediction time, and JSON checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Dataset, GenSpec, Sample, generate, load, paired_batches
from .losses import (
    LOSS_NAMES, LossReport, LossWeights, adversarial_domain_loss, attentive_entropy_loss,
    cent_loss, classification_loss, heads_mean, mean_feature_norm, mec_loss, rna_loss,
    total_loss,
)
from .metrics import EvalReport, evaluate_predictions
from .nn import ModelParams, ModelSpec, bind, discriminate, forward_backbone, init_params
from .tensor import Graph, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rnada-checkpoint"
CHECKPOINT_VERSION = 1

_UDA = ("adv_frame", "adv_video", "attentive_entropy")
# loss set and multi-target routing for each ablation row
PRESETS: dict[str, tuple[tuple[str, ...], bool]] = {
    "source-only": ((), False),
    "uda": (_UDA, False),
    "mec": (_UDA + ("mec",), False),
    "mec-cent": (_UDA + ("mec", "cent"), False),
    "mstaa": (_UDA + ("mec", "cent", "adv_spatial"), True),
}


class NumericalError(ArithmeticError):
    """A loss or gradient became non-finite."""


class ConfigError(ValueError):
    """A run configuration is invalid or does not fit the data."""


def _from_dict(cls, obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.001
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if not self.lr > 0:
            raise ValueError("optimizer.lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("optimizer.momentum must lie in [0, 1)")
        if not self.decay_factor > 0:
            raise ValueError("optimizer.decay_factor must be positive")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum,
                "lr_decay_epochs": list(self.lr_decay_epochs), "decay_factor": self.decay_factor}


@dataclass(frozen=True)
class RunConfig:
    losses: tuple[str, ...] = ()
    multi_target: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    feat_dim: int = 32
    epochs: int = 30
    batch_size: int = 32
    ensemble_size: int = 1
    seed: int = 0
    freeze_pretrained: bool = False
    pretrained: str | None = None
    data: GenSpec | str | None = None

    def __post_init__(self):
        losses = tuple(dict.fromkeys(self.losses))
        bad = set(losses) - set(LOSS_NAMES)
        if bad:
            raise ValueError(f"unknown losses {sorted(bad)}; choose from {LOSS_NAMES}")
        object.__setattr__(self, "losses", tuple(n for n in LOSS_NAMES if n in losses))
        for name in ("feat_dim", "batch_size", "ensemble_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if isinstance(self.epochs, bool) or not isinstance(self.epochs, int) or self.epochs < 0:
            raise ValueError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ValueError(f"seed must be an integer, got {self.seed!r}")
        if self.freeze_pretrained and self.pretrained is None:
            raise ValueError("freeze_pretrained needs a pretrained checkpoint")

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        obj = dict(obj) if isinstance(obj, dict) else obj
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        if "weights" in obj:
            obj["weights"] = _from_dict(LossWeights, obj["weights"], "weights")
        if "optimizer" in obj:
            obj["optimizer"] = _from_dict(OptimizerConfig, obj["optimizer"], "optimizer")
        if isinstance(obj.get("data"), dict):
            obj["data"] = _from_dict(GenSpec, obj["data"], "data")
        if "losses" in obj:
            if not isinstance(obj["losses"], list):
                raise ConfigError("losses must be a list of loss names")
            obj["losses"] = tuple(obj["losses"])
        return _from_dict(cls, obj, "config")

    def to_dict(self) -> dict:
        data = self.data.to_dict() if isinstance(self.data, GenSpec) else self.data
        return {
            "losses": list(self.losses),
            "multi_target": self.multi_target,
            "weights": self.weights.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "feat_dim": self.feat_dim,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "ensemble_size": self.ensemble_size,
            "seed": self.seed,
            "freeze_pretrained": self.freeze_pretrained,
            "pretrained": self.pretrained,
            "data": data,
        }

    def with_preset(self, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        losses, multi = PRESETS[name]
        return replace(self, losses=losses, multi_target=multi)

    def fingerprint(self) -> str:
        """Hash of everything that shapes the trajectory except run length and data location."""
        d = self.to_dict()
        for key in ("epochs", "data", "pretrained"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def lr_at(epoch: int, opt: OptimizerConfig) -> float:
    """Step schedule: ``lr * factor ** #(decay epochs <= epoch)``."""
    n = sum(1 for e in opt.lr_decay_epochs if e <= epoch)
    return opt.lr * opt.decay_factor ** n


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
             velocity: dict[str, np.ndarray], lr: float, momentum: float,
             frozen: Sequence[str] = ()) -> tuple[dict, dict]:
    """Heavy-ball SGD: ``v <- momentum*v + g``; ``p <- p - lr*v``.

    Parameters without a gradient are treated as having a zero gradient;
    names in ``frozen`` are left untouched.
    """
    frozen = set(frozen)
    new_p, new_v = {}, {}
    for name, p in params.items():
        if name in frozen:
            new_p[name], new_v[name] = p, velocity[name]
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
        v = momentum * velocity[name] + g
        new_v[name] = v
        new_p[name] = p - lr * v
    return new_p, new_v


def _rows(x: Tensor, index: np.ndarray) -> Tensor:
    return T.take_rows(x, index)


def _adversarial_components(weights, feats, spec: ModelSpec, config: RunConfig, batch: Batch,
                            n_frames: int) -> dict[str, Tensor]:
    """Per-branch domain losses for one backbone."""
    beta_frame, beta_video, beta_spatial = config.weights.beta
    out: dict[str, Tensor] = {}
    levels = []
    if "adv_frame" in config.losses:
        levels.append(("adv_frame", "frame", feats.fused_frames,
                       np.repeat(batch.kitchens, n_frames), np.repeat(batch.domains, n_frames),
                       beta_frame))
    if "adv_video" in config.losses:
        levels.append(("adv_video", "video", feats.video, batch.kitchens, batch.domains,
                       beta_video))
    for name, level, x, kitchens, domains, beta in levels:
        if not config.multi_target:
            logits = discriminate(weights, x, (level, 0), beta, spec.n_kitchens)
            out[name] = adversarial_domain_loss(logits, domains)
            continue
        for k in range(spec.n_kitchens):
            idx = np.flatnonzero(kitchens == k)
            if idx.size == 0:
                out[f"{name}_{k}"] = Tensor(0.0)
                continue
            logits = discriminate(weights, _rows(x, idx), (level, k), beta,
                                  spec.n_kitchens)
            out[f"{name}_{k}"] = adversarial_domain_loss(logits, domains[idx])
    if "adv_spatial" in config.losses:
        logits = discriminate(weights, feats.video, "spatial", beta_spatial,
                              spec.n_kitchens)
        out["adv_spatial"] = adversarial_domain_loss(logits, batch.kitchens)
    return out


def _target_domain_logits(weights, feats, spec, config, batch, tgt):
    """Video-level domain logits of target clips, grouped by kitchen, detached."""
    order = tgt[np.argsort(batch.kitchens[tgt], kind="stable")]
    parts = []
    for k in range(spec.n_kitchens):
        idx = order[batch.kitchens[order] == k]
        if idx.size == 0:
            continue
        disc_k = k if config.multi_target else 0
        parts.append(discriminate(weights, _rows(feats.video, idx), ("video", disc_k),
                                  config.weights.beta[1], spec.n_kitchens))
    logits = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    return order, T.detach(logits)


def compute_components(bound: list[dict[str, Tensor]], spec: ModelSpec, config: RunConfig,
                       batch: Batch, n_source: int) -> dict[str, Tensor]:
    """Loss components for one paired batch (source rows first)."""
    n_frames = next(iter(batch.frames.values())).shape[1]
    src = np.arange(n_source)
    tgt = np.arange(n_source, len(batch))
    enabled = set(config.losses)
    per_member: list[dict[str, Tensor]] = []
    target_logits = []
    for weights in bound:
        feats = forward_backbone(weights, spec, batch.frames)
        comps: dict[str, Tensor] = {
            "cls": classification_loss(_rows(feats.verb_logits, src), _rows(feats.noun_logits, src),
                                       batch.verbs[src], batch.nouns[src])}
        if "rna" in enabled:
            comps["rna"] = rna_loss({m: mean_feature_norm(f) for m, f in feats.frames.items()})
        comps.update(_adversarial_components(weights, feats, spec, config, batch, n_frames))
        if "attentive_entropy" in enabled:
            order, dom = _target_domain_logits(weights, feats, spec, config, batch, tgt)
            comps["attentive_entropy"] = attentive_entropy_loss(
                [_rows(feats.verb_logits, order), _rows(feats.noun_logits, order)], dom)
        per_member.append(comps)
        target_logits.append((_rows(feats.verb_logits, tgt), _rows(feats.noun_logits, tgt)))

    components: dict[str, Tensor] = {}
    for comps in per_member:
        for name, value in comps.items():
            components[name] = value if name not in components else components[name] + value
    if "mec" in enabled:
        components["mec"] = heads_mean(
            lambda h: mec_loss([T.log_softmax(tl[h]) for tl in target_logits]), (0, 1))
    if "cent" in enabled:
        def fused_cent(h):
            probs = T.softmax(target_logits[0][h])
            for tl in target_logits[1:]:
                probs = probs + T.softmax(tl[h])
            return cent_loss(probs / float(len(target_logits)))
        components["cent"] = heads_mean(fused_cent, (0, 1))
    return components


@dataclass
class Checkpoint:
    config: RunConfig
    spec: ModelSpec
    members: list[ModelParams]
    velocities: list[dict[str, np.ndarray]]
    epoch: int
    history: list[dict] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return self.config.fingerprint()

    def to_json(self) -> str:
        def arrays(d):
            return {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                    for k, v in d.items()}
        obj = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "model_spec": self.spec.to_dict(),
            "epoch": self.epoch,
            "members": [{"params": arrays(p.arrays), "velocity": arrays(v)}
                        for p, v in zip(self.members, self.velocities)],
            "history": self.history,
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid checkpoint JSON at line {exc.lineno} "
                              f"column {exc.colno}: {exc.msg}") from None
        if not isinstance(obj, dict) or obj.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {obj.get('version')!r}")
        config = RunConfig.from_dict(obj["config"])
        spec = ModelSpec(**obj["model_spec"])

        def arrays(d):
            return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                    for k, v in d.items()}
        members = [ModelParams(spec, arrays(m["params"])) for m in obj["members"]]
        velocities = [arrays(m["velocity"]) for m in obj["members"]]
        ckpt = cls(config, spec, members, velocities, int(obj["epoch"]), obj["history"])
        if ckpt.config_hash != obj["config_hash"]:
            raise ConfigError(f"{path}: config hash mismatch")
        return ckpt


def model_spec_for(dataset: Dataset, feat_dim: int) -> ModelSpec:
    meta = dataset.meta
    return ModelSpec(tuple(meta["modalities"]), meta["frame_dim"], feat_dim,
                     meta["n_verbs"], meta["n_nouns"], meta["n_kitchens"])


def resolve_dataset(config: RunConfig, dataset: Dataset | None = None) -> Dataset:
    if dataset is not None:
        return dataset
    if isinstance(config.data, GenSpec):
        return generate(config.data, config.seed)
    if isinstance(config.data, str):
        return load(config.data)
    raise ConfigError("no dataset given and config.data is empty")


def _check_spec(spec: ModelSpec, other: ModelSpec, what: str) -> None:
    if spec != other:
        raise ConfigError(f"{what} was built for {other.to_dict()}, data needs {spec.to_dict()}")


def train(config: RunConfig, dataset: Dataset | None = None, *,
          resume: Checkpoint | None = None) -> Checkpoint:
    """Run (or continue) training and return the final checkpoint.

    The per-epoch loss log is ``checkpoint.history``: one entry per epoch
    holding the lr, step-averaged components and their weighted total.
    """
    dataset = resolve_dataset(config, dataset)
    spec = model_spec_for(dataset, config.feat_dim)
    b = config.ensemble_size
    if "mec" in config.losses and b == 1:
        logger.warning("mec with a single backbone reduces to entropy minimization")

    if resume is not None:
        if resume.config_hash != config.fingerprint():
            raise ConfigError("resume checkpoint was produced by a different configuration")
        _check_spec(spec, resume.spec, "resume checkpoint")
        members = [m.copy() for m in resume.members]
        velocities = [{k: v.copy() for k, v in vel.items()} for vel in resume.velocities]
        start, history = resume.epoch, list(resume.history)
    else:
        if config.pretrained is not None:
            base = Checkpoint.load(config.pretrained)
            _check_spec(spec, base.spec, "pretrained checkpoint")
            members = [base.members[i % len(base.members)].copy() for i in range(b)]
        else:
            members = [init_params(spec, config.seed + i) for i in range(b)]
        velocities = [{k: np.zeros_like(v) for k, v in m.arrays.items()} for m in members]
        start, history = 0, []

    frozen = [k for k in members[0].arrays if k.startswith("enc.")] \
        if config.freeze_pretrained else []
    source = Batch.from_samples(dataset["source_train"], spec.modalities)
    target = Batch.from_samples(dataset["target_train"], spec.modalities)
    if source.verbs is None:
        raise ConfigError("source_train contains unlabelled samples")

    for epoch in range(start, config.epochs):
        lr = lr_at(epoch, config.optimizer)
        sums: dict[str, float] = {}
        coefs: dict[str, float] = {}
        total, steps = 0.0, 0
        for s_idx, t_idx in paired_batches(len(source), len(target), config.batch_size,
                                           config.seed, epoch):
            batch = _concat(source.take(s_idx), target.take(t_idx))
            with Graph() as graph:
                bound = [bind(m) for m in members]
                comps = compute_components(bound, spec, config, batch, len(s_idx))
                report = total_loss(comps, config.weights, config.losses)
                if not np.isfinite(report.total):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, step {steps}")
                T.backward(report.objective, graph)
            for i, weights in enumerate(bound):
                grads = {k: t.grad for k, t in weights.items()}
                new_p, velocities[i] = sgd_step(members[i].arrays, grads, velocities[i], lr,
                                                config.optimizer.momentum, frozen)
                members[i] = ModelParams(spec, new_p)
            for k, v in report.components.items():
                sums[k] = sums.get(k, 0.0) + v
            coefs.update(report.coefficients)
            total += report.total
            steps += 1
        entry = {"epoch": epoch, "lr": lr,
                 "components": {k: v / steps for k, v in sums.items()},
                 "coefficients": coefs, "total": total / steps}
        history.append(entry)
        logger.info("epoch %d lr %.6g total %.6f", epoch, lr, entry["total"])

    return Checkpoint(config, spec, members, velocities, max(start, config.epochs), history)


def _concat(a: Batch, b: Batch) -> Batch:
    return Batch({m: np.concatenate([a.frames[m], b.frames[m]]) for m in a.frames},
                 np.concatenate([a.kitchens, b.kitchens]),
                 np.concatenate([a.domains, b.domains]),
                 a.verbs, a.nouns)


def member_logits(params: ModelParams, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    with Graph():
        feats = forward_backbone(bind(params, requires_grad=False), params.spec, batch.frames)
    return feats.verb_logits.data, feats.noun_logits.data


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def ensemble_predict(members: Sequence[ModelParams], samples) -> tuple[np.ndarray, np.ndarray]:
    """Late fusion: average of the members' softmax scores, per head.

    ``samples`` is a :class:`Sample`, a sequence of them, or a :class:`Batch`.
    A single sample yields 1-D probability vectors.
    """
    if not members:
        raise ValueError("ensemble_predict needs at least one member")
    spec = members[0].spec
    for m in members[1:]:
        if (m.spec.n_verbs, m.spec.n_nouns) != (spec.n_verbs, spec.n_nouns):
            raise ValueError("ensemble members disagree on class counts")
    single = isinstance(samples, Sample)
    batch = samples if isinstance(samples, Batch) else \
        Batch.from_samples([samples] if single else list(samples), spec.modalities)
    verb = np.zeros((len(batch), spec.n_verbs))
    noun = np.zeros((len(batch), spec.n_nouns))
    for m in members:
        v, n = member_logits(m, batch)
        verb += _softmax(v)
        noun += _softmax(n)
    verb /= len(members)
    noun /= len(members)
    return (verb[0], noun[0]) if single else (verb, noun)


def evaluate(members: Sequence[ModelParams], samples: Sequence[Sample],
             per_kitchen: bool = False) -> EvalReport:
    """Accuracy of the fused ensemble on labelled clips."""
    spec = members[0].spec
    batch = Batch.from_samples(list(samples), spec.modalities)
    if batch.verbs is None:
        raise ValueError("evaluation needs labelled samples")
    logits = [member_logits(m, batch) for m in members]
    verb = sum(_softmax(v) for v, _ in logits) / len(members)
    noun = sum(_softmax(n) for _, n in logits) / len(members)
    preds = None
    if len(members) >= 2:
        preds = (np.stack([v.argmax(axis=1) for v, _ in logits]),
                 np.stack([n.argmax(axis=1) for _, n in logits]))
    return evaluate_predictions(verb, noun, batch.verbs, batch.nouns,
                                batch.kitchens if per_kitchen else None, preds)


def loss_log_lines(history: Sequence[dict]) -> str:
    """The per-epoch log as ndjson text."""
    return "".join(json.dumps(e, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"
                   for e in history)


def loss_report_from_entry(entry: dict) -> LossReport:
    return LossReport(dict(entry["components"]), dict(entry["coefficients"]), entry["total"])
