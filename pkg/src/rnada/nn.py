"""Per-modality encoders, temporal pooling, verb/noun heads and the
discriminator bank used for multi-kitchen adversarial alignment.

Parameters live in a flat name -> array mapping (``ModelParams.arrays``)
so the optimizer and checkpoint code can treat them uniformly::

    enc.<modality>.{w1,b1,w2,b2}
    cls.{verb,noun}.{w,b}
    disc.frame.<k>.{w1,b1,w2,b2}    (K binary discriminators)
    disc.video.<k>.{w1,b1,w2,b2}    (K binary discriminators)
    disc.spatial.{w1,b1,w2,b2}      (one K-way discriminator)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

CANONICAL_MODALITIES = ("rgb", "flow", "audio")
LEVELS = ("frame", "video", "spatial")


def modality_order(names) -> list[str]:
    """Sort modality names canonically (rgb < flow < audio < others by name)."""
    rank = {m: i for i, m in enumerate(CANONICAL_MODALITIES)}
    return sorted(names, key=lambda m: (rank.get(m, len(rank)), m))


@dataclass(frozen=True)
class ModelSpec:
    modalities: tuple[str, ...]
    frame_dim: int
    feat_dim: int
    n_verbs: int
    n_nouns: int
    n_kitchens: int

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if not self.modalities:
            raise ValueError("ModelSpec needs at least one modality")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"duplicate modalities in {self.modalities}")
        for name in ("frame_dim", "feat_dim", "n_verbs", "n_nouns", "n_kitchens"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"ModelSpec.{name} must be a positive integer, got {value!r}")

    @property
    def hidden_dim(self) -> int:
        return self.feat_dim

    @property
    def fused_dim(self) -> int:
        return len(self.modalities) * self.feat_dim

    @property
    def n_discriminators(self) -> int:
        return 2 * self.n_kitchens + 1

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "frame_dim": self.frame_dim,
            "feat_dim": self.feat_dim,
            "n_verbs": self.n_verbs,
            "n_nouns": self.n_nouns,
            "n_kitchens": self.n_kitchens,
        }


@dataclass
class ModelParams:
    """All parameters of one ensemble member."""

    spec: ModelSpec
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def encoder(self, modality: str) -> dict[str, np.ndarray]:
        return _subset(self.arrays, f"enc.{modality}.")

    @property
    def classifiers(self) -> dict[str, np.ndarray]:
        return _subset(self.arrays, "cls.")

    @property
    def discriminators(self) -> dict[str, np.ndarray]:
        return _subset(self.arrays, "disc.")

    @property
    def n_discriminators(self) -> int:
        return sum(1 for k in self.arrays if k.startswith("disc.") and k.endswith(".w1"))

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})


def _subset(arrays, prefix):
    return {k: v for k, v in arrays.items() if k.startswith(prefix)}


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in creation order."""
    h, f, fused = spec.hidden_dim, spec.feat_dim, spec.fused_dim
    shapes: dict[str, tuple[int, ...]] = {}

    def mlp(prefix, n_in, n_out):
        shapes[f"{prefix}.w1"] = (n_in, h)
        shapes[f"{prefix}.b1"] = (h,)
        shapes[f"{prefix}.w2"] = (h, n_out)
        shapes[f"{prefix}.b2"] = (n_out,)

    for m in spec.modalities:
        mlp(f"enc.{m}", spec.frame_dim, f)
    shapes["cls.verb.w"] = (fused, spec.n_verbs)
    shapes["cls.verb.b"] = (spec.n_verbs,)
    shapes["cls.noun.w"] = (fused, spec.n_nouns)
    shapes["cls.noun.b"] = (spec.n_nouns,)
    for level in ("frame", "video"):
        for k in range(spec.n_kitchens):
            mlp(f"disc.{level}.{k}", fused, 2)
    mlp("disc.spatial", fused, spec.n_kitchens)
    return shapes


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(int(seed) % 2**64)
    arrays = {}
    for name, shape in param_shapes(spec).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            s = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-s, s, size=shape)
    return ModelParams(spec, arrays)


def bind(params: ModelParams, requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap every parameter array in a leaf tensor."""
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.arrays.items()}


def linear(weights: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    w = weights[f"{prefix}.w"]
    if x.shape[-1] != w.shape[0]:
        raise T.ShapeError(f"{prefix}: input dim {x.shape[-1]} does not match weight {w.shape}")
    return x @ w + weights[f"{prefix}.b"]


def mlp(weights: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    w1 = weights[f"{prefix}.w1"]
    if x.shape[-1] != w1.shape[0]:
        raise T.ShapeError(f"{prefix}: input dim {x.shape[-1]} does not match weight {w1.shape}")
    hidden = T.relu(x @ w1 + weights[f"{prefix}.b1"])
    return hidden @ weights[f"{prefix}.w2"] + weights[f"{prefix}.b2"]


def encode_frames(weights: Mapping[str, Tensor], frames: Mapping[str, np.ndarray],
                  modalities=None) -> dict[str, Tensor]:
    """Encode every frame of every modality independently.

    ``frames[m]`` is ``(T, frame_dim)`` for one sample or ``(B, T, frame_dim)``
    for a batch; the result is ``(T, feat_dim)`` or ``(B*T, feat_dim)``.
    A :class:`~rnada.data.Sample` may be passed directly.
    """
    frames = getattr(frames, "frames", frames)
    if modalities is None:
        modalities = [k.split(".")[1] for k in weights if k.startswith("enc.") and k.endswith(".w1")]
    out = {}
    for m in modalities:
        if m not in frames:
            raise KeyError(f"sample is missing modality {m!r}")
        x = frames[m]
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim == 3:
            x = T.reshape(x, (x.shape[0] * x.shape[1], x.shape[2]))
        out[m] = mlp(weights, f"enc.{m}", x)
    return out


def temporal_pool(frame_feats: Tensor, n_frames: int | None = None) -> Tensor:
    """Mean over the time axis.

    With ``n_frames`` the input is read as ``(B*T, F)`` and the result is
    ``(B, F)``; without it the input is one clip ``(T, F)``.
    """
    frame_feats = T.as_tensor(frame_feats)
    rows = frame_feats.shape[0]
    if rows == 0 or n_frames == 0:
        raise ValueError("temporal_pool: need at least one frame")
    if n_frames is None:
        return T.mean(frame_feats, axis=0)
    if rows % n_frames:
        raise T.ShapeError(f"temporal_pool: {rows} rows is not a multiple of T={n_frames}")
    x = T.reshape(frame_feats, (rows // n_frames, n_frames, frame_feats.shape[1]))
    return T.mean(x, axis=1)


def classify(weights: Mapping[str, Tensor], fused: Tensor) -> tuple[Tensor, Tensor]:
    """Verb and noun logits from the fused video feature."""
    return linear(weights, "cls.verb", fused), linear(weights, "cls.noun", fused)


class Branch(NamedTuple):
    level: str
    kitchen: int | None = None

    def __str__(self):
        return self.level if self.kitchen is None else f"{self.level}:{self.kitchen}"


def parse_branch(branch, n_kitchens: int) -> Branch:
    if isinstance(branch, str):
        level, _, k = branch.partition(":")
        branch = Branch(level, int(k) if k else None)
    elif not isinstance(branch, Branch):
        branch = Branch(*branch)
    if branch.level == "spatial":
        if branch.kitchen is not None:
            raise ValueError(f"spatial branch takes no kitchen index, got {branch}")
    elif branch.level in ("frame", "video"):
        if branch.kitchen is None or not 0 <= branch.kitchen < n_kitchens:
            raise ValueError(f"unknown branch {branch} for {n_kitchens} kitchen(s)")
    else:
        raise ValueError(f"unknown branch level {branch.level!r}; expected one of {LEVELS}")
    return branch


def discriminate(weights: Mapping[str, Tensor], feat: Tensor, branch, beta: float,
                 n_kitchens: int | None = None) -> Tensor:
    """Domain logits for ``feat`` behind a gradient-reversal layer.

    ``branch`` is ``("frame", k)``, ``("video", k)``, ``"spatial"`` or the
    string forms ``"frame:k"`` / ``"video:k"``.
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if n_kitchens is None:
        n_kitchens = sum(1 for k in weights if k.startswith("disc.frame.") and k.endswith(".w1"))
    branch = parse_branch(branch, n_kitchens)
    prefix = "disc.spatial" if branch.level == "spatial" else f"disc.{branch.level}.{branch.kitchen}"
    return mlp(weights, prefix, T.grad_reverse(feat, beta))


@dataclass
class Features:
    """Forward products of one backbone on one batch."""

    frames: dict[str, Tensor]   # per modality, (B*T, F)
    fused_frames: Tensor        # (B*T, M*F)
    video: Tensor               # (B, M*F)
    verb_logits: Tensor
    noun_logits: Tensor


def forward_backbone(weights: Mapping[str, Tensor], spec: ModelSpec,
                     frames: Mapping[str, np.ndarray]) -> Features:
    """Encode, fuse by concatenation, pool over time and classify."""
    n_frames = None
    for m in spec.modalities:
        x = np.asarray(frames[m]) if m in frames else None
        if x is None:
            raise KeyError(f"batch is missing modality {m!r}")
        if x.ndim != 3 or x.shape[2] != spec.frame_dim:
            raise T.ShapeError(
                f"modality {m!r}: expected (B, T, {spec.frame_dim}) frames, got {x.shape}")
        if n_frames is None:
            n_frames = x.shape[1]
        elif x.shape[1] != n_frames:
            raise T.ShapeError(f"modality {m!r} has {x.shape[1]} frames, expected {n_frames}")
    per_mod = encode_frames(weights, frames, spec.modalities)
    fused = per_mod[spec.modalities[0]] if len(spec.modalities) == 1 else \
        T.concat([per_mod[m] for m in spec.modalities], axis=1)
    video = temporal_pool(fused, n_frames)
    verb, noun = classify(weights, video)
    return Features(per_mod, fused, video, verb, noun)
