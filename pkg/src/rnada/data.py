"""Synthetic multi-kitchen, multi-modal clip features and their on-disk format.

Each clip is a stack of ``T`` frame vectors per modality. Labels live in a
latent space (verb and noun prototypes in orthogonal subspaces); every
kitchen moves that space by its own rotation + translation, and the target
domain applies one more global transform on top. Each modality sees the
latent through a fixed random projection, rescaled so its mean frame norm
equals the configured ``norm_scales`` entry, then gets isotropic noise.

On disk a dataset is a directory::

    meta.json             dims, class counts, modality order, K
    source_train.ndjson   labelled source clips
    target_train.ndjson   unlabelled target clips
    target_eval.ndjson    held-out labelled target clips
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import expm

from .nn import modality_order

SPLITS = ("source_train", "target_train", "target_eval")
FORMAT = "rnada-dataset"
VERSION = 1
# radians of rotation per unit of shift magnitude
ROTATION_PER_UNIT = 0.35


class DatasetFormatError(ValueError):
    """A dataset directory is malformed or internally inconsistent."""


@dataclass
class Sample:
    id: str
    kitchen: int
    domain: str
    frames: dict[str, np.ndarray]
    verb: int | None = None
    noun: int | None = None

    def to_json(self, modalities: Sequence[str]) -> str:
        obj = {
            "id": self.id,
            "kitchen": int(self.kitchen),
            "domain": self.domain,
            "frames": {m: self.frames[m].tolist() for m in modalities},
            "verb": None if self.verb is None else int(self.verb),
            "noun": None if self.noun is None else int(self.noun),
        }
        return json.dumps(obj, separators=(",", ":"), allow_nan=False)


@dataclass(frozen=True)
class GenSpec:
    n_kitchens: int = 3
    modalities: tuple[str, ...] = ("rgb", "flow", "audio")
    n_verbs: int = 4
    n_nouns: int = 4
    n_frames: int = 8
    frame_dim: int = 16
    latent_dim: int = 8
    samples_per_kitchen: int = 40
    eval_per_kitchen: int = 40
    class_sep: float = 1.0
    env_shift: float = 1.0
    temporal_shift: float = 1.5
    norm_scales: dict = field(default_factory=lambda: {"rgb": 10.0, "flow": 5.0, "audio": 1.0})
    noise_sigma: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        for name in ("n_kitchens", "n_verbs", "n_nouns", "n_frames", "frame_dim",
                     "latent_dim", "samples_per_kitchen", "eval_per_kitchen"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"GenSpec.{name} must be a positive integer, got {v!r}")
        if self.latent_dim < 2:
            raise ValueError("GenSpec.latent_dim must be at least 2")
        if not self.modalities or len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"GenSpec.modalities must be distinct and non-empty: {self.modalities}")
        if not self.class_sep > 0:
            raise ValueError("GenSpec.class_sep must be positive")
        for name in ("env_shift", "temporal_shift", "noise_sigma"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"GenSpec.{name} must be finite and non-negative, got {v!r}")
        missing = set(self.modalities) - set(self.norm_scales)
        if missing:
            raise ValueError(f"GenSpec.norm_scales lacks modalities {sorted(missing)}")
        for m in self.modalities:
            v = self.norm_scales[m]
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"GenSpec.norm_scales[{m!r}] must be positive, got {v!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "GenSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown GenSpec keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d


@dataclass
class Dataset:
    meta: dict
    splits: dict[str, list[Sample]]

    @property
    def modalities(self) -> list[str]:
        return list(self.meta["modalities"])

    @property
    def n_kitchens(self) -> int:
        return self.meta["n_kitchens"]

    def __getitem__(self, split: str) -> list[Sample]:
        return self.splits[split]


def _prototypes(rng, n: int, dim: int, sep: float) -> np.ndarray:
    g = rng.standard_normal((max(n, dim), dim))
    if n <= dim:
        q, _ = np.linalg.qr(g)
        return sep * q[:n]
    return sep * g[:n] / np.linalg.norm(g[:n], axis=1, keepdims=True)


def _rigid(rng, dim: int, magnitude: float) -> tuple[np.ndarray, np.ndarray]:
    """Random rotation + translation; identity when ``magnitude`` is 0."""
    g = rng.standard_normal((dim, dim))
    u = rng.standard_normal(dim)
    if magnitude == 0:
        return np.eye(dim), np.zeros(dim)
    skew = g - g.T
    skew /= np.abs(np.linalg.eigvals(skew)).max()
    rot = expm(magnitude * ROTATION_PER_UNIT * skew)
    return rot, magnitude * u / np.linalg.norm(u)


def generate(spec: GenSpec, seed: int = 0) -> Dataset:
    """Draw a dataset with environmental (per-kitchen) and temporal shift."""
    rng = np.random.default_rng(int(seed) % 2**64)
    modalities = modality_order(spec.modalities)
    d_verb = spec.latent_dim // 2
    d_noun = spec.latent_dim - d_verb
    verb_protos = _prototypes(rng, spec.n_verbs, d_verb, spec.class_sep)
    noun_protos = _prototypes(rng, spec.n_nouns, d_noun, spec.class_sep)
    kitchens = [_rigid(rng, spec.latent_dim, spec.env_shift) for _ in range(spec.n_kitchens)]
    temporal = _rigid(rng, spec.latent_dim, spec.temporal_shift)
    projections = {m: rng.standard_normal((spec.latent_dim, spec.frame_dim))
                   / math.sqrt(spec.latent_dim) for m in modalities}

    plan = []  # (split, id, kitchen, domain, verb, noun)
    for split, count in (("source_train", spec.samples_per_kitchen),
                         ("target_train", spec.samples_per_kitchen),
                         ("target_eval", spec.eval_per_kitchen)):
        domain = "source" if split == "source_train" else "target"
        for k in range(spec.n_kitchens):
            verbs = rng.integers(0, spec.n_verbs, size=count)
            nouns = rng.integers(0, spec.n_nouns, size=count)
            for i in range(count):
                plan.append((split, f"{split}-k{k}-{i:05d}", k, domain, int(verbs[i]), int(nouns[i])))

    clean = {m: np.empty((len(plan), spec.frame_dim)) for m in modalities}
    for row, (_, _, k, domain, v, n) in enumerate(plan):
        z = np.concatenate([verb_protos[v], noun_protos[n]])
        rot, shift = kitchens[k]
        moved = rot @ z + shift
        if domain == "target":
            moved = temporal[0] @ moved + temporal[1]
        for m in modalities:
            clean[m][row] = moved @ projections[m]
    for m in modalities:
        mean_norm = np.linalg.norm(clean[m], axis=1).mean()
        clean[m] *= spec.norm_scales[m] / mean_norm

    noise_scale = spec.noise_sigma / math.sqrt(spec.frame_dim)
    splits: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    for row, (split, sid, k, domain, v, n) in enumerate(plan):
        frames = {}
        for m in modalities:
            base = np.broadcast_to(clean[m][row], (spec.n_frames, spec.frame_dim))
            frames[m] = base + noise_scale * rng.standard_normal((spec.n_frames, spec.frame_dim))
        labelled = split != "target_train"
        splits[split].append(Sample(sid, k, domain, frames,
                                    v if labelled else None, n if labelled else None))

    meta = {
        "format": FORMAT,
        "version": VERSION,
        "modalities": modalities,
        "n_kitchens": spec.n_kitchens,
        "n_verbs": spec.n_verbs,
        "n_nouns": spec.n_nouns,
        "n_frames": spec.n_frames,
        "frame_dim": spec.frame_dim,
        "counts": {s: len(splits[s]) for s in SPLITS},
        "generator": {"seed": int(seed), "spec": spec.to_dict()},
    }
    return Dataset(meta, splits)


def save(dataset: Dataset, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    mods = dataset.modalities
    (out / "meta.json").write_text(json.dumps(dataset.meta, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    for split in SPLITS:
        with open(out / f"{split}.ndjson", "w", encoding="utf-8", newline="\n") as fh:
            for s in dataset.splits[split]:
                fh.write(s.to_json(mods))
                fh.write("\n")


def _fail(path, lineno, msg):
    where = f"{path}:{lineno}" if lineno else str(path)
    raise DatasetFormatError(f"{where}: {msg}")


def _read_meta(path: Path) -> dict:
    if not path.is_file():
        raise DatasetFormatError(f"{path}: missing meta.json")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        _fail(path, exc.lineno, f"invalid JSON ({exc.msg})")
    required = ("modalities", "n_kitchens", "n_verbs", "n_nouns", "n_frames", "frame_dim")
    if not isinstance(meta, dict):
        _fail(path, 1, "meta must be a JSON object")
    for key in required:
        if key not in meta:
            _fail(path, None, f"meta lacks {key!r}")
    for key in required[1:]:
        v = meta[key]
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            _fail(path, None, f"meta {key!r} must be a positive integer")
    return meta


def _parse_sample(obj, meta: dict, split: str, path, lineno) -> Sample:
    if not isinstance(obj, dict):
        _fail(path, lineno, "record must be a JSON object")
    expected = {"id", "kitchen", "domain", "frames", "verb", "noun"}
    if set(obj) != expected:
        _fail(path, lineno, f"record keys {sorted(obj)} differ from {sorted(expected)}")
    sid, k, domain = obj["id"], obj["kitchen"], obj["domain"]
    if not isinstance(sid, str):
        _fail(path, lineno, "id must be a string")
    if isinstance(k, bool) or not isinstance(k, int) or not 0 <= k < meta["n_kitchens"]:
        _fail(path, lineno, f"kitchen {k!r} out of range [0, {meta['n_kitchens']})")
    want_domain = "source" if split == "source_train" else "target"
    if domain != want_domain:
        _fail(path, lineno, f"domain {domain!r} does not belong in {split}")
    frames = obj["frames"]
    if not isinstance(frames, dict) or set(frames) != set(meta["modalities"]):
        _fail(path, lineno, f"frames must hold exactly modalities {meta['modalities']}")
    arrays = {}
    for m in meta["modalities"]:
        try:
            arr = np.array(frames[m], dtype=np.float64)
        except (TypeError, ValueError):
            _fail(path, lineno, f"frames[{m!r}] is not a numeric matrix")
        if arr.shape != (meta["n_frames"], meta["frame_dim"]):
            _fail(path, lineno, f"frames[{m!r}] has shape {arr.shape}, "
                                f"expected {(meta['n_frames'], meta['frame_dim'])}")
        if not np.all(np.isfinite(arr)):
            _fail(path, lineno, f"frames[{m!r}] contains non-finite values")
        arrays[m] = arr
    labels = {}
    for head, count in (("verb", meta["n_verbs"]), ("noun", meta["n_nouns"])):
        v = obj[head]
        if split == "target_train":
            if v is not None:
                _fail(path, lineno, f"target_train sample carries a {head} label")
        elif isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < count:
            _fail(path, lineno, f"{head} label {v!r} missing or out of range [0, {count})")
        labels[head] = v
    return Sample(sid, k, domain, arrays, labels["verb"], labels["noun"])


def load(directory) -> Dataset:
    root = Path(directory)
    meta = _read_meta(root / "meta.json")
    splits: dict[str, list[Sample]] = {}
    seen: set[str] = set()
    for split in SPLITS:
        path = root / f"{split}.ndjson"
        if not path.is_file():
            raise DatasetFormatError(f"{path}: missing split file")
        samples = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    _fail(path, lineno, "blank line")
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    _fail(path, lineno, f"invalid JSON ({exc.msg})")
                sample = _parse_sample(obj, meta, split, path, lineno)
                if sample.id in seen:
                    _fail(path, lineno, f"duplicate sample id {sample.id!r}")
                seen.add(sample.id)
                samples.append(sample)
        counts = meta.get("counts", {})
        if split in counts and counts[split] != len(samples):
            raise DatasetFormatError(
                f"{path}: meta says {counts[split]} samples, file holds {len(samples)}")
        splits[split] = samples
    return Dataset(meta, splits)


@dataclass
class Batch:
    """Stacked arrays for a set of clips; labels are ``None`` when absent."""

    frames: dict[str, np.ndarray]
    kitchens: np.ndarray
    domains: np.ndarray  # 0 = source, 1 = target
    verbs: np.ndarray | None
    nouns: np.ndarray | None

    def __len__(self) -> int:
        return len(self.kitchens)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], modalities: Sequence[str]) -> "Batch":
        if not samples:
            raise ValueError("cannot build a batch from zero samples")
        frames = {m: np.stack([s.frames[m] for s in samples]) for m in modalities}
        kitchens = np.array([s.kitchen for s in samples], dtype=np.intp)
        domains = np.array([s.domain == "target" for s in samples], dtype=np.intp)
        labelled = all(s.verb is not None and s.noun is not None for s in samples)
        verbs = np.array([s.verb for s in samples], dtype=np.intp) if labelled else None
        nouns = np.array([s.noun for s in samples], dtype=np.intp) if labelled else None
        return cls(frames, kitchens, domains, verbs, nouns)

    def take(self, index) -> "Batch":
        index = np.asarray(index, dtype=np.intp)
        return Batch({m: a[index] for m, a in self.frames.items()}, self.kitchens[index],
                     self.domains[index],
                     None if self.verbs is None else self.verbs[index],
                     None if self.nouns is None else self.nouns[index])


def _permutation(n: int, seed: int, *key: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed) % 2**64, *key])
    return rng.permutation(n)


def make_batches(split: Sequence, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Shuffle deterministically per ``(seed, epoch)`` and cut into batches.

    The final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    if n == 0:
        raise ValueError("cannot batch an empty split")
    order = _permutation(n, seed, epoch)
    return [[split[i] for i in order[s:s + batch_size]] for s in range(0, n, batch_size)]


def _cycled(n: int, total: int, seed: int, epoch: int, stream: int) -> np.ndarray:
    parts, have, cycle = [], 0, 0
    while have < total:
        parts.append(_permutation(n, seed, epoch, stream, cycle))
        have += n
        cycle += 1
    return np.concatenate(parts)[:total]


def paired_batches(n_source: int, n_target: int, batch_size: int, seed: int,
                   epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Index pairs (source, target) of equal size for one epoch.

    The epoch spans the longer stream; the shorter one cycles through fresh
    permutations.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if n_source == 0 or n_target == 0:
        raise ValueError("both source and target streams must be non-empty")
    total = max(n_source, n_target)
    src = _cycled(n_source, total, seed, epoch, 0)
    tgt = _cycled(n_target, total, seed, epoch, 1)
    for s in range(0, total, batch_size):
        yield src[s:s + batch_size], tgt[s:s + batch_size]
