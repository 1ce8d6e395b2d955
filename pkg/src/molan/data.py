"""Synthetic multimodal data with ground-truth block noise maps, and dataset I/O."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .blocking import BlockPlan, optimal_block_params
from .numerics import DomainError, Tensor


class ConfigError(ValueError):
    """Invalid configuration value."""


class ParseError(ValueError):
    """A dataset line is not valid JSON."""


class SchemaError(ValueError):
    """A dataset record has missing, unknown, or inconsistent fields."""


SIGNAL, STRONG, WEAK = 0, 1, 2
STRONG_LEVEL = 1.0
LABEL_RANGE = 3.0

RECORD_KEYS = (
    "id",
    "label",
    "text",
    "text_len",
    "audio",
    "visual",
    "noise_map_visual",
    "noise_map_audio",
)
OPTIONAL_KEYS = {"noise_map_visual", "noise_map_audio"}


@dataclass(frozen=True)
class GeneratorConfig:
    data_seed: int = 7
    n_train: int = 400
    n_val: int = 100
    n_test: int = 200
    text_steps: int = 8
    text_dim: int = 12
    audio_steps: int = 16
    audio_dim: int = 8
    visual_steps: int = 12
    visual_dim: int = 16
    signal_fraction: float = 0.5
    strong_fraction: float = 0.3
    noise_amplitude: float = 2.0
    weak_level: float = 0.3
    jitter: float = 0.1
    text_noise: float = 1.0
    topic_level: float = 1.0
    adversarial: bool = True
    distractor_prob: float = 0.0
    task: str = "regression"
    num_classes: int = 7

    def __post_init__(self):
        for name in ("signal_fraction", "strong_fraction", "weak_level", "distractor_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.signal_fraction + self.strong_fraction > 1.0 + 1e-12:
            raise ConfigError("signal_fraction + strong_fraction exceeds 1")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("text_steps", "text_dim", "audio_steps", "audio_dim", "visual_steps", "visual_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.noise_amplitude < 0 or self.jitter < 0 or self.text_noise < 0:
            raise ConfigError("noise_amplitude, jitter and text_noise must be non-negative")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigError("classification needs at least two classes")

    def plans(self) -> dict[str, BlockPlan]:
        return {
            "visual": optimal_block_params(self.visual_steps, self.visual_dim, "two_dimensional"),
            "audio": optimal_block_params(self.audio_steps, self.audio_dim, "one_dimensional"),
        }


@dataclass(eq=False)
class SyntheticSample:
    id: str
    label: float
    text: np.ndarray
    text_len: int
    audio: np.ndarray
    visual: np.ndarray
    noise_map_visual: np.ndarray | None = None
    noise_map_audio: np.ndarray | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or a.shape != b.shape or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "label": self.label,
            "text": self.text,
            "text_len": self.text_len,
            "audio": self.audio,
            "visual": self.visual,
        }
        if self.noise_map_visual is not None:
            rec["noise_map_visual"] = self.noise_map_visual
        if self.noise_map_audio is not None:
            rec["noise_map_audio"] = self.noise_map_audio
        return rec

    def checksum(self) -> str:
        return hashlib.sha256(_encode_record(self.to_record()).encode()).hexdigest()


def label_to_class(y: float, num_classes: int) -> int:
    """Equal-width bins over [-3, 3]."""
    idx = int(math.floor((y + LABEL_RANGE) / (2 * LABEL_RANGE) * num_classes))
    return min(max(idx, 0), num_classes - 1)


TOPIC_DIM = 2


def _orthonormal(rng: np.random.Generator, length: int, count: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(length, count)))
    return q[:, :count]


def _modality(rng, y: float, topic: np.ndarray, plan: BlockPlan, basis: np.ndarray, cfg: GeneratorConfig):
    m, n = plan.source_shape
    rows, cols = plan.block_shape
    # unit RMS per direction
    basis = basis * np.sqrt(cols)
    label_dir, topic_map = basis[:, 0], basis[:, 1:]
    topic = topic[: topic_map.shape[1]]
    x = cfg.jitter * rng.normal(size=(m, n))
    weak = 1.0 - cfg.signal_fraction - cfg.strong_fraction
    designation = rng.choice(3, size=plan.grid_shape, p=[cfg.signal_fraction, cfg.strong_fraction, max(weak, 0.0)])
    noise_map = np.zeros(plan.grid_shape)
    for p in range(plan.grid_rows):
        for q in range(plan.grid_cols):
            sl = (slice(p * rows, (p + 1) * rows), slice(q * cols, (q + 1) * cols))
            kind = designation[p, q]
            if kind == SIGNAL:
                x[sl] += (y / LABEL_RANGE) * label_dir + cfg.topic_level * (topic_map @ topic)
            elif kind == STRONG:
                noise_map[p, q] = STRONG_LEVEL
                if cfg.adversarial:
                    # a contradicting label (-y) or an unrelated distractor label, never the text topic
                    if rng.random() < cfg.distractor_prob:
                        z = rng.uniform(-LABEL_RANGE, LABEL_RANGE)
                    else:
                        z = -y
                    x[sl] += cfg.noise_amplitude * (z / LABEL_RANGE) * label_dir
                else:
                    x[sl] += cfg.noise_amplitude * rng.normal(size=(rows, cols))
            else:
                noise_map[p, q] = cfg.weak_level
                x[sl] += cfg.weak_level * rng.normal(size=(rows, cols))
    return x, noise_map, designation


def generate(cfg: GeneratorConfig) -> dict[str, list[SyntheticSample]]:
    """Draw train/val/test splits; fully determined by ``cfg``.

    Every sample has a label ``y`` and a random unit topic vector. Text holds
    a blurred reading of ``y`` plus the topic; signal blocks hold ``y`` plus
    the same topic through a fixed per-modality map; strong-noise blocks hold
    a contradicting label and no topic; weak-noise blocks hold jitter only.
    """
    rng = np.random.default_rng(cfg.data_seed)
    plans = cfg.plans()
    # narrow features keep the label direction and as many topic directions as fit
    text_basis = _orthonormal(rng, cfg.text_dim, min(TOPIC_DIM + 1, cfg.text_dim)) * np.sqrt(cfg.text_dim)
    bases = {
        f: _orthonormal(rng, plans[f].pooled_dim, min(TOPIC_DIM + 1, plans[f].pooled_dim))
        for f in ("visual", "audio")
    }
    min_len = max(1, math.ceil(cfg.text_steps / 2))
    splits: dict[str, list[SyntheticSample]] = {}
    for split, count in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        out = []
        for i in range(count):
            y = float(rng.uniform(-LABEL_RANGE, LABEL_RANGE))
            topic = rng.normal(size=TOPIC_DIM)
            topic /= np.linalg.norm(topic)
            length = int(rng.integers(min_len, cfg.text_steps + 1))
            text = np.zeros((cfg.text_steps, cfg.text_dim))
            # text carries a blurred reading of the label, so the other modalities add information
            y_text = y + cfg.text_noise * rng.normal()
            token = (y_text / LABEL_RANGE) * text_basis[:, 0] + cfg.topic_level * (
                text_basis[:, 1:] @ topic[: text_basis.shape[1] - 1]
            )
            text[:length] = token + cfg.jitter * rng.normal(size=(length, cfg.text_dim))
            visual, nm_v, _ = _modality(rng, y, topic, plans["visual"], bases["visual"], cfg)
            audio, nm_a, _ = _modality(rng, y, topic, plans["audio"], bases["audio"], cfg)
            label = label_to_class(y, cfg.num_classes) if cfg.task == "classification" else y
            out.append(
                SyntheticSample(
                    id=f"{split}-{i:05d}",
                    label=label,
                    text=text,
                    text_len=length,
                    audio=audio,
                    visual=visual,
                    noise_map_visual=nm_v,
                    noise_map_audio=nm_a[:, 0],
                )
            )
        splits[split] = out
    return splits


# -- perturbation --------------------------------------------------------


def random_mask(x, p: float, seed: int | np.random.Generator) -> np.ndarray:
    """Zero each element independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"mask ratio must lie in [0, 1], got {p}")
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = rng.random(arr.shape)
    return np.where(r < p, 0.0, arr)


# -- batching ------------------------------------------------------------


@dataclass
class Batch:
    text: np.ndarray
    audio: np.ndarray
    visual: np.ndarray
    text_len: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.text.shape[0]

    def replace(self, **changes) -> "Batch":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return Batch(**values)


def collate(samples: list[SyntheticSample]) -> Batch:
    if not samples:
        raise DomainError("cannot collate an empty sample list")
    return Batch(
        text=np.stack([s.text for s in samples]),
        audio=np.stack([s.audio for s in samples]),
        visual=np.stack([s.visual for s in samples]),
        text_len=np.array([s.text_len for s in samples], dtype=np.int64),
        labels=np.array([s.label for s in samples], dtype=np.float64),
        ids=[s.id for s in samples],
    )


# -- JSON Lines I/O ------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        raise SchemaError("boolean values are not allowed in numeric arrays")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        raise SchemaError("non-finite value")
    return format(v, ".17g")


def _encode_value(v) -> str:
    if isinstance(v, np.ndarray):
        if v.ndim == 1:
            return "[" + ",".join(format(float(x), ".17g") for x in v) + "]"
        return "[" + ",".join(_encode_value(r) for r in v) + "]"
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    return _fmt(v)


def _encode_record(rec: dict) -> str:
    return "{" + ",".join(f"{json.dumps(k)}:{_encode_value(rec[k])}" for k in RECORD_KEYS if k in rec) + "}"


def write_dataset(samples: list[SyntheticSample], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(_encode_record(s.to_record()))
            fh.write("\n")


def _matrix(rec: dict, key: str, lineno: int, ndim: int) -> np.ndarray:
    try:
        arr = np.array(rec[key], dtype=np.float64)
    except (ValueError, TypeError):
        raise SchemaError(f"line {lineno}: field {key!r} is not a rectangular numeric array") from None
    if arr.ndim != ndim:
        raise SchemaError(f"line {lineno}: field {key!r} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"line {lineno}: field {key!r} has non-finite values")
    return arr


def parse_record(rec: dict, lineno: int = 1) -> SyntheticSample:
    if not isinstance(rec, dict):
        raise SchemaError(f"line {lineno}: record is not an object")
    unknown = sorted(set(rec) - set(RECORD_KEYS))
    if unknown:
        raise SchemaError(f"line {lineno}: unknown field {unknown[0]!r}")
    for key in RECORD_KEYS:
        if key not in rec and key not in OPTIONAL_KEYS:
            raise SchemaError(f"line {lineno}: missing field {key!r}")
    if not isinstance(rec["id"], str):
        raise SchemaError(f"line {lineno}: field 'id' must be a string")
    label = rec["label"]
    if isinstance(label, bool) or not isinstance(label, (int, float)):
        raise SchemaError(f"line {lineno}: field 'label' must be numeric")
    text = _matrix(rec, "text", lineno, 2)
    audio = _matrix(rec, "audio", lineno, 2)
    visual = _matrix(rec, "visual", lineno, 2)
    text_len = rec["text_len"]
    if isinstance(text_len, bool) or not isinstance(text_len, int) or not 1 <= text_len <= text.shape[0]:
        raise SchemaError(f"line {lineno}: field 'text_len' must be an integer in [1, {text.shape[0]}]")
    nm_v = _matrix(rec, "noise_map_visual", lineno, 2) if "noise_map_visual" in rec else None
    nm_a = _matrix(rec, "noise_map_audio", lineno, 1) if "noise_map_audio" in rec else None
    for key, nm in (("noise_map_visual", nm_v), ("noise_map_audio", nm_a)):
        if nm is not None and (nm.min(initial=0.0) < 0 or nm.max(initial=0.0) > 1):
            raise SchemaError(f"line {lineno}: field {key!r} must lie in [0, 1]")
    return SyntheticSample(rec["id"], label, text, text_len, audio, visual, nm_v, nm_a)


def read_dataset(path) -> list[SyntheticSample]:
    samples: list[SyntheticSample] = []
    shapes = None
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc.msg}") from None
            s = parse_record(rec, lineno)
            sig = (
                s.text.shape,
                s.audio.shape,
                s.visual.shape,
                None if s.noise_map_visual is None else s.noise_map_visual.shape,
                None if s.noise_map_audio is None else s.noise_map_audio.shape,
            )
            if shapes is None:
                shapes = sig
            elif sig != shapes:
                raise SchemaError(f"line {lineno}: array shapes {sig} differ from earlier records {shapes}")
            samples.append(s)
    return samples


def write_splits(splits: dict[str, list[SyntheticSample]], directory) -> dict[str, Path]:
    directory = Path(directory)
    paths = {}
    for name, samples in splits.items():
        paths[name] = directory / f"{name}.jsonl"
        write_dataset(samples, paths[name])
    return paths


def read_splits(directory, names=("train", "val", "test")) -> dict[str, list[SyntheticSample]]:
    directory = Path(directory)
    return {name: read_dataset(directory / f"{name}.jsonl") for name in names if (directory / f"{name}.jsonl").exists()}
