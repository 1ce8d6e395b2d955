"""MoLAN+ sentiment model: encoders, block editing, masked attention, fusion head."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attention import (
    AttentionMask,
    AttentionParams,
    BlockMask,
    build_block_mask,
    cross_attention,
    self_attention,
    to_key_mask,
)
from .blocking import BlockingMode, BlockPlan, optimal_block_params, plan_with_sizes
from .data import Batch, ConfigError
from .editing import DenoiseHead, EditedBundle, molan_forward
from .numerics import (
    DimensionError,
    Parameter,
    Tensor,
    concat,
    linear,
    masked_mean,
    tanh,
)
from .objectives import ContrastiveConfig, LossReport, contrastive_loss, task_loss, total_loss

MODALITIES = ("text", "audio", "visual")
VARIANTS = ("full", "no_DE", "no_MB", "no_NC", "no_DC")

CHECKPOINT_MAGIC = b"MOLANCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 16
    shared_dim: int = 32
    heads: int = 1
    theta: float = 0.3
    tau: float = 0.1
    variant: str = "full"
    task: str = "regression"
    num_classes: int = 7
    text_steps: int = 8
    text_dim: int = 12
    audio_steps: int = 16
    audio_dim: int = 8
    visual_steps: int = 12
    visual_dim: int = 16
    rectify: bool = True
    pad_blocks: bool = False
    visual_block: tuple[int, int] | None = None
    audio_block: int | None = None

    def __post_init__(self):
        for name in ("model_dim", "shared_dim", "heads", "text_steps", "text_dim",
                     "audio_steps", "audio_dim", "visual_steps", "visual_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigError("classification needs at least two classes")
        if self.visual_block is not None:
            object.__setattr__(self, "visual_block", tuple(int(v) for v in self.visual_block))

    @property
    def output_dim(self) -> int:
        return 1 if self.task == "regression" else self.num_classes

    def shape(self, modality: str) -> tuple[int, int]:
        return getattr(self, f"{modality}_steps"), getattr(self, f"{modality}_dim")

    def plans(self) -> dict[str, BlockPlan]:
        """Block plans for the editable modalities under this variant."""
        vshape, ashape = self.shape("visual"), self.shape("audio")
        one_d = BlockingMode.ONE_D
        visual_mode = one_d if self.variant == "no_MB" else BlockingMode.TWO_D
        if self.visual_block is not None:
            sizes = self.visual_block if visual_mode is BlockingMode.TWO_D else self.visual_block[0]
            visual = plan_with_sizes(vshape, visual_mode, sizes)
        else:
            visual = optimal_block_params(*vshape, visual_mode, pad=self.pad_blocks)
        if self.audio_block is not None:
            audio = plan_with_sizes(ashape, one_d, self.audio_block)
        else:
            audio = optimal_block_params(*ashape, one_d, pad=self.pad_blocks)
        return {"visual": visual, "audio": audio}

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["visual_block"] is not None:
            d["visual_block"] = list(d["visual_block"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown model config key {unknown[0]!r}")
        return cls(**d)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``cfg``."""
    d, ds = cfg.model_dim, cfg.shared_dim
    plans = cfg.plans()
    encoders = sum(cfg.shape(f)[1] * d + d for f in MODALITIES)
    heads = sum(plans[f].pooled_dim * ds + cfg.text_dim * ds for f in ("visual", "audio"))
    attention = (6 + 3) * 3 * d * d
    fuse = 3 * d * d + d
    mlp = d * d + d + d * cfg.output_dim + cfg.output_dim
    return encoders + heads + attention + fuse + mlp


@dataclass
class MoLANPlusModel:
    config: ModelConfig
    seed: int
    params: dict[str, Parameter]
    plans: dict[str, BlockPlan]
    heads: dict[str, DenoiseHead] = field(default_factory=dict)
    cross: dict[tuple[str, str], AttentionParams] = field(default_factory=dict)
    self_attn: dict[str, AttentionParams] = field(default_factory=dict)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            self.params[name].assign(value)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


def _param_shapes(cfg: ModelConfig, plans: dict[str, BlockPlan]) -> list[tuple[str, tuple[int, ...], bool]]:
    d, ds = cfg.model_dim, cfg.shared_dim
    shapes: list[tuple[str, tuple[int, ...], bool]] = []
    for f in MODALITIES:
        shapes.append((f"encoder.{f}.weight", (cfg.shape(f)[1], d), False))
        shapes.append((f"encoder.{f}.bias", (d,), True))
    for f in ("visual", "audio"):
        shapes.append((f"denoise.{f}.proj_block", (plans[f].pooled_dim, ds), False))
        shapes.append((f"denoise.{f}.proj_text", (cfg.text_dim, ds), False))
    for q in MODALITIES:
        for k in MODALITIES:
            if k != q:
                for role in ("query", "key", "value"):
                    shapes.append((f"cross.{q}.{k}.{role}", (d, d), False))
    for f in MODALITIES:
        for role in ("query", "key", "value"):
            shapes.append((f"self.{f}.{role}", (d, d), False))
    shapes.append(("fuse.weight", (3 * d, d), False))
    shapes.append(("fuse.bias", (d,), True))
    shapes.append(("head.hidden.weight", (d, d), False))
    shapes.append(("head.hidden.bias", (d,), True))
    shapes.append(("head.out.weight", (d, cfg.output_dim), False))
    shapes.append(("head.out.bias", (cfg.output_dim,), True))
    return shapes


def _wire(cfg: ModelConfig, seed: int, params: dict[str, Parameter], plans) -> MoLANPlusModel:
    p = params
    heads = {
        f: DenoiseHead(p[f"denoise.{f}.proj_block"], p[f"denoise.{f}.proj_text"])
        for f in ("visual", "audio")
    }
    cross = {
        (q, k): AttentionParams(p[f"cross.{q}.{k}.query"], p[f"cross.{q}.{k}.key"], p[f"cross.{q}.{k}.value"], cfg.heads)
        for q in MODALITIES
        for k in MODALITIES
        if k != q
    }
    self_attn = {
        f: AttentionParams(p[f"self.{f}.query"], p[f"self.{f}.key"], p[f"self.{f}.value"], cfg.heads)
        for f in MODALITIES
    }
    return MoLANPlusModel(cfg, seed, params, plans, heads, cross, self_attn)


def init(config: ModelConfig, seed: int) -> MoLANPlusModel:
    """Weights uniform in +-1/sqrt(fan_in) from a seeded generator; biases zero."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("init expects a ModelConfig")
    rng = np.random.default_rng(seed)
    plans = config.plans()
    params: dict[str, Parameter] = {}
    for name, shape, is_bias in _param_shapes(config, plans):
        if is_bias:
            value = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Parameter(name, value)
    return _wire(config, int(seed), params, plans)


def make_variant(model: MoLANPlusModel, flag: str) -> MoLANPlusModel:
    """Same parameters, different ablation wiring.

    Parameters whose shape depends on the block plan (the ``no_MB`` visual
    block projection) are freshly drawn from the model's seed.
    """
    if flag not in VARIANTS:
        raise ConfigError(f"unknown variant {flag!r}; expected one of {VARIANTS}")
    fresh = init(replace(model.config, variant=flag), model.seed)
    for name, p in fresh.params.items():
        old = model.params.get(name)
        if old is not None and old.shape == p.shape:
            p.assign(old.data)
    return fresh


@dataclass
class ForwardOutput:
    prediction: Tensor
    edited: dict[str, EditedBundle]
    originals: dict[str, Tensor]
    block_masks: dict[str, BlockMask]
    key_masks: dict[str, AttentionMask]


def _check_batch(cfg: ModelConfig, batch: Batch) -> None:
    for f in MODALITIES:
        arr = getattr(batch, f)
        if arr.ndim != 3 or arr.shape[1:] != cfg.shape(f):
            raise DimensionError(f"{f} features have shape {arr.shape}, model expects (batch,) + {cfg.shape(f)}")
    n = batch.text.shape[0]
    if batch.audio.shape[0] != n or batch.visual.shape[0] != n or batch.text_len.shape != (n,):
        raise DimensionError("batch members disagree on batch size")


def forward(model: MoLANPlusModel, batch: Batch) -> ForwardOutput:
    cfg = model.config
    _check_batch(cfg, batch)
    p = model.params
    n = len(batch)
    text, audio, visual = Tensor(batch.text), Tensor(batch.audio), Tensor(batch.visual)
    text_mask = AttentionMask.from_lengths(batch.text_len, cfg.text_steps)

    edited_v, edited_a = molan_forward(
        text, visual, audio, model.heads, model.plans,
        text_keep=text_mask.keep, uniform=cfg.variant == "no_DE", rectify=cfg.rectify,
    )
    edited = {"visual": edited_v, "audio": edited_a}
    block_masks = {f: build_block_mask(edited[f].strengths, cfg.theta, model.plans[f]) for f in edited}
    if cfg.variant == "no_NC":
        key_masks = {f: AttentionMask.all_kept(n, cfg.shape(f)[0]) for f in edited}
    else:
        key_masks = {f: to_key_mask(block_masks[f], cfg.shape(f)[0]) for f in edited}
    key_masks["text"] = text_mask

    inputs = {"text": text, "audio": edited_a.denoised, "visual": edited_v.denoised}
    encoded = {
        f: tanh(linear(inputs[f], p[f"encoder.{f}.weight"], p[f"encoder.{f}.bias"]))
        for f in MODALITIES
    }
    pooled = []
    for q in MODALITIES:
        acc = encoded[q]
        for k in MODALITIES:
            if k != q:
                acc = acc + cross_attention(encoded[q], encoded[k], key_masks[k], model.cross[(q, k)], residual=False)
        refined = self_attention(acc, key_masks[q], model.self_attn[q])
        pooled.append(masked_mean(refined, key_masks[q].keep, axis=1))
    fused = linear(concat(pooled, axis=-1), p["fuse.weight"], p["fuse.bias"])
    hidden = tanh(linear(fused, p["head.hidden.weight"], p["head.hidden.bias"]))
    prediction = linear(hidden, p["head.out.weight"], p["head.out.bias"])
    return ForwardOutput(prediction, edited, {"visual": visual, "audio": audio}, block_masks, key_masks)


def compute_loss(model: MoLANPlusModel, batch: Batch, output: ForwardOutput | None = None) -> LossReport:
    cfg = model.config
    out = output if output is not None else forward(model, batch)
    task = task_loss(out.prediction, batch.labels, cfg.task)
    if cfg.variant == "no_DC":
        return total_loss(task, Tensor(0.0), Tensor(0.0))
    contrast = ContrastiveConfig(cfg.tau)
    c_v = contrastive_loss(out.edited["visual"].denoised, out.originals["visual"], contrast)
    c_a = contrastive_loss(out.edited["audio"].denoised, out.originals["audio"], contrast)
    return total_loss(task, c_v, c_a)


# -- checkpoints ---------------------------------------------------------


class CheckpointError(ValueError):
    """Checkpoint file is malformed or of an unsupported version."""


def checkpoint_bytes(model: MoLANPlusModel, extra: dict | None = None) -> bytes:
    """Binary checkpoint: header, config echo, then named little-endian float64 tensors."""
    header = {"config": model.config.to_dict(), "seed": model.seed}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: MoLANPlusModel, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, extra))


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def load_checkpoint_bytes(data: bytes) -> tuple[MoLANPlusModel, dict]:
    buf = io.BytesIO(data)
    if _read(buf, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a MoLAN+ checkpoint")
    version, blob_len = struct.unpack("<II", _read(buf, 8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(_read(buf, blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("corrupt checkpoint header") from None
    cfg = ModelConfig.from_dict(header["config"])
    model = init(cfg, header["seed"])
    (count,) = struct.unpack("<I", _read(buf, 4))
    if count != len(model.params):
        raise CheckpointError(f"checkpoint has {count} parameters, config implies {len(model.params)}")
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read(buf, 2))
        name = _read(buf, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read(buf, 1))
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(_read(buf, 8 * size), dtype="<f8").reshape(shape)
        if name not in model.params:
            raise CheckpointError(f"unexpected parameter {name!r}")
        model.params[name].assign(values.astype(np.float64))
    if buf.read(1):
        raise CheckpointError("trailing bytes after parameters")
    return model, header.get("extra", {})


def load_checkpoint(path, with_extra: bool = False):
    """Model stored at ``path``; with ``with_extra`` also the stored extra header."""
    model, extra = load_checkpoint_bytes(Path(path).read_bytes())
    return (model, extra) if with_extra else model
