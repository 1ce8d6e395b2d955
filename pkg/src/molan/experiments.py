"""Optimizer, training loop, evaluation and the ablation / sweep / diagnostic experiments."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .blocking import BlockPlan, block_average, optimal_block_params
from .data import Batch, ConfigError, GeneratorConfig, SyntheticSample, collate, generate, random_mask
from .metrics import MetricsReport, compute
from .model import (
    VARIANTS,
    ModelConfig,
    MoLANPlusModel,
    compute_loss,
    forward,
    init,
    make_variant,
)
from .numerics import Parameter, Tape, grad_check
from .objectives import alignment_uniformity

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged or hit a non-finite gradient."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 16
    seed: int = 1
    seeds: int = 5
    patience: int = 10

    def __post_init__(self):
        if not self.lr > 0 or self.weight_decay < 0 or not self.eps > 0:
            raise ConfigError("lr and eps must be positive, weight_decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.epochs < 0 or self.seeds < 1 or self.patience < 1:
            raise ConfigError("epochs must be >= 0, seeds and patience >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (contrastive negatives)")

    def seed_list(self) -> list[int]:
        return [self.seed + i for i in range(self.seeds)]


# -- AdamW ---------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: list[Parameter], grads: list[np.ndarray | None], state: AdamWState, cfg: TrainConfig) -> AdamWState:
    """One AdamW update in place: decay the weights, then apply the bias-corrected Adam step."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for p, g in zip(params, grads):
        g = np.zeros_like(p.data) if g is None else g
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1.0 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = (1.0 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        decayed = p.data * (1.0 - cfg.lr * cfg.weight_decay)
        p.data = decayed - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


# -- evaluation ----------------------------------------------------------


def as_batch(samples) -> Batch:
    return samples if isinstance(samples, Batch) else collate(list(samples))


def _take(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(
        batch.text[idx], batch.audio[idx], batch.visual[idx], batch.text_len[idx], batch.labels[idx],
        [batch.ids[i] for i in idx] if batch.ids else [],
    )


def _chunks(n: int, size: int) -> list[np.ndarray]:
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def predict(model: MoLANPlusModel, samples, batch_size: int = 256) -> np.ndarray:
    """Predictions without recording a tape: (N,) for regression, (N, C) logits otherwise."""
    batch = as_batch(samples)
    outs = [forward(model, _take(batch, idx)).prediction.data for idx in _chunks(len(batch), batch_size)]
    pred = np.concatenate(outs, axis=0)
    return pred[:, 0] if model.config.task == "regression" else pred


def evaluate(model: MoLANPlusModel, samples) -> MetricsReport:
    batch = as_batch(samples)
    return compute(predict(model, batch), batch.labels, model.config.task)


def _selection_score(model: MoLANPlusModel, report: MetricsReport) -> float:
    # lower is better
    return report.mae if model.config.task == "regression" else -report.accuracy


# -- sigma diagnostics ---------------------------------------------------


def ground_truth_grid(noise_map: np.ndarray | None, shape: tuple[int, int], plan: BlockPlan) -> np.ndarray | None:
    """Re-express a generator noise map on ``plan``'s block grid by area averaging."""
    if noise_map is None:
        return None
    nm = np.asarray(noise_map, dtype=np.float64)
    if nm.ndim == 1:
        nm = nm[:, None]
    m, n = shape
    gr, gc = nm.shape
    elements = np.repeat(np.repeat(nm, m // gr, axis=0), n // gc, axis=1)
    if plan.source_shape != (m, n):
        padded = np.zeros(plan.source_shape)
        padded[:m, :n] = elements
        elements = padded
    return block_average(elements, plan)


def sigma_rows(model: MoLANPlusModel, samples: list[SyntheticSample], batch_size: int = 256) -> list[tuple]:
    """(sample_id, modality, p, q, sigma, ground_truth_noise or None) for every block."""
    rows = []
    batch = collate(samples)
    for idx in _chunks(len(samples), batch_size):
        out = forward(model, _take(batch, idx))
        for modality in ("visual", "audio"):
            sigma = out.edited[modality].sigma
            plan = model.plans[modality]
            shape = model.config.shape(modality)
            for local, i in enumerate(idx):
                s = samples[i]
                gt = ground_truth_grid(getattr(s, f"noise_map_{modality}"), shape, plan)
                for p in range(plan.grid_rows):
                    for q in range(plan.grid_cols):
                        rows.append((s.id, modality, p, q, float(sigma[local, p, q]),
                                     None if gt is None else float(gt[p, q])))
    return rows


def sigma_summary(model: MoLANPlusModel, samples: list[SyntheticSample]) -> dict:
    rows = [r for r in sigma_rows(model, samples) if r[5] is not None]
    if not rows:
        return {}
    sigma = np.array([r[4] for r in rows])
    gt = np.array([r[5] for r in rows])
    out = {"mean_sigma": float(sigma.mean())}
    for name, sel in (("signal", gt == 0.0), ("strong", gt == 1.0), ("weak", (gt > 0) & (gt < 1))):
        out[f"mean_sigma_{name}"] = float(sigma[sel].mean()) if sel.any() else None
    if np.ptp(sigma) > 0 and np.ptp(gt) > 0:
        out["spearman"] = float(spearmanr(sigma, gt).statistic)
    else:
        out["spearman"] = None
    return out


# -- training ------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    epochs: list[dict]
    metrics: dict[str, dict]
    sigma: dict
    checksum: str
    best_epoch: int
    wall_time: float = 0.0
    version: str = __version__

    def to_dict(self, include_wall_time: bool = True) -> dict:
        d = asdict(self)
        if not include_wall_time:
            d.pop("wall_time")
        return d

    def to_json(self, include_wall_time: bool = False) -> str:
        return json.dumps(self.to_dict(include_wall_time), sort_keys=True, indent=2)


def train(
    model: MoLANPlusModel,
    splits: dict[str, list[SyntheticSample]],
    cfg: TrainConfig,
    config_echo: dict | None = None,
) -> RunRecord:
    """Minibatch AdamW with seeded shuffling; restores the best validation parameters."""
    if not splits.get("train"):
        raise TrainingError("training split is empty")
    start = time.perf_counter()
    train_batch = collate(splits["train"])
    val = splits.get("val") or None
    val_batch = collate(val) if val else None
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    params = model.parameters()
    n = len(train_batch)
    n_batches = max(1, math.ceil(n / cfg.batch_size))

    best_state = model.state()
    best_score = math.inf
    best_epoch = 0
    wait = 0
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        sums = {"task": 0.0, "contrast_v": 0.0, "contrast_a": 0.0, "total": 0.0}
        # near-equal splits keep every batch at >= 2 samples for the contrastive negatives
        for idx in np.array_split(perm, n_batches):
            batch = _take(train_batch, idx)
            model.zero_grad()
            with Tape() as tape:
                report = compute_loss(model, batch)
            total = report.total.item()
            if not math.isfinite(total) or total > 1e6:
                raise TrainingError(f"training diverged at epoch {epoch} (loss {total})")
            tape.backward(report.total)
            adamw_step(params, [p.grad for p in params], state, cfg)
            for k, v in report.as_floats().items():
                sums[k] += v * len(idx)
        entry = {k: v / n for k, v in sums.items()}
        entry["epoch"] = epoch
        if val_batch is not None:
            score = _selection_score(model, evaluate(model, val_batch))
            entry["val_score"] = score
        else:
            score = entry["total"]
        history.append(entry)
        log.debug("epoch %d: %s", epoch, entry)
        if score < best_score:
            best_score, best_epoch, wait = score, epoch, 0
            best_state = model.state()
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    model.load_state(best_state)

    metrics = {name: evaluate(model, samples).to_dict() for name, samples in splits.items() if samples}
    probe = splits.get("test") or splits.get("val") or splits["train"]
    echo = config_echo if config_echo is not None else {
        "model": model.config.to_dict(), "train": asdict(cfg), "seed": model.seed,
    }
    return RunRecord(
        config=echo,
        epochs=history,
        metrics=metrics,
        sigma=sigma_summary(model, probe),
        checksum=model.checksum(),
        best_epoch=best_epoch,
        wall_time=time.perf_counter() - start,
    )


def loss_grad_check(model: MoLANPlusModel, batch: Batch, h: float = 1e-6) -> float:
    """Max relative error of the total training loss gradient against central differences."""
    return grad_check(lambda: compute_loss(model, batch).total, model.parameters(), h)


# -- aggregation ---------------------------------------------------------


def aggregate(values) -> dict:
    """Mean and sample standard deviation; exact under reordering."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        return {"mean": None, "std": None, "n": 0}
    mean = math.fsum(vals) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else 0.0
    return {"mean": mean, "std": std, "n": n}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- ablations -----------------------------------------------------------


def _run_variant(args) -> tuple[str, int, RunRecord, MoLANPlusModel]:
    variant, seed, model_cfg, train_cfg, splits = args
    base = init(replace(model_cfg, variant="full"), seed)
    model = make_variant(base, variant) if variant != "full" else base
    record = train(model, splits, replace(train_cfg, seed=seed))
    return variant, seed, record, model


def _metric_of(record: RunRecord, task: str) -> float:
    m = record.metrics.get("test") or record.metrics.get("val") or record.metrics["train"]
    return m["mae"] if task == "regression" else m["accuracy"]


@dataclass
class AblationTable:
    variants: list[str]
    seeds: list[int]
    metric: str
    values: dict[str, list[float]]
    records: dict[str, list[RunRecord]]
    models: dict[str, list[MoLANPlusModel]] = field(default_factory=dict)

    def summary(self) -> dict[str, dict]:
        return {v: aggregate(self.values[v]) for v in self.variants}

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant"] + [f"seed_{s}" for s in self.seeds] + ["mean", "std"])
        for v in self.variants:
            agg = aggregate(self.values[v])
            w.writerow([v] + [format(x, ".17g") for x in self.values[v]]
                       + [format(agg["mean"], ".17g"), format(agg["std"], ".17g")])
        return buf.getvalue()


def run_ablations(
    splits: dict[str, list[SyntheticSample]],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    variants=VARIANTS,
    workers: int = 1,
) -> AblationTable:
    """Train every variant on the same data and seeds; variants share initial parameters."""
    seeds = train_cfg.seed_list()
    jobs = [(v, s, model_cfg, train_cfg, splits) for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_variant, jobs))
    else:
        results = [_run_variant(j) for j in jobs]
    records = {v: [] for v in variants}
    models = {v: [] for v in variants}
    for v, _, rec, model in results:
        records[v].append(rec)
        models[v].append(model)
    values = {v: [_metric_of(r, model_cfg.task) for r in records[v]] for v in variants}
    metric = "test_mae" if model_cfg.task == "regression" else "test_accuracy"
    return AblationTable(list(variants), seeds, metric, values, records, models)


# -- pilot-study masking -------------------------------------------------

MASKABLE = ("text", "audio", "visual")


def _acc2(model: MoLANPlusModel, batch: Batch) -> float:
    report = evaluate(model, batch)
    return report.acc2_has0 if model.config.task == "regression" else report.accuracy


def mask_sweep(
    model: MoLANPlusModel,
    samples,
    ratios,
    modalities=("audio", "visual"),
    seed: int = 0,
    repeats: int = 1,
) -> list[dict]:
    """Acc2 after randomly zeroing a fraction of the selected modalities' features."""
    ratios = [float(r) for r in ratios]
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ConfigError("mask ratios must lie in [0, 1]")
    bad = [m for m in modalities if m not in MASKABLE]
    if bad:
        raise ConfigError(f"unknown modality {bad[0]!r}")
    batch = as_batch(samples)
    rows = []
    for ri, ratio in enumerate(ratios):
        scores = []
        for rep in range(repeats):
            changes = {}
            for mi, name in enumerate(MASKABLE):
                if name in modalities:
                    rng = np.random.default_rng([seed, ri, mi, rep])
                    changes[name] = random_mask(getattr(batch, name), ratio, rng)
            scores.append(_acc2(model, batch.replace(**changes)))
        rows.append({"ratio": ratio, "acc2": math.fsum(scores) / len(scores), "modalities": "+".join(modalities)})
    return rows


# -- block sweep ---------------------------------------------------------


def block_candidates(model_cfg: ModelConfig, candidates: dict[str, list]) -> tuple[dict[str, list], dict]:
    """Candidate list per modality with the balanced-factor optimum always included."""
    out = {}
    v_opt = optimal_block_params(*model_cfg.shape("visual"), "two_dimensional")
    a_opt = optimal_block_params(*model_cfg.shape("audio"), "one_dimensional")
    optimum = {"visual": (v_opt.block_rows, v_opt.block_cols), "audio": a_opt.block_cols}
    for modality in ("visual", "audio"):
        sizes = [tuple(s) if modality == "visual" else int(s) for s in candidates.get(modality, [])]
        if optimum[modality] not in sizes:
            sizes.append(optimum[modality])
        out[modality] = sizes
    return out, optimum


def block_sweep(
    splits: dict[str, list[SyntheticSample]],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    candidates: dict[str, list],
) -> list[dict]:
    """Train/evaluate with overridden block sizes; one row per candidate."""
    sizes, optimum = block_candidates(model_cfg, candidates)
    rows = []
    for modality in ("visual", "audio"):
        for size in sizes[modality]:
            key = "visual_block" if modality == "visual" else "audio_block"
            cfg = replace(model_cfg, **{key: size})
            cfg.plans()  # validates divisibility
            values = []
            for seed in train_cfg.seed_list():
                rec = train(init(cfg, seed), splits, replace(train_cfg, seed=seed))
                values.append(_metric_of(rec, cfg.task))
            agg = aggregate(values)
            rows.append({
                "modality": modality,
                "size": "x".join(map(str, size)) if isinstance(size, tuple) else str(size),
                "optimal": size == optimum[modality],
                "mean": agg["mean"],
                "std": agg["std"],
            })
    return rows


# -- exports and reports ------------------------------------------------


def provenance_header(config: dict) -> str:
    return f"# molan {__version__} config={json.dumps(config, sort_keys=True, separators=(',', ':'))}\n"


def sigma_map_csv(model: MoLANPlusModel, samples: list[SyntheticSample], config: dict | None = None) -> str:
    buf = io.StringIO()
    if config is not None:
        buf.write(provenance_header(config))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "modality", "p", "q", "sigma", "ground_truth_noise"])
    for sid, modality, p, q, sigma, gt in sigma_rows(model, samples):
        w.writerow([sid, modality, p, q, format(sigma, ".17g"), "" if gt is None else format(gt, ".17g")])
    return buf.getvalue()


def sigma_map_export(model: MoLANPlusModel, samples: list[SyntheticSample], path, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(sigma_map_csv(model, samples, config), encoding="utf-8")
    return path


def embedding_pairs(model: MoLANPlusModel, samples) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Temporally pooled (denoised, original) embeddings per edited modality."""
    batch = as_batch(samples)
    out = forward(model, batch)
    return {
        f: (out.edited[f].denoised.data.mean(axis=1), out.originals[f].data.mean(axis=1))
        for f in ("visual", "audio")
    }


def alignment_scores(model: MoLANPlusModel, samples) -> dict:
    pairs = embedding_pairs(model, samples)
    align, unif, unif_d = [], [], []
    for d, o in pairs.values():
        a, u = alignment_uniformity(d, o)
        align.append(a)
        unif.append(u)
        unif_d.append(alignment_uniformity(o, d)[1])
    return {
        "alignment": math.fsum(align) / len(align),
        "uniformity": math.fsum(unif) / len(unif),
        "uniformity_denoised": math.fsum(unif_d) / len(unif_d),
    }


def alignment_report(full: MoLANPlusModel, no_dc: MoLANPlusModel, samples) -> dict[str, dict]:
    return {"full": alignment_scores(full, samples), "no_DC": alignment_scores(no_dc, samples)}


def splits_for(gen_cfg: GeneratorConfig) -> dict[str, list[SyntheticSample]]:
    return generate(gen_cfg)
