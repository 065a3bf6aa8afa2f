"""End-to-end orchestration of alternate slimming and the one-step baseline."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, generate_synthetic_dataset, load_dataset, patch_rows, proxy_targets
from .depgraph import EMBEDDING, build_dependency_graph, make_plan
from .distill import (BOTTLENECK_ALIGN, EMBEDDING_ALIGN, FINAL_ALIGN, AdamState, AlignConfig,
                      adam_step, run_alignment)
from .encoder import Encoder, EncoderConfig, _forward, build_encoder, count_params_macs, embed
from .errors import AltSlimError, CorruptCheckpoint, CorruptDataset, InvalidConfig, InvalidShape, PhaseError
from .importance import Criterion, Targets, parameter_importance, select_pruning_plan
from .pruner import apply_plan
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ratio: float = 0.5
    criterion: str = "disturbed_taylor"
    sigma: float = 0.01
    bottleneck_mode: str = "global"
    norm: str = "gaussian"
    # total aligning epochs, split evenly between the two aligning phases
    epochs: int = 20
    N: int = 10
    batch_size: int = 4
    lr0: float = 1e-4
    patience: int = 4
    alpha_mode: str = "dynamic"
    intermediate_align: bool = True
    data_n: int = 2000
    data_seed: int = 0
    pretrain_epochs: int = 4
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 16
    pretrain_noise: float = 0.1
    scoring_batch: int = 64
    seed: int = 0
    output_dir: str = "runs"

    def validate(self) -> None:
        self.encoder.validate()
        if not 0.0 <= self.ratio < 1.0:
            raise InvalidConfig(f"ratio must lie in [0, 1), got {self.ratio}")
        if self.data_n < self.batch_size:
            raise InvalidConfig("data_n must be >= batch_size")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise InvalidConfig("epoch counts must be >= 0")
        Criterion(self.criterion, self.sigma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "encoder" in d:
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same experiment with every seed (model, data, training) set from ``seed``."""
        return self.replace(seed=seed, data_seed=seed,
                            encoder=dataclasses.replace(self.encoder, seed=seed))

    def digest(self, keys=None) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        if keys is not None:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def phase_epochs(self) -> tuple:
        first = self.epochs // 2
        return first, self.epochs - first


_DATA_KEYS = ("data_n", "data_seed")
_TEACHER_KEYS = _DATA_KEYS + ("encoder", "pretrain_epochs", "pretrain_lr",
                              "pretrain_batch_size", "pretrain_noise", "seed")


@dataclass
class EvalReport:
    params: int
    macs: int
    fidelity_mse: float
    cosine: float
    probe_iou: float
    teacher_probe_iou: float
    wall_clock: float = 0.0

    def deterministic_view(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        return d


@dataclass
class RunResult:
    method: str
    encoder: Encoder
    checkpoint: Path
    report: EvalReport
    logs: dict
    phases: list
    run_dir: Path


# ---------------------------------------------------------------------------
# shared assets


def dataset_dir(config: PipelineConfig) -> Path:
    return Path(config.output_dir) / "shared" / f"data-{config.digest(_DATA_KEYS)}"


def teacher_path(config: PipelineConfig) -> Path:
    return Path(config.output_dir) / "shared" / f"teacher-{config.digest(_TEACHER_KEYS)}.slim"


def ensure_dataset(config: PipelineConfig) -> Dataset:
    path = dataset_dir(config)
    if (path / "manifest.json").exists():
        try:
            return load_dataset(path)
        except CorruptDataset:
            log.warning("regenerating corrupt dataset at %s", path)
    return generate_synthetic_dataset(path, config.data_seed, config.data_n,
                                      config.encoder.image_size, config.encoder.in_channels)


def pretrain_teacher(config: PipelineConfig, dataset: Dataset):
    """Train the dense encoder on a denoising proxy; returns ``(encoder, losses)``.

    The proxy asks the neck output to reproduce each patch's clean pixels and
    mask from a noised image.  ``losses[0]`` is the held-out proxy loss before
    training and ``losses[i]`` the loss after epoch ``i``.
    """
    model = build_encoder(config.encoder)
    p = config.encoder.patch_size
    out_dim = config.encoder.out_dim
    train_y = proxy_targets(dataset.train_images, dataset.train_masks, p, out_dim)
    val_y = proxy_targets(dataset.val_images, dataset.val_masks, p, out_dim)

    def proxy_loss(enc):
        t = embed(enc, dataset.val_images)
        return float(np.mean((t.astype(np.float64) - val_y) ** 2))

    losses = [proxy_loss(model)]
    if config.pretrain_epochs == 0:
        return model, losses
    rng = np.random.default_rng(config.seed + 7919)
    model = model.trainable()
    state = AdamState()
    train = dataset.train_images
    bs = config.pretrain_batch_size
    for _ in range(config.pretrain_epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(train), bs):
            idx = np.sort(order[i:i + bs])
            noisy = train[idx] + rng.normal(0.0, config.pretrain_noise, size=train[idx].shape)
            x = Tensor._wrap(noisy.astype(T.default_dtype()))
            t = _forward(model, x).t
            loss = T.mse(t, Tensor._wrap(train_y[idx]))
            T.backward(loss)
            arrays, state = adam_step(model.arrays(), model.grads(), state, config.pretrain_lr)
            model = model.with_arrays(arrays, requires_grad=True)
        losses.append(proxy_loss(model))
    return model.frozen(), losses


def ensure_teacher(config: PipelineConfig, dataset: Dataset) -> Encoder:
    path = teacher_path(config)
    if path.exists():
        try:
            return load_checkpoint(path)
        except CorruptCheckpoint:
            log.warning("re-training teacher; corrupt checkpoint at %s", path)
    teacher, losses = pretrain_teacher(config, dataset)
    save_checkpoint(teacher, path, phase="v0")
    path.with_suffix(".json").write_text(json.dumps({"proxy_loss": losses}, indent=1))
    return load_checkpoint(path)


def prepare_assets(config: PipelineConfig):
    config.validate()
    dataset = ensure_dataset(config)
    return dataset, ensure_teacher(config, dataset)


# ---------------------------------------------------------------------------
# scoring and evaluation


def score_encoder(encoder: Encoder, dataset: Dataset, config: PipelineConfig,
                  teacher: Encoder | None = None):
    """Importance of ``encoder``; disturbed Taylor targets the teacher's embedding (default: its own)."""
    batch = dataset.train_images[: config.scoring_batch]
    criterion = Criterion(config.criterion, config.sigma, config.seed)
    targets = None
    if config.criterion in ("taylor", "hessian_surrogate"):
        masks = dataset.train_masks[: config.scoring_batch]
        targets = Targets.labels(proxy_targets(batch, masks, config.encoder.patch_size,
                                               config.encoder.out_dim))
    elif config.criterion == "disturbed_taylor":
        targets = Targets.embeddings(embed(teacher or encoder, batch))
    return parameter_importance(encoder, batch, targets, criterion)


class LinearProbe:
    """Least-squares map from a patch embedding to that patch's mask pixels."""

    def __init__(self, patch: int):
        self.patch = patch
        self.weights = None

    @staticmethod
    def _design(t):
        rows = t.reshape(-1, t.shape[-1]).astype(np.float64)
        return np.hstack([rows, np.ones((len(rows), 1))])

    def fit(self, embeddings: np.ndarray, masks: np.ndarray) -> "LinearProbe":
        y = patch_rows(masks, self.patch).reshape(-1, self.patch ** 2).astype(np.float64)
        self.weights = np.linalg.lstsq(self._design(embeddings), y, rcond=None)[0]
        return self

    def predict(self, embeddings: np.ndarray, image_size: int) -> np.ndarray:
        n, L, _ = embeddings.shape
        p = self.patch
        g = image_size // p
        pred = (self._design(embeddings) @ self.weights).reshape(n, g, g, p, p)
        return pred.transpose(0, 1, 3, 2, 4).reshape(n, image_size, image_size)

    def mean_iou(self, embeddings, masks, threshold: float = 0.5) -> float:
        pred = self.predict(embeddings, masks.shape[-1]) >= threshold
        truth = masks >= 0.5
        inter = (pred & truth).sum(axis=(1, 2))
        union = (pred | truth).sum(axis=(1, 2))
        iou = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
        return float(iou.mean())


def evaluate(student: Encoder, teacher: Encoder, dataset: Dataset, probe_fit_n: int = 256) -> EvalReport:
    start = time.perf_counter()
    if student.config.out_dim != teacher.config.out_dim:
        raise InvalidShape("student and teacher embeddings differ in width")
    val = dataset.val_images
    ts = embed(student, val).astype(np.float64)
    tt = embed(teacher, val).astype(np.float64)
    mse = float(np.mean((ts - tt) ** 2))
    a = ts.reshape(len(ts), -1)
    b = tt.reshape(len(tt), -1)
    cos = (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-12)
    fit_imgs = dataset.train_images[:probe_fit_n]
    probe = LinearProbe(teacher.config.patch_size).fit(
        embed(teacher, fit_imgs), dataset.train_masks[:probe_fit_n])
    params, macs = count_params_macs(student)
    return EvalReport(params=params, macs=macs, fidelity_mse=mse, cosine=float(cos.mean()),
                      probe_iou=probe.mean_iou(ts, dataset.val_masks),
                      teacher_probe_iou=probe.mean_iou(tt, dataset.val_masks),
                      wall_clock=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# pipelines


def _align_config(config: PipelineConfig, phase: str, epochs: int) -> AlignConfig:
    return AlignConfig(phase=phase, alpha_mode=config.alpha_mode, N=config.N, epochs=epochs,
                       batch_size=config.batch_size, lr0=config.lr0, patience=config.patience,
                       seed=config.seed, intermediate=config.intermediate_align)


def _run_dir(config: PipelineConfig, method: str) -> Path:
    path = Path(config.output_dir) / "runs" / f"{method}-{config.digest()}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    return path


class _Phase:
    def __init__(self, label):
        self.label = label

    def __enter__(self):
        log.info("phase %s", self.label)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, (AltSlimError, ValueError, ArithmeticError)) \
                and not isinstance(exc, PhaseError):
            raise PhaseError(self.label, exc) from exc
        return False


def _plan_summary(plan) -> dict:
    return {"target": plan.target, "removed": len(plan.remove), "dims": plan.dims.to_dict()}


def _finish(method, config, run_dir, final, v0, dataset, logs, phases) -> RunResult:
    ckpt = save_checkpoint(final, run_dir / "final.slim", phase=method)
    report = evaluate(final, v0, dataset)
    for name, tl in logs.items():
        (run_dir / f"{name}.jsonl").write_text(tl.to_jsonl())
    summary = {"method": method, "phases": phases, "report": asdict(report),
               "config_digest": config.digest(), "final_digest": final.digest()}
    (run_dir / "report.json").write_text(json.dumps(summary, indent=1))
    try:
        from .plots import plot_training_curves

        plot_training_curves(logs, run_dir / "curves.png", title=method)
    except ImportError:
        log.warning("matplotlib unavailable; skipping curve figure")
    return RunResult(method, final, ckpt, report, logs, phases, run_dir)


def run_alternate_slimming(config: PipelineConfig, assets=None) -> RunResult:
    """Embedding prune, bottleneck align, bottleneck prune, embedding align."""
    dataset, v0 = assets or prepare_assets(config)
    run_dir = _run_dir(config, "alternate")
    r = config.ratio
    e2, e4 = config.phase_epochs
    phases, logs = [], {}

    with _Phase("embedding_prune"):
        plan = select_pruning_plan(score_encoder(v0, dataset, config), EMBEDDING, r, "local")
        v1 = apply_plan(v0, plan)
        save_checkpoint(v1, run_dir / "v1_init.slim", phase="embedding_prune")
        phases.append({"phase": "embedding_prune", **_plan_summary(plan)})
    with _Phase("bottleneck_align"):
        v1, logs["bottleneck_align"] = run_alignment(
            v1, {"v0": v0}, dataset, _align_config(config, BOTTLENECK_ALIGN, e2))
        save_checkpoint(v1, run_dir / "v1.slim", phase="bottleneck_align")
        phases.append({"phase": "bottleneck_align", "epochs": e2})
    with _Phase("bottleneck_prune"):
        plan = select_pruning_plan(score_encoder(v1, dataset, config, v0), "bottleneck", r,
                                   config.bottleneck_mode, config.norm)
        v2 = apply_plan(v1, plan)
        save_checkpoint(v2, run_dir / "v2_init.slim", phase="bottleneck_prune")
        phases.append({"phase": "bottleneck_prune", **_plan_summary(plan)})
    with _Phase("embedding_align"):
        v2, logs["embedding_align"] = run_alignment(
            v2, {"v0": v0, "v1": v1}, dataset, _align_config(config, EMBEDDING_ALIGN, e4))
        phases.append({"phase": "embedding_align", "epochs": e4})
    return _finish("alternate", config, run_dir, v2, v0, dataset, logs, phases)


def run_onestep_baseline(config: PipelineConfig, assets=None) -> RunResult:
    """Prune embedding and bottleneck together, then distil the final embedding only."""
    dataset, v0 = assets or prepare_assets(config)
    run_dir = _run_dir(config, "onestep")
    r = config.ratio
    phases, logs = [], {}
    with _Phase("onestep_prune"):
        report = score_encoder(v0, dataset, config)
        emb = select_pruning_plan(report, EMBEDDING, r, "local")
        bn = select_pruning_plan(report, "bottleneck", r, config.bottleneck_mode, config.norm)
        student = apply_plan(v0, emb)
        student = apply_plan(student, make_plan(build_dependency_graph(student), "bottleneck", bn.remove))
        save_checkpoint(student, run_dir / "pruned.slim", phase="onestep_prune")
        phases.append({"phase": "onestep_prune", "embedding_removed": len(emb.remove),
                       "bottleneck_removed": len(bn.remove), "dims": student.dims().to_dict()})
    with _Phase("final_align"):
        student, logs["final_align"] = run_alignment(
            student, {"v0": v0}, dataset, _align_config(config, FINAL_ALIGN, config.epochs))
        phases.append({"phase": "final_align", "epochs": config.epochs})
    return _finish("onestep", config, run_dir, student, v0, dataset, logs, phases)


def removed_fraction(before, after) -> float:
    """Fraction of all prunable groups (embedding plus bottleneck) removed between two dim tables."""
    def total(d):
        return d.embed_dim + sum(sum(h) for h in d.head_dims) + sum(d.mlp_dims)
    return 1.0 - total(after) / total(before)
