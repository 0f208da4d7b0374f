"""Training: sequence chunking, parallel per-chunk gradients, Adam and best-validation selection."""

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.core import autodiff as ad
from app.core.autodiff import Tape, Tensor
from app.core.config import settings
from app.core.errors import ConfigurationError, DataError, DivergenceError
from app.core.gaussian import GaussianBelief, gaussian_nll
from app.models.bundle import BoundModels, FilterModels, ModelOptions
from app.models.checkpoint import save_checkpoint
from app.models.nn import AdamState, ParameterSet, adam_step, global_norm
from app.services.discworld import SequenceRecord
from app.services.filter_config import FilterConfig, LossKind
from app.services.runner import initial_belief, perturb_initial_state, run_filter

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "train_loss", "val_loss", "grad_norm", "seconds"]
SEQ_LEN_SWEEP = [1, 2, 5, 10, 25, 50]

Preset = Literal["from-scratch", "noise-only"]
PRESETS: Dict[str, dict] = {
    # every component trainable
    "from-scratch": {"q_init": 100.0, "r_init": 900.0, "process": "learned"},
    # pretrained sensor and analytic process stay fixed, only the noise models learn
    "noise-only": {"q_init": 1.0, "r_init": 100.0, "process": "analytic"},
}
# sensor layers that make up the position regressor (the R head is a noise model)
SENSOR_FEATURE_PREFIXES = ("sensor.conv", "sensor.fc", "sensor.z")


class TrainConfig(BaseModel):
    loss: LossKind = "nll"
    seq_len: int = Field(default=10, ge=1)
    epochs: int = Field(default=15, ge=1)
    lr: float = Field(default_factory=lambda: settings.learning_rate, gt=0)
    batch_size: int = Field(default_factory=lambda: settings.batch_size, ge=1)
    reference_seq_len: int = Field(default_factory=lambda: settings.reference_seq_len, ge=1)
    init_cov_diag: List[float] = Field(default_factory=lambda: [25.0])
    eval_seeds: List[int] = Field(default_factory=lambda: [1, 2])
    seed: int = 0
    precision: Literal["float32", "float64"] = Field(default_factory=lambda: settings.precision)
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)
    divergence_patience: int = Field(default=3, ge=1)

    def init_cov(self, n: int) -> np.ndarray:
        diag = np.asarray(self.init_cov_diag, dtype=np.float64)
        if diag.size == 1:
            diag = np.full(n, float(diag[0]))
        if diag.shape != (n,):
            raise ConfigurationError(f"init_cov_diag needs 1 or {n} values, got {diag.size}")
        if np.any(diag <= 0):
            raise ConfigurationError("the initial covariance must be positive definite")
        return np.diag(diag)

    @property
    def chunks_per_batch(self) -> int:
        """Chunks per batch, keeping steps x batch constant across sequence lengths."""
        return max(1, int(round(self.batch_size * self.reference_seq_len / self.seq_len)))


class PretrainConfig(BaseModel):
    epochs: int = Field(default=30, ge=1)
    lr: float = Field(default_factory=lambda: settings.learning_rate, gt=0)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0
    precision: Literal["float32", "float64"] = Field(default_factory=lambda: settings.precision)
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)


class TrainResult(BaseModel):
    label: str
    checkpoint: str
    log: str
    steps: int
    epochs: int
    best_step: int
    best_val_loss: Optional[float] = None
    skipped_steps: int = 0


@dataclass(frozen=True)
class Chunk:
    sequence: int
    start: int
    length: int


def apply_preset(options: ModelOptions, preset: Preset) -> ModelOptions:
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset '{preset}'")
    return options.model_copy(update=PRESETS[preset])


def freeze_components(models: FilterModels, sensor: bool = False, process: bool = False) -> None:
    if sensor:
        for prefix in SENSOR_FEATURE_PREFIXES:
            models.freeze(prefix)
    if process:
        models.freeze("process.")


def transfer_params(dst: ParameterSet, src: ParameterSet, prefixes: Iterable[str],
                    skip: Iterable[str] = ()) -> List[str]:
    """Copy same-shaped tensors whose names start with one of `prefixes`."""
    prefixes, skip = tuple(prefixes), tuple(skip)
    copied = {}
    for name, value in src.values.items():
        if not name.startswith(prefixes) or (skip and name.startswith(skip)):
            continue
        if name in dst and dst.values[name].shape == value.shape:
            copied[name] = value
        else:
            logger.warning(f"not transferring '{name}': missing or differently shaped in the target model")
    dst.update(copied)
    return sorted(copied)


def make_chunks(lengths: Sequence[int], seq_len: int) -> List[Chunk]:
    """Split each sequence into consecutive chunks; the last one of a sequence may be shorter."""
    if seq_len < 1:
        raise ConfigurationError(f"sequence length must be >= 1, got {seq_len}")
    return [Chunk(i, start, min(seq_len, length - start))
            for i, length in enumerate(lengths)
            for start in range(0, length, seq_len)]


def make_batches(chunks: Sequence[Chunk], per_batch: int, rng: np.random.Generator) -> List[List[Chunk]]:
    order = rng.permutation(len(chunks))
    return [[chunks[i] for i in order[j:j + per_batch]] for j in range(0, len(order), per_batch)]


def chunk_loss(models: BoundModels, record: SequenceRecord, chunk: Chunk, filter_cfg: FilterConfig,
               init_cov: np.ndarray, rng: np.random.Generator, perturb: bool = True,
               training: bool = True) -> Tensor:
    """Filter one chunk from (a perturbation of) the true state at its start."""
    x0 = record.states[chunk.start]
    bel = perturb_initial_state(x0, init_cov, rng) if perturb else initial_belief(x0, init_cov)
    run = run_filter(record, bel, filter_cfg, models, rng, start=chunk.start, length=chunk.length,
                     training=training)
    return run.loss


def task_gradient(models: FilterModels, task: Callable[[BoundModels], Tensor]
                  ) -> Tuple[float, Dict[str, np.ndarray]]:
    """Run one task on a private tape; gradients of every trainable parameter."""
    tape = Tape()
    bound = models.bind(tape)
    loss = task(bound)
    grads = ad.backward(tape, loss)
    return loss.item(), {n: np.asarray(grads[bound.params[n]], dtype=np.float64)
                         for n in models.params.trainable_names()}


def parallel_gradients(models: FilterModels, tasks: Sequence[Callable[[BoundModels], Tensor]],
                       threads: int, weights: Optional[Sequence[float]] = None
                       ) -> Tuple[float, Dict[str, np.ndarray]]:
    """Weighted mean loss and gradient over tasks, reduced in submission order."""
    if not models.params.trainable_names():
        raise ConfigurationError("nothing to train: every parameter is frozen")
    weights = np.full(len(tasks), 1.0 / len(tasks)) if weights is None else \
        np.asarray(weights, dtype=np.float64) / float(np.sum(weights))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [ad.submit_in_context(pool, task_gradient, models, task) for task in tasks]
        results = [f.result() for f in futures]
    loss = 0.0
    total: Dict[str, np.ndarray] = {}
    for w, (value, grads) in zip(weights, results):
        loss += w * value
        for name, g in grads.items():
            total[name] = total[name] + w * g if name in total else w * g
    return float(loss), total


def parallel_losses(models: FilterModels, tasks: Sequence[Callable[[BoundModels], Tensor]],
                    threads: int) -> List[float]:
    """Loss values without taping (parameters bound as constants)."""
    bound = models.bind(None)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [ad.submit_in_context(pool, task, bound) for task in tasks]
        return [f.result().item() for f in futures]


class _LogWriter:
    def __init__(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.path = path
        self._file = open(path, "w", newline="")
        self._writer = csv.writer(self._file)
        self._writer.writerow(LOG_COLUMNS)

    def row(self, epoch: int, step: int, train_loss: float, val_loss: Optional[float], grad_norm: float,
            seconds: float) -> None:
        self._writer.writerow([epoch, step, repr(train_loss), "" if val_loss is None else repr(val_loss),
                               repr(grad_norm), f"{seconds:.3f}"])
        self._file.flush()

    def close(self) -> None:
        self._file.close()


class Trainer:
    """Fits a FilterModels instance on a training split, selecting the best validation state."""

    def __init__(self, models: FilterModels, filter_cfg: FilterConfig, config: TrainConfig,
                 out_dir: str, label: Optional[str] = None, extra_config: Optional[dict] = None):
        self.models = models
        self.filter_cfg = filter_cfg
        self.config = config
        self.out_dir = out_dir
        self.label = label or f"{filter_cfg.label}/{config.loss}/k{config.seq_len}"
        self.extra_config = extra_config or {}
        self.adam = AdamState(lr=config.lr)
        self._bad_losses: List[float] = []
        if filter_cfg.kind == "ukf":
            filter_cfg.ukf.check(models.spec.state_dim)

    def _checkpoint_config(self) -> dict:
        return {
            "label": self.label,
            "models": self.models.spec.model_dump(),
            "filter": self.filter_cfg.model_dump(),
            "train": self.config.model_dump(),
            **self.extra_config,
        }

    def _watch(self, value: float, epoch: int, step: int, what: str) -> None:
        if math.isfinite(value):
            self._bad_losses.clear()
            return
        self._bad_losses.append(value)
        logger.warning(f"non-finite {what} at epoch {epoch}, step {step}")
        if len(self._bad_losses) >= self.config.divergence_patience:
            logger.error(f"training diverged at epoch {epoch}, step {step}")
            raise DivergenceError(
                f"{len(self._bad_losses)} consecutive non-finite losses (last: {what} at epoch {epoch}, "
                f"step {step}; {self.adam.skipped} optimizer steps skipped)"
            )

    def _tasks(self, records: Sequence[SequenceRecord], chunks: Sequence[Chunk], rng_key: Sequence[int],
               perturb: bool, training: bool) -> List[Callable[[BoundModels], Tensor]]:
        init_cov = self.config.init_cov(self.models.spec.state_dim)
        return [partial(self._chunk_task, records[c.sequence], c, init_cov, list(rng_key) + [i], perturb, training)
                for i, c in enumerate(chunks)]

    def _chunk_task(self, record, chunk, init_cov, key, perturb, training, bound: BoundModels) -> Tensor:
        rng = np.random.default_rng(key)
        return chunk_loss(bound, record, chunk, self.filter_cfg, init_cov, rng, perturb, training)

    def validate(self, records: Sequence[SequenceRecord]) -> float:
        """Mean chunk loss over the validation split, started from the true states."""
        chunks = make_chunks([r.length for r in records], self.config.seq_len)
        tasks = self._tasks(records, chunks, [self.config.seed, 1 << 20], perturb=False, training=True)
        losses = parallel_losses(self.models, tasks, self.config.threads)
        return float(np.mean(losses))

    def fit(self, train: Sequence[SequenceRecord], val: Sequence[SequenceRecord]) -> TrainResult:
        if not train:
            raise DataError("the training split is empty")
        with ad.precision_scope(self.config.precision):
            return self._fit(train, val)

    def _fit(self, train: Sequence[SequenceRecord], val: Sequence[SequenceRecord]) -> TrainResult:
        cfg = self.config
        chunks = make_chunks([r.length for r in train], cfg.seq_len)
        rng = np.random.default_rng(cfg.seed)
        log = _LogWriter(os.path.join(self.out_dir, "train_log.csv"))
        start_time = time.perf_counter()
        best_val, best_step = math.inf, 0
        best_params = self.models.params.copy()
        step = 0
        logger.info(f"training {self.label}: {len(chunks)} chunks, {cfg.chunks_per_batch} per batch")
        try:
            for epoch in range(1, cfg.epochs + 1):
                batches = make_batches(chunks, cfg.chunks_per_batch, rng)
                epoch_losses = []
                for b, batch in enumerate(batches):
                    tasks = self._tasks(train, batch, [cfg.seed, epoch, b], perturb=True, training=True)
                    loss, grads = parallel_gradients(self.models, tasks, cfg.threads)
                    norm = global_norm(grads)
                    step += 1
                    self._watch(loss, epoch, step, "train loss")
                    updated = adam_step(self.adam, self.models.params.values, grads)
                    self.models.params.update({n: updated[n] for n in grads})
                    epoch_losses.append(loss)
                    val_loss = None
                    if b == len(batches) - 1 and val:
                        val_loss = self.validate(val)
                        self._watch(val_loss, epoch, step, "validation loss")
                        if val_loss < best_val:
                            best_val, best_step = val_loss, step
                            best_params = self.models.params.copy()
                    log.row(epoch, step, loss, val_loss, norm, time.perf_counter() - start_time)
                print(f"✅ epoch {epoch}/{cfg.epochs}: train {np.mean(epoch_losses):.4f}"
                      + (f", best val {best_val:.4f}" if val else ""))
        finally:
            log.close()

        if val:
            self.models.params = best_params
        else:
            best_step = step
        path = os.path.join(self.out_dir, "checkpoint.dfck")
        save_checkpoint(path, self.models.params, self.models.layers(), seed=cfg.seed, step=best_step,
                        config=self._checkpoint_config())
        if self.adam.skipped:
            print(f"⚠️ {self.adam.skipped} optimizer steps skipped on non-finite gradients")
        return TrainResult(label=self.label, checkpoint=path, log=log.path, steps=step, epochs=cfg.epochs,
                           best_step=best_step, best_val_loss=best_val if val else None,
                           skipped_steps=self.adam.skipped)


def _frame_items(records: Sequence[SequenceRecord]) -> List[Tuple[int, int]]:
    return [(i, t) for i, r in enumerate(records) for t in range(r.length)]


def _sensor_nll(records: Sequence[SequenceRecord], items: Sequence[Tuple[int, int]],
                bound: BoundModels) -> Tensor:
    """Mean NLL of the observed true positions under N(z, R) from the sensor."""
    images = np.stack([records[i].images[t] for i, t in items])
    labels = np.stack([records[i].states[t + 1] for i, t in items]) @ bound.h.T
    terms = [gaussian_nll(labels[j], GaussianBelief(obs.z, obs.r))
             for j, obs in enumerate(bound.observe(images))]
    return ad.reduce_mean(ad.stack(terms))


def pretrain_sensor(models: FilterModels, train: Sequence[SequenceRecord], val: Sequence[SequenceRecord],
                    config: PretrainConfig, out_dir: str) -> TrainResult:
    """Supervised sensor (and R) regression on single frames; keeps the best validation state."""
    if models.sensor is None:
        raise ConfigurationError("sensor pretraining needs a sensor network")
    if not train:
        raise DataError("the training split is empty")
    with ad.precision_scope(config.precision):
        return _pretrain_sensor(models, train, val, config, out_dir)


def _pretrain_sensor(models: FilterModels, train: Sequence[SequenceRecord], val: Sequence[SequenceRecord],
                     config: PretrainConfig, out_dir: str) -> TrainResult:
    models.freeze("process.")
    models.freeze("q.")
    rng = np.random.default_rng(config.seed)
    items = _frame_items(train)
    val_items = _frame_items(val)
    adam = AdamState(lr=config.lr)
    log = _LogWriter(os.path.join(out_dir, "pretrain_log.csv"))
    start_time = time.perf_counter()
    best_val, best_step, step = math.inf, 0, 0
    best_params = models.params.copy()
    per_task = max(1, -(-config.batch_size // config.threads))
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(items))
            for j in range(0, len(order), config.batch_size):
                batch = [items[i] for i in order[j:j + config.batch_size]]
                parts = [batch[p:p + per_task] for p in range(0, len(batch), per_task)]
                tasks = [partial(_sensor_nll, train, part) for part in parts]
                loss, grads = parallel_gradients(models, tasks, config.threads, [len(p) for p in parts])
                step += 1
                updated = adam_step(adam, models.params.values, grads)
                models.params.update({n: updated[n] for n in grads})
                val_loss = None
                if j + config.batch_size >= len(order) and val_items:
                    parts = [val_items[p:p + per_task] for p in range(0, len(val_items), per_task)]
                    values = parallel_losses(models, [partial(_sensor_nll, val, part) for part in parts],
                                             config.threads)
                    val_loss = float(np.average(values, weights=[len(p) for p in parts]))
                    if val_loss < best_val:
                        best_val, best_step = val_loss, step
                        best_params = models.params.copy()
                log.row(epoch, step, loss, val_loss, global_norm(grads), time.perf_counter() - start_time)
            print(f"✅ pretrain epoch {epoch}/{config.epochs}" + (f": best val {best_val:.4f}" if val_items else ""))
    finally:
        log.close()
    if val_items:
        models.params = best_params
    else:
        best_step = step
    path = os.path.join(out_dir, "sensor.dfck")
    save_checkpoint(path, models.params, models.layers(), seed=config.seed, step=best_step,
                    config={"label": "sensor-pretrain", "models": models.spec.model_dump(),
                            "pretrain": config.model_dump()})
    return TrainResult(label="sensor-pretrain", checkpoint=path, log=log.path, steps=step, epochs=config.epochs,
                       best_step=best_step, best_val_loss=best_val if val_items else None,
                       skipped_steps=adam.skipped)
