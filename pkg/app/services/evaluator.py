"""Evaluation metrics over a split: RMSE, NLL, observation RMSE, R/visibility correlation, D_Q."""

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.core import autodiff as ad
from app.core.config import settings
from app.core.errors import DataError, NumericError
from app.core.gaussian import LOG_2PI, bhattacharyya
from app.models.bundle import BoundModels, FilterModels, ModelsSpec
from app.models.checkpoint import CheckpointManifest, load_checkpoint
from app.services.discworld import SequenceRecord
from app.services.filter_config import FilterConfig
from app.services.losses import step_nll
from app.services.runner import initial_belief, perturb_initial_state, run_filter

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["t", "rmse", "nll", "sigma_qp_pred", "sigma_qv_pred"]


class EvalConfig(BaseModel):
    eval_seeds: List[int] = Field(default_factory=lambda: [1, 2])
    init_cov_diag: List[float] = Field(default_factory=lambda: [25.0])
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)

    def init_cov(self, n: int) -> np.ndarray:
        diag = np.asarray(self.init_cov_diag, dtype=np.float64)
        return np.diag(np.full(n, float(diag[0])) if diag.size == 1 else diag)


class DiagnosticsSummary(BaseModel):
    mean_innovation_norm: float
    mean_ess: Optional[float] = None
    min_ess: Optional[float] = None
    resample_steps: int = 0
    weight_resets: int = 0


class EvalReport(BaseModel):
    label: str
    filter: str
    sequences: int
    runs: int
    rmse: float
    rmse_state: float
    # per-step NLL without the 2 pi constant (the training convention) and with it
    nll: float
    nll_with_2pi: float
    obs_rmse: Optional[float] = None
    corr_R_visibility: Optional[float] = None
    corr_undefined: bool = False
    D_Q: Optional[float] = None
    diagnostics: DiagnosticsSummary
    config: Dict[str, Any] = Field(default_factory=dict)


@dataclass
class _SequenceResult:
    pos_sq: np.ndarray     # (runs, T)
    state_sq: np.ndarray   # (runs, T)
    nll: np.ndarray        # (runs, T)
    sigma_qp: np.ndarray   # (runs, T)
    sigma_qv: np.ndarray   # (runs, T)
    obs_sq: Optional[np.ndarray]
    r_trace: Optional[np.ndarray]
    innovation: List[float]
    ess: List[float]
    resampled: int
    resets: int


def pearson(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """Pearson correlation; None when either input has zero variance."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        return None
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0.0:
        return None
    return float(np.clip(np.dot(da, db) / denom, -1.0, 1.0))


def _noise_std(q: np.ndarray) -> tuple:
    if q.shape[0] < 4:
        return math.nan, math.nan
    return math.sqrt(0.5 * (q[0, 0] + q[1, 1])), math.sqrt(0.5 * (q[2, 2] + q[3, 3]))


def _evaluate_sequence(record: SequenceRecord, bound: BoundModels, filter_cfg: FilterConfig,
                       config: EvalConfig) -> _SequenceResult:
    obs = bound.observe(record.images) if bound.models.sensor is not None else None
    if obs is None:
        raise DataError("evaluation on image sequences needs a sensor network")
    labels = record.states[1:]
    h = bound.h
    init_cov = config.init_cov(record.states.shape[1])
    inits = [initial_belief(record.states[0], init_cov)]
    for seed in config.eval_seeds:
        rng = np.random.default_rng([seed, record.index, 0])
        inits.append(perturb_initial_state(record.states[0], init_cov, rng))

    pos_sq, state_sq, nll, sig_qp, sig_qv = [], [], [], [], []
    innovation, ess, resampled, resets = [], [], 0, 0
    for v, bel in enumerate(inits):
        rng = np.random.default_rng([config.eval_seeds[v - 1] if v else 0, record.index, 1])
        run = run_filter(None, bel, filter_cfg, bound, rng, observations=obs, labels=labels)
        means = run.mean_array()
        err = labels - means
        state_sq.append(np.sum(err ** 2, axis=1))
        pos_sq.append(np.sum((err @ h.T) ** 2, axis=1))
        nll.append([step_nll(s, labels[t]).item() for t, s in enumerate(run.summaries)])
        stds = [_noise_std(bound.process_noise(m).data.astype(np.float64)) for m in means]
        sig_qp.append([s[0] for s in stds])
        sig_qv.append([s[1] for s in stds])
        for d in run.diagnostics:
            innovation.append(d.innovation_norm)
            if d.ess is not None:
                ess.append(d.ess)
            resampled += int(d.resampled)
            resets += int(d.weights_reset)

    z = np.stack([o.z.data for o in obs]).astype(np.float64)
    r_trace = np.array([np.trace(o.r.data) for o in obs], dtype=np.float64)
    return _SequenceResult(
        pos_sq=np.asarray(pos_sq), state_sq=np.asarray(state_sq), nll=np.asarray(nll, dtype=np.float64),
        sigma_qp=np.asarray(sig_qp), sigma_qv=np.asarray(sig_qv),
        obs_sq=np.sum((z - labels @ h.T) ** 2, axis=1), r_trace=r_trace,
        innovation=innovation, ess=ess, resampled=resampled, resets=resets,
    )


def learned_q_mean(bound: BoundModels, records: Sequence[SequenceRecord]) -> np.ndarray:
    """Learned Q, averaged over every labeled state of the split when it is state dependent."""
    if bound.models.q.spec.flavor == "constant":
        return bound.process_noise().data.astype(np.float64)
    states = np.concatenate([r.states[1:] for r in records])
    return bound.process_noise(states).data.astype(np.float64)


def ground_truth_q_mean(records: Sequence[SequenceRecord]) -> np.ndarray:
    regime, size = records[0].regime, records[0].scene.image_size
    if regime.kind != "heteroscedastic":
        return regime.ground_truth_q()
    states = np.concatenate([r.states[:-1] for r in records])
    return np.mean([regime.ground_truth_q(s[:2], size) for s in states], axis=0)


def noise_distance(bound: BoundModels, records: Sequence[SequenceRecord]) -> Optional[float]:
    """Bhattacharyya distance between the learned and the simulated process noise."""
    try:
        return float(bhattacharyya(learned_q_mean(bound, records), ground_truth_q_mean(records)).item())
    except NumericError as e:
        logger.warning(f"D_Q undefined: {e}")
        return None


def write_traces(path: str, results: Sequence[_SequenceResult]) -> None:
    pos = np.concatenate([r.pos_sq for r in results])
    nll = np.concatenate([r.nll for r in results])
    qp = np.concatenate([r.sigma_qp for r in results])
    qv = np.concatenate([r.sigma_qv for r in results])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for t in range(pos.shape[1]):
            writer.writerow([t + 1, repr(float(np.sqrt(pos[:, t].mean()))), repr(float(nll[:, t].mean())),
                             repr(float(qp[:, t].mean())), repr(float(qv[:, t].mean()))])


def evaluate(records: Sequence[SequenceRecord], models: FilterModels, filter_cfg: FilterConfig,
             config: Optional[EvalConfig] = None, label: Optional[str] = None,
             traces_path: Optional[str] = None, echo: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Run the filter over every sequence from the true and the perturbed initial states."""
    config = config or EvalConfig()
    if not records:
        raise DataError("cannot evaluate an empty split")
    if filter_cfg.kind == "ukf":
        filter_cfg.ukf.check(models.spec.state_dim)
    bound = models.bind(None)
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        futures = [ad.submit_in_context(pool, _evaluate_sequence, r, bound, filter_cfg, config) for r in records]
        results = [f.result() for f in futures]

    pos = np.concatenate([r.pos_sq.ravel() for r in results])
    state = np.concatenate([r.state_sq.ravel() for r in results])
    nll = float(np.mean(np.concatenate([r.nll.ravel() for r in results])))
    obs_sq = np.concatenate([r.obs_sq for r in results])
    r_trace = np.concatenate([r.r_trace for r in results])
    visible = np.concatenate([r.visible_pixels for r in records]).astype(np.float64)
    corr = pearson(r_trace, visible)
    if corr is None:
        logger.warning("R/visibility correlation undefined (zero variance)")
    ess = [e for r in results for e in r.ess]
    diagnostics = DiagnosticsSummary(
        mean_innovation_norm=float(np.mean([i for r in results for i in r.innovation])),
        mean_ess=float(np.mean(ess)) if ess else None,
        min_ess=float(np.min(ess)) if ess else None,
        resample_steps=sum(r.resampled for r in results),
        weight_resets=sum(r.resets for r in results),
    )
    if traces_path:
        write_traces(traces_path, results)
    report = EvalReport(
        label=label or filter_cfg.label,
        filter=filter_cfg.label,
        sequences=len(records),
        runs=len(records) * (1 + len(config.eval_seeds)),
        rmse=float(np.sqrt(pos.mean())),
        rmse_state=float(np.sqrt(state.mean())),
        nll=nll,
        nll_with_2pi=nll + 0.5 * models.spec.state_dim * LOG_2PI,
        obs_rmse=float(np.sqrt(obs_sq.mean())),
        corr_R_visibility=corr,
        corr_undefined=corr is None,
        D_Q=noise_distance(bound, records),
        diagnostics=diagnostics,
        config={"filter": filter_cfg.model_dump(), "eval": config.model_dump(), **(echo or {})},
    )
    logger.info(f"evaluated {report.label}: rmse={report.rmse:.3f} nll={report.nll:.3f}")
    return report


def load_trained(path: str) -> Tuple[FilterModels, FilterConfig, CheckpointManifest]:
    """Models and the filter configuration a training run stored in its checkpoint."""
    manifest, params = load_checkpoint(path)
    if "models" not in manifest.config or "filter" not in manifest.config:
        raise DataError(f"{path} carries no model/filter configuration")
    try:
        spec = ModelsSpec.model_validate(manifest.config["models"])
        filter_cfg = FilterConfig.model_validate(manifest.config["filter"])
    except ValueError as e:
        raise DataError(f"{path}: stored configuration is invalid: {e}") from e
    return FilterModels(spec, params), filter_cfg, manifest
