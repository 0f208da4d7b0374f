import asyncio
import glob
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional

from app.core import autodiff as ad
from app.core.config import settings
from app.core.errors import DataError, UsageError

logger = logging.getLogger(__name__)


class ExperimentService:
    """Runs verification suites and evaluations off the event loop."""

    def __init__(self, workers: Optional[int] = None):
        self.workers = workers or settings.threads
        self.executor = ThreadPoolExecutor(max_workers=self.workers)

    async def _run(self, fn, *args):
        try:
            return await asyncio.get_running_loop().run_in_executor(self.executor, fn, *args)
        except OSError as e:
            raise DataError(f"I/O failure: {e}") from e

    async def oracle_check(self, kind: str, seed: int, steps: int, samples: Optional[int]) -> Dict[str, Any]:
        from app.services.oracle import ORACLE_FILTERS, oracle_check

        kinds = ORACLE_FILTERS if kind == "all" else [kind]
        reports = {}
        for k in kinds:
            report = await self._run(oracle_check, k, seed, steps, samples)
            reports[k] = report.model_dump()
        return {"passed": all(r["passed"] for r in reports.values()), "reports": reports}

    async def gradcheck(self, tol: float, seed: int, filters: bool) -> Dict[str, Any]:
        from app.core.gradcheck import run_op_suite
        from app.services.oracle import filter_gradcheck_suite

        reports = {f"op.{k}": v for k, v in (await self._run(run_op_suite, seed, tol)).items()}
        if filters:
            reports.update(await self._run(filter_gradcheck_suite, seed, tol))
        return {"passed": all(r.passed for r in reports.values()),
                "checks": {k: v.model_dump() for k, v in reports.items()}}

    def _evaluate(self, dataset: str, split: str, checkpoint: str, filter_overrides: Dict[str, Any],
                  eval_seeds: List[int], max_sequences: Optional[int]) -> Dict[str, Any]:
        from app.services.dataset_store import read_split
        from app.services.evaluator import EvalConfig, evaluate, load_trained
        from app.services.filter_config import FilterConfig
        from app.utils.validators import validated

        if not os.path.exists(checkpoint):
            raise UsageError(f"checkpoint not found: {checkpoint}")
        path = os.path.join(dataset, f"{split}.dfds")
        if not os.path.exists(path):
            raise DataError(f"no {split} split in {dataset}")
        models, filter_cfg, manifest = load_trained(checkpoint)
        filter_cfg = validated(FilterConfig, {**filter_cfg.model_dump(), **filter_overrides})
        _, records = read_split(path, max_sequences)
        config = validated(EvalConfig, {"eval_seeds": eval_seeds,
                                        "init_cov_diag": manifest.config.get("train", {}).get("init_cov_diag", [25.0])})
        precision = manifest.config.get("train", {}).get("precision", settings.precision)
        with ad.precision_scope(precision):
            report = evaluate(records, models, filter_cfg, config, label=manifest.config.get("label"),
                              echo={"checkpoint": checkpoint, "split": split})
        return report.model_dump()

    async def evaluate(self, dataset: str, split: str, checkpoint: str, filter_overrides: Dict[str, Any],
                       eval_seeds: List[int], max_sequences: Optional[int] = None) -> Dict[str, Any]:
        return await self._run(self._evaluate, dataset, split, checkpoint, filter_overrides, eval_seeds,
                               max_sequences)

    def list_runs(self, root: Optional[str] = None) -> List[Dict[str, Any]]:
        """Run manifests found below the output directory."""
        from app.cli import RUN_MANIFEST

        root = root or settings.out_dir
        runs = []
        for path in sorted(glob.glob(os.path.join(root, "**", RUN_MANIFEST), recursive=True)):
            try:
                with open(path) as f:
                    manifest = json.load(f)
            except (OSError, ValueError) as e:
                logger.warning(f"skipping unreadable run manifest {path}: {e}")
                continue
            runs.append({"path": os.path.dirname(path), "command": manifest.get("command"),
                         "outputs": manifest.get("outputs", {})})
        return runs

    def close(self):
        self.executor.shutdown(wait=False)


experiment_service = ExperimentService()
