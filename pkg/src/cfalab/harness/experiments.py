"""Experiment protocols: component ablation, data efficiency, lambda3 sweep.

Every protocol trains on one shared dataset (generated from the base config's
data section) so that arms differ only in what the protocol varies.  Runs are
deterministic, so results are memoised per (config, dataset) within a process.
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from ..errors import DivergedRunError
from ..synthdata import SampleRecord, dataset_digest, generate_dataset, split_records
from .config import TrainConfig, dump_config
from .train import generation_accuracy, train

log = logging.getLogger(__name__)

ABLATION_ARMS = ("ce_only", "focal_only", "focal_align", "focal_cal", "full_cfa")
ARM_LABELS = {
    "ce_only": "Baseline (CE Loss)",
    "focal_only": "+ L_focal",
    "focal_align": "+ L_focal + L_align",
    "focal_cal": "+ L_focal + L_cal",
    "full_cfa": "+ L_CFA (Full)",
}
METRIC_COLUMNS = ("B-ACC", "AUROC", "ECE")
EFFICIENCY_ARMS = {"frozen_lora": "full_cfa", "full_finetune": "frozen_vs_fullft"}


@dataclass(frozen=True)
class RunResult:
    arm: str
    seed: int
    b_acc: float
    auroc: float
    ece: float
    gen_acc: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


_RUN_CACHE: dict[tuple, RunResult] = {}


def clear_cache() -> None:
    _RUN_CACHE.clear()


def run_one(cfg: TrainConfig, dataset: Sequence[SampleRecord], split: str = "ood", with_generation: bool = False) -> RunResult:
    key = (dump_config(cfg), dataset_digest(dataset), split, with_generation)
    hit = _RUN_CACHE.get(key)
    if hit is not None:
        return hit
    try:
        ckpt, hist = train(cfg, dataset, eval_splits=(split,))
    except DivergedRunError as exc:
        log.error("arm %s seed %d diverged: %s", cfg.arm, cfg.seed, exc)
        nan = float("nan")
        return RunResult(cfg.arm, cfg.seed, nan, nan, nan, error=str(exc))
    rep = hist.reports[split]
    gen_acc = None
    if with_generation:
        test = split_records(dataset, "test")
        gen_acc = generation_accuracy(ckpt.model, test, cfg.data.signature_len)
    res = RunResult(cfg.arm, cfg.seed, rep.b_acc, rep.auroc_macro, rep.ece, gen_acc)
    _RUN_CACHE[key] = res
    return res


def _run_job(job):
    return run_one(*job)


def run_many(jobs: list[tuple], workers: int = 1) -> list[RunResult]:
    """Run ``(cfg, dataset, split, with_generation)`` jobs, optionally in worker processes."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_one(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_run_job, jobs))
    for job, res in zip(jobs, results):
        if res.ok:
            _RUN_CACHE[(dump_config(job[0]), dataset_digest(job[1]), job[2], job[3])] = res
    return results


def _median(xs) -> float:
    xs = [x for x in xs if x == x]
    return statistics.median(xs) if xs else float("nan")


def _fmt(x) -> str:
    return "nan" if x is None or x != x else f"{x:.6f}"


def _seed_list(runs) -> str:
    return " ".join(str(r.seed) for r in runs if r.ok)


def _to_csv(header: Sequence[str], rows: list[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# -- ablation --------------------------------------------------------------------


@dataclass
class AblationTable:
    arms: tuple[str, ...]
    seeds: tuple[int, ...]
    split: str
    dataset_digest: str
    runs: list[RunResult] = field(default_factory=list)

    def _by_arm(self, arm: str) -> list[RunResult]:
        return [r for r in self.runs if r.arm == arm and r.ok]

    def median(self, arm: str, metric: str) -> float:
        attr = {"B-ACC": "b_acc", "AUROC": "auroc", "ECE": "ece"}[metric]
        return _median(getattr(r, attr) for r in self._by_arm(arm))

    def spread(self, arm: str, metric: str) -> tuple[float, float]:
        attr = {"B-ACC": "b_acc", "AUROC": "auroc", "ECE": "ece"}[metric]
        vals = [getattr(r, attr) for r in self._by_arm(arm)]
        return (min(vals), max(vals)) if vals else (float("nan"), float("nan"))

    def failed(self) -> list[RunResult]:
        return [r for r in self.runs if not r.ok]

    def to_csv(self) -> str:
        rows = [
            [arm] + [_fmt(self.median(arm, m)) for m in METRIC_COLUMNS] + [_seed_list(self._by_arm(arm))]
            for arm in self.arms
        ]
        return _to_csv(("arm",) + METRIC_COLUMNS + ("seeds",), rows)

    def runs_csv(self) -> str:
        rows = [
            [r.arm, r.seed, _fmt(r.b_acc), _fmt(r.auroc), _fmt(r.ece), self.dataset_digest, r.error or ""]
            for r in self.runs
        ]
        return _to_csv(("arm", "seed") + METRIC_COLUMNS + ("dataset_digest", "error"), rows)


def ablate(
    base_cfg: TrainConfig,
    seeds: Sequence[int],
    arms: Sequence[str] = ABLATION_ARMS,
    split: str = "ood",
    workers: int = 1,
    dataset: Sequence[SampleRecord] | None = None,
) -> AblationTable:
    if len(seeds) < 3:
        raise ValueError("ablation needs at least three seeds")
    dataset = list(dataset) if dataset is not None else generate_dataset(base_cfg.data)
    jobs = [(base_cfg.with_(arm=arm, seed=s), dataset, split, False) for arm in arms for s in seeds]
    runs = run_many(jobs, workers)
    return AblationTable(tuple(arms), tuple(seeds), split, dataset_digest(dataset), runs)


# -- data efficiency ---------------------------------------------------------------


@dataclass
class EfficiencyTable:
    fractions: tuple[float, ...]
    seeds: tuple[int, ...]
    runs: dict[tuple[str, float], list[RunResult]] = field(default_factory=dict)

    def median_bacc(self, model: str, fraction: float) -> float:
        return _median(r.b_acc for r in self.runs[(model, fraction)])

    def drop(self, model: str, fraction: float) -> float:
        """Median over seeds of B-ACC(100%) - B-ACC(fraction)."""
        full = {r.seed: r.b_acc for r in self.runs[(model, 1.0)]}
        return _median(full[r.seed] - r.b_acc for r in self.runs[(model, fraction)] if r.seed in full)

    def to_csv(self) -> str:
        rows = []
        for model in EFFICIENCY_ARMS:
            for f in self.fractions:
                runs = self.runs[(model, f)]
                rows.append([model, f"{f:g}", _fmt(self.median_bacc(model, f)), _fmt(self.drop(model, f)), _seed_list(runs)])
        return _to_csv(("model", "fraction", "B-ACC", "drop", "seeds"), rows)


def data_efficiency(
    base_cfg: TrainConfig,
    fractions: Sequence[float] = (1.0, 0.12),
    seeds: Sequence[int] = (0, 1, 2),
    split: str = "ood",
    workers: int = 1,
    dataset: Sequence[SampleRecord] | None = None,
) -> EfficiencyTable:
    fractions = tuple(sorted({1.0, *(float(f) for f in fractions)}, reverse=True))
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    dataset = list(dataset) if dataset is not None else generate_dataset(base_cfg.data)
    keys, jobs = [], []
    for model, arm in EFFICIENCY_ARMS.items():
        for f in fractions:
            for s in seeds:
                keys.append((model, f))
                jobs.append((base_cfg.with_(arm=arm, seed=s, train_fraction=f), dataset, split, False))
    table = EfficiencyTable(fractions, tuple(seeds))
    for key, res in zip(keys, run_many(jobs, workers)):
        table.runs.setdefault(key, []).append(res)
    return table


# -- lambda3 sensitivity ------------------------------------------------------------


@dataclass
class SensitivityTable:
    grid: tuple[float, ...]
    seeds: tuple[int, ...]
    runs: dict[float, list[RunResult]] = field(default_factory=dict)

    def median_bacc(self, lam: float) -> float:
        return _median(r.b_acc for r in self.runs[lam])

    def median_gen_acc(self, lam: float) -> float:
        return _median(r.gen_acc for r in self.runs[lam] if r.gen_acc is not None)

    def plateau_width(self) -> float:
        vals = [self.median_bacc(lam) for lam in self.grid]
        return max(vals) - min(vals)

    def to_csv(self) -> str:
        rows = [
            [f"{lam:g}", _fmt(self.median_bacc(lam)), _fmt(self.median_gen_acc(lam)), _seed_list(self.runs[lam])]
            for lam in self.grid
        ]
        return _to_csv(("lambda3", "B-ACC", "gen_acc", "seeds"), rows)


def sensitivity(
    base_cfg: TrainConfig,
    lambda3_grid: Sequence[float] = (0.1, 0.25, 0.5, 0.75, 1.0),
    seeds: Sequence[int] = (0, 1, 2),
    split: str = "ood",
    workers: int = 1,
    dataset: Sequence[SampleRecord] | None = None,
) -> SensitivityTable:
    if not lambda3_grid:
        raise ValueError("lambda3 grid is empty")
    dataset = list(dataset) if dataset is not None else generate_dataset(base_cfg.data)
    grid = tuple(float(x) for x in lambda3_grid)
    keys, jobs = [], []
    for lam in grid:
        loss = base_cfg.loss.__class__(**{**base_cfg.loss.__dict__, "lambda3": lam})
        for s in seeds:
            keys.append(lam)
            jobs.append((base_cfg.with_(arm="full_cfa", seed=s, loss=loss), dataset, split, True))
    table = SensitivityTable(grid, tuple(seeds))
    for lam, res in zip(keys, run_many(jobs, workers)):
        table.runs.setdefault(lam, []).append(res)
    return table
