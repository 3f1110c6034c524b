"""Desk-scale ablation runs on synthetic scenes.

Each condition trains a fresh network from the same data for a fixed number of
steps and evaluates lane IoU / mean IoU on stitched full-scene predictions.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from statistics import median
from typing import Sequence

import numpy as np

from .metrics import MetricReport
from .network import InjectionConfig, NetworkConfig, build
from .pipeline import DatasetStats, compute_stats, extract, make_grid
from .synthgen import SceneSpec, generate, scene_seed
from .training import EvalImage, Sample, TrainConfig, evaluate, sample_seed, train, PURPOSE_INIT

log = logging.getLogger(__name__)


@dataclass
class AblationData:
    train: list[Sample]
    test: list[EvalImage]
    stats: DatasetStats
    patch: int
    test_stride: int


def prepare_data(
    n_train: int = 4,
    n_test: int = 2,
    scene: SceneSpec = SceneSpec(),
    patch: int = 256,
    train_stride: int = 200,
    test_stride: int = 250,
    lane_patches_only: bool = False,
) -> AblationData:
    """Generate scenes and cut the training scenes into patches."""
    samples: list[Sample] = []
    train_imgs, train_masks = [], []
    for i in range(n_train):
        img, mask = generate(replace(scene, seed=scene_seed(scene.seed, i)))
        train_imgs.append(img)
        train_masks.append(mask)
        grid = make_grid((img.shape[2], img.shape[1]), patch, train_stride)
        for p, m in zip(extract(img, grid), extract(mask, grid)):
            if lane_patches_only and not m.any():
                continue
            samples.append(Sample(np.ascontiguousarray(p), np.ascontiguousarray(m)))
    test = []
    for i in range(n_test):
        idx = n_train + i
        img, mask = generate(replace(scene, seed=scene_seed(scene.seed, idx)))
        test.append(EvalImage(img, mask, f"scene_{idx:04d}"))
    return AblationData(samples, test, compute_stats(train_imgs, train_masks), patch, test_stride)


@dataclass(frozen=True)
class Condition:
    name: str
    injection: InjectionConfig
    # None: use the training split's background:lane ratio
    lambda_lane: float | None = None


def standard_conditions(order: int = 1) -> list[Condition]:
    """The condition set behind the four directional comparisons."""
    full = InjectionConfig((1, 2, 3, 4), "after_pool", ("A", "H", "V", "D"), order)
    return [
        Condition("dwt1234_after_pool", full),
        Condition("dwt1234_after_pool_lambda1", full, 1.0),
        Condition("no_injection", InjectionConfig((), "after_pool", ("A", "H", "V", "D"), order)),
        Condition("dwt1234_before_pool", replace(full, placement="before_pool")),
        Condition("dwt1234_HV", replace(full, components=("H", "V"))),
        Condition("dwt1234_D", replace(full, components=("D",))),
    ]


@dataclass
class RunResult:
    condition: str
    seed: int
    lambda_lane: float
    report: MetricReport
    seconds: float


@dataclass
class AblationResult:
    runs: list[RunResult] = field(default_factory=list)

    def conditions(self) -> list[str]:
        return list(dict.fromkeys(r.condition for r in self.runs))

    def median(self, condition: str, metric: str = "lane_iou") -> float:
        vals = [getattr(r.report, metric) for r in self.runs if r.condition == condition]
        if not vals:
            raise KeyError(condition)
        return float(median(vals))

    def table(self) -> str:
        header = "condition\tseed\tlambda_lane\tmean_iou\tlane_iou\tdice\tprecision_lane\trecall_lane\tseconds"
        rows = [header]
        for r in self.runs:
            rep = r.report
            rows.append(
                f"{r.condition}\t{r.seed}\t{r.lambda_lane:g}\t{rep.mean_iou:.6f}\t{rep.lane_iou:.6f}\t{rep.dice:.6f}\t"
                f"{rep.precision[1]:.6f}\t{rep.recall[1]:.6f}\t{r.seconds:.1f}"
            )
        for c in self.conditions():
            rows.append(f"{c}\tmedian\t\t{self.median(c, 'mean_iou'):.6f}\t{self.median(c, 'lane_iou'):.6f}\t{self.median(c, 'dice'):.6f}\t\t\t")
        return "\n".join(rows) + "\n"


def run_condition(
    condition: Condition,
    data: AblationData,
    network: NetworkConfig,
    train_config: TrainConfig,
    seed: int,
) -> RunResult:
    lam = data.stats.class_ratio if condition.lambda_lane is None else condition.lambda_lane
    cfg = replace(network, injection=condition.injection)
    graph = build(cfg, seed=sample_seed(seed, PURPOSE_INIT))
    t0 = time.perf_counter()
    train(graph, data.train, replace(train_config, seed=seed, lambda_lane=lam), data.stats)
    ev = evaluate(graph, data.test, data.stats, data.patch, data.test_stride)
    dt = time.perf_counter() - t0
    log.info("%s seed %d: lane IoU %.4f mIoU %.4f (%.0fs)", condition.name, seed, ev.report.lane_iou, ev.report.mean_iou, dt)
    return RunResult(condition.name, seed, lam, ev.report, dt)


def run_ablation(
    conditions: Sequence[Condition],
    data: AblationData,
    network: NetworkConfig,
    train_config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
) -> AblationResult:
    result = AblationResult()
    for cond in conditions:
        for s in seeds:
            result.runs.append(run_condition(cond, data, network, train_config, s))
    return result


def _levels_from_token(token: str) -> tuple[int, ...]:
    token = token.strip().lower()
    if token in ("none", "", "0"):
        return ()
    return tuple(int(ch) for ch in token)


def sweep_conditions(
    lambdas: Sequence[float],
    levels: Sequence[str],
    components: Sequence[str],
    placements: Sequence[str],
    order: int = 1,
) -> list[Condition]:
    """One-factor-at-a-time sweep around levels 1-4, after_pool, all components, ratio lambda.

    A lambda <= 0 stands for the training split's class ratio.
    """
    ref = InjectionConfig((1, 2, 3, 4), "after_pool", ("A", "H", "V", "D"), order)
    out: dict[str, Condition] = {"dwt1234_after_pool": Condition("dwt1234_after_pool", ref)}
    for lam in lambdas:
        if lam > 0:
            out.setdefault(f"dwt1234_after_pool_lambda{lam:g}", Condition(f"dwt1234_after_pool_lambda{lam:g}", ref, float(lam)))
    for tok in levels:
        lv = _levels_from_token(tok)
        name = "no_injection" if not lv else f"dwt{''.join(map(str, lv))}_after_pool"
        out.setdefault(name, Condition(name, replace(ref, levels=lv)))
    for tok in components:
        comps = tuple(tok.upper())
        name = f"dwt1234_{''.join(comps)}" if set(comps) != set("AHVD") else "dwt1234_after_pool"
        out.setdefault(name, Condition(name, replace(ref, components=comps)))
    for pl in placements:
        name = f"dwt1234_{pl}"
        out.setdefault(name, Condition(name, replace(ref, placement=pl)))
    return list(out.values())


DIRECTIONAL_CHECKS = (
    # (label, better condition, worse condition, metric, strict)
    ("lambda_ratio_beats_lambda1", "dwt1234_after_pool", "dwt1234_after_pool_lambda1", "mean_iou", True),
    ("injection_beats_none", "dwt1234_after_pool", "no_injection", "mean_iou", True),
    ("after_pool_not_below_before_pool", "dwt1234_after_pool", "dwt1234_before_pool", "mean_iou", False),
    ("HV_beats_D", "dwt1234_HV", "dwt1234_D", "mean_iou", True),
)


def directional_checks(result: AblationResult) -> list[tuple[str, float, float, bool]]:
    """Median comparisons for every check whose two conditions were run."""
    have = set(result.conditions())
    out = []
    for label, better, worse, metric, strict in DIRECTIONAL_CHECKS:
        if better in have and worse in have:
            a, b = result.median(better, metric), result.median(worse, metric)
            out.append((label, a, b, a > b if strict else a >= b))
    return out
