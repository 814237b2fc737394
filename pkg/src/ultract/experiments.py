"""Multi-seed desk study behind the method-comparison trends.

One call trains the transform models once, then for every seed simulates a
scan and reconstructs it with FBP, PWLS-EP, PWLS-ST and PWLS-ULTRA for each
requested ``K``, plus the oracle-label and patch-weighted ULTRA variants.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .metrics import edge_mask, soft_tissue_mask
from .pipeline import build_problem, run_ep, run_fbp, run_ultra, train_model, training_patches

REGIONS = ("roi", "edge", "soft")


@dataclass
class StudyResult:
    """RMSE tables keyed ``[variant][region]`` holding one value per seed."""

    seeds: list[int]
    rmse: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    runtime: dict[str, list[float]] = field(default_factory=dict)
    train_time: dict[int, float] = field(default_factory=dict)

    def add(self, variant: str, values: dict[str, float], seconds: float) -> None:
        row = self.rmse.setdefault(variant, {r: [] for r in REGIONS})
        for r in REGIONS:
            row[r].append(values[r])
        self.runtime.setdefault(variant, []).append(seconds)

    def mean(self, variant: str, region: str = "roi") -> float:
        return float(np.mean(self.rmse[variant][region]))

    def table(self) -> str:
        lines = [f"{'variant':<10}" + "".join(f"{r:>9}" for r in REGIONS) + f"{'time_s':>9}"]
        for v in self.rmse:
            lines.append(f"{v:<10}" + "".join(f"{self.mean(v, r):9.2f}" for r in REGIONS)
                         + f"{np.mean(self.runtime[v]):9.1f}")
        return "\n".join(lines)


def desk_study(cfg: ExperimentConfig, seeds, Ks=(1, 5), oracle_K: int | None = None,
               tau_K: int | None = None, log=None) -> StudyResult:
    """Run the comparison and return per-seed RMSE in the ROI, edge and soft-tissue regions.

    ``Ks`` must contain 1 (PWLS-ST, reported as ``st``); other entries are
    reported as ``ultra<K>``. ``oracle_K``/``tau_K`` add ``oracle<K>``
    (labels from the reference image) and ``tau<K>`` (patch weights on).
    """
    log = log or (lambda msg: None)
    problem = build_problem(cfg)
    truth_hu = problem.truth_hu
    roi = problem.mask()
    masks = {"roi": roi, "edge": edge_mask(truth_hu) & roi, "soft": soft_tissue_mask(truth_hu) & roi}

    res = StudyResult(list(seeds))
    X = training_patches(cfg)
    models = {}
    for K in sorted(set(Ks) | {k for k in (oracle_K, tau_K) if k is not None}):
        t0 = time.perf_counter()
        models[K] = train_model(cfg, K, X)
        res.train_time[K] = time.perf_counter() - t0
        log(f"trained K={K} in {res.train_time[K]:.1f}s")

    def record(name, recon, seconds):
        vals = {r: problem.rmse(recon.image, m) for r, m in masks.items()}
        res.add(name, vals, seconds)
        log(f"  {name:<9} rmse {vals['roi']:6.2f}  edge {vals['edge']:6.2f}  "
            f"soft {vals['soft']:5.2f}  ({seconds:.1f}s)")

    for seed in seeds:
        log(f"seed {seed}")
        sino = problem.simulate(seed)
        f = run_fbp(problem, sino)
        record("fbp", f, f.runtime)
        ep = run_ep(problem, sino, f.image)
        record("ep", ep, ep.runtime)
        for K in Ks:
            r = run_ultra(problem, sino, models[K], ep.image)
            record("st" if K == 1 else f"ultra{K}", r, r.runtime)
        if oracle_K is not None:
            r = run_ultra(problem, sino, models[oracle_K], ep.image, oracle=True)
            record(f"oracle{oracle_K}", r, r.runtime)
        if tau_K is not None:
            r = run_ultra(problem, sino, models[tau_K], ep.image, use_tau=True)
            record(f"tau{tau_K}", r, r.runtime)
    return res
