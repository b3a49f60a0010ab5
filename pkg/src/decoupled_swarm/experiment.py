"""The multi-seed ordering experiment: every method on the same data, then the ordering claims.

Claims (each must hold in at least ``need`` of the seeds):

* ``task2_gain``: ours beats swarm_plain on the label-skewed centers' local
  test sets by ``gain_margin`` or more (mean over those centers);
* ``task1_noninferior``: ours' generic Dice is no worse than swarm_plain's
  minus ``noninferior_margin``;
* ``single_below_swarm``: local-only training loses to plain swarm on the
  generic set;
* ``ablation``: ours' generic Dice is at least that of both adaptation ablations.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

from .config import ExperimentConfig
from .evaluation import EvalReport, config_digest, evaluate
from .swarm import METHODS, run_swarm
from .synthdata import build_federation_data

log = logging.getLogger(__name__)


@dataclass
class ClaimResult:
    name: str
    per_seed: list[float]        # the compared quantity, one per seed
    held: list[bool]
    need: int

    @property
    def passed(self) -> bool:
        return sum(self.held) >= self.need

    def line(self) -> str:
        vals = " ".join(f"{v:+.4f}" for v in self.per_seed)
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<20s} held {sum(self.held)}/{len(self.held)} " \
               f"(need {self.need})  per seed: {vals}"


@dataclass
class OrderingResult:
    reports: dict[int, dict[str, EvalReport]] = field(default_factory=dict)
    seconds: dict[int, float] = field(default_factory=dict)

    def csv(self) -> str:
        """All reports concatenated in seed then method order; the determinism fingerprint."""
        return "".join(self.reports[s][m].to_csv() for s in sorted(self.reports) for m in self.reports[s])


def run_ordering(config: ExperimentConfig, seeds, methods=METHODS) -> OrderingResult:
    out = OrderingResult()
    for seed in seeds:
        t0 = time.time()
        cfg = dataclasses.replace(config, seed=seed)
        data = build_federation_data(cfg.centers, seed, cfg.n_generic, cfg.geom)
        out.reports[seed] = {}
        for m in methods:
            mcfg = dataclasses.replace(cfg, method=m)
            hist = run_swarm(mcfg, data, m)
            out.reports[seed][m] = evaluate(m, hist.centers, data, cfg.eval_samples, cfg.eval_latent, seed,
                                            config_digest(mcfg))
            log.info("seed %d %s done (%.0fs so far)", seed, m, time.time() - t0)
        out.seconds[seed] = time.time() - t0
    return out


def skewed_centers(config: ExperimentConfig) -> list[int]:
    return [c.center_id for c in config.centers if c.label_skew != "none"]


def ordering_claims(result: OrderingResult, skewed: list[int], need: int = 2, gain_margin: float = 0.03,
                    noninferior_margin: float = 0.01) -> list[ClaimResult]:
    seeds = sorted(result.reports)
    r = [result.reports[s] for s in seeds]
    gain = [x["ours"].task2_mean(skewed) - x["swarm_plain"].task2_mean(skewed) for x in r]
    t1 = [x["ours"].value("task1") - x["swarm_plain"].value("task1") for x in r]
    single = [x["swarm_plain"].value("task1") - x["single"].value("task1") for x in r]
    abl = [x["ours"].value("task1") - max(x["fixed_adapt"].value("task1"), x["img_adapt"].value("task1"))
           for x in r]
    return [
        ClaimResult("task2_gain", gain, [g >= gain_margin for g in gain], need),
        ClaimResult("task1_noninferior", t1, [d >= -noninferior_margin for d in t1], need),
        ClaimResult("single_below_swarm", single, [d > 0 for d in single], need),
        ClaimResult("ablation", abl, [d >= 0 for d in abl], need),
    ]


def summary_table(result: OrderingResult, skewed: list[int]) -> str:
    """Plain-text table: generic Dice and skewed-center local Dice per seed and method."""
    lines = [f"{'seed':>4s} {'method':<12s} {'task1':>7s} {'task2(skewed)':>14s} {'task2(all)':>11s}"]
    for s in sorted(result.reports):
        for m, rep in result.reports[s].items():
            centers = [row["center"] for row in rep.rows if row["task"] == "task2"]
            lines.append(f"{s:>4d} {m:<12s} {rep.value('task1'):7.4f} {rep.task2_mean(skewed):14.4f} "
                         f"{rep.task2_mean(centers):11.4f}")
    return "\n".join(lines)
