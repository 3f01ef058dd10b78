"""Tie-aware AUC, the normalized leakage metric, and minority-aware aggregation.

The leakage value for one (method, attack, scenario) cell is the attack's AUC
gap between the unlearned and retrained models, normalized by the retrained
model's AUC: zero means indistinguishable, positive means under-forgetting,
negative means over-forgetting. The minority-aware summary keeps, per
(method, attack), the scenario with the largest leakage magnitude (sign
preserved) and flags cells whose canary/minority leakage exceeds the random
baseline by at least 20%.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attack import AttackScore
from .errors import (
    DegenerateBaseError,
    DegenerateRetrainAucError,
    MissingScenarioError,
    OneClassError,
)

EPS = 1e-9
SCENARIOS = ("random", "canary", "minority")
UNDERESTIMATE_THRESHOLD = 0.20


@dataclass(frozen=True)
class AucResult:
    auc: float
    n_members: int
    n_nonmembers: int


def auc(scores: Sequence[AttackScore]) -> AucResult:
    """Mann-Whitney AUC with average-rank tie handling (ties credit 0.5)."""
    y = np.array([s.is_member for s in scores], dtype=bool)
    x = np.array([s.score for s in scores], dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassError("need at least one member and one non-member score")
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(sorted_x):
        j = i
        while j + 1 < len(sorted_x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0  # average of 1-based ranks
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return AucResult(auc=u / (n_pos * n_neg), n_members=n_pos, n_nonmembers=n_neg)


def privleak(auc_unlearn: float, auc_retrain: float) -> float:
    """Normalized AUC gap between the unlearned and retrained models."""
    if auc_retrain <= EPS:
        raise DegenerateRetrainAucError(
            f"retrain AUC {auc_retrain} too small to normalize against"
        )
    return (auc_unlearn - auc_retrain) / auc_retrain


def excess_ratio(pl_case: float, pl_random: float) -> float:
    """Relative growth of leakage magnitude in a scenario over the random case."""
    if abs(pl_random) <= EPS:
        raise DegenerateBaseError(f"random-case leakage {pl_random} too small to divide by")
    return (abs(pl_case) - abs(pl_random)) / abs(pl_random)


@dataclass(frozen=True)
class PrivLeakRecord:
    method: str
    attack: str
    scenario: str
    auc_unlearn: float
    auc_retrain: float
    pl: float
    perplexity: float


@dataclass(frozen=True)
class SummaryEntry:
    method: str
    attack: str
    pl_by_scenario: dict[str, float]
    worst_pl: float
    worst_scenario: str
    excess_ratio_canary: Optional[float]
    excess_ratio_minority: Optional[float]
    worst_perplexity: float
    underestimated: bool


@dataclass(frozen=True)
class MinorityAwareSummary:
    entries: tuple[SummaryEntry, ...]

    def entry(self, method: str, attack: str) -> SummaryEntry:
        for e in self.entries:
            if e.method == method and e.attack == attack:
                return e
        raise KeyError((method, attack))


def aggregate(records: Sequence[PrivLeakRecord]) -> MinorityAwareSummary:
    """Collapse per-scenario records into the minority-aware summary.

    Requires all three scenarios per (method, attack). Excess ratios are None
    when the random-case leakage is too small to normalize by.
    """
    cells: dict[tuple[str, str], dict[str, PrivLeakRecord]] = {}
    for r in records:
        cells.setdefault((r.method, r.attack), {})[r.scenario] = r
    entries = []
    for (method, attack) in sorted(cells):
        per = cells[(method, attack)]
        missing = [s for s in SCENARIOS if s not in per]
        if missing:
            raise MissingScenarioError(
                f"{method}/{attack} lacks scenarios {missing}; have {sorted(per)}"
            )
        pls = {s: per[s].pl for s in SCENARIOS}
        worst_scenario = max(SCENARIOS, key=lambda s: abs(pls[s]))
        ratios = {}
        for s in ("canary", "minority"):
            try:
                ratios[s] = excess_ratio(pls[s], pls["random"])
            except DegenerateBaseError:
                ratios[s] = None
        flagged = any(r is not None and r >= UNDERESTIMATE_THRESHOLD for r in ratios.values())
        entries.append(
            SummaryEntry(
                method=method,
                attack=attack,
                pl_by_scenario=pls,
                worst_pl=pls[worst_scenario],
                worst_scenario=worst_scenario,
                excess_ratio_canary=ratios["canary"],
                excess_ratio_minority=ratios["minority"],
                worst_perplexity=max(per[s].perplexity for s in SCENARIOS),
                underestimated=flagged,
            )
        )
    return MinorityAwareSummary(entries=tuple(entries))
