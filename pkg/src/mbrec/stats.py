"""Information-theoretic diagnostics over a dataset: entropies, conditional
entropies, and mutual information between items and behaviors, all in bits
from the empirical (plug-in) joint distribution of (item, behavior) pairs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import EmptyDatasetError


@dataclass
class JointCounts:
    counts: dict[tuple[int, int], int]
    total: int


@dataclass
class EntropyReport:
    H_I: float
    H_B: float
    H_B_given_I: float
    H_I_given_B: float
    MI: float

    def as_dict(self) -> dict[str, float]:
        return {"H_I": self.H_I, "H_B": self.H_B, "H_B_given_I": self.H_B_given_I,
                "H_I_given_B": self.H_I_given_B, "MI": self.MI}

    def format(self) -> str:
        return "".join(f"{k}={v:.6f}\n" for k, v in self.as_dict().items())

    def record_line(self) -> str:
        return " ".join(f"{k}={v:.6f}" for k, v in self.as_dict().items())


def joint_counts(interactions) -> JointCounts:
    """Exact (item, behavior) frequency table over an interaction iterable."""
    counter: Counter = Counter()
    for inter in interactions:
        counter[(inter.item_id, inter.behavior_id)] += 1
    if not counter:
        raise EmptyDatasetError("joint_counts: no interactions")
    return JointCounts(dict(counter), sum(counter.values()))


def _entropy_bits(counts: np.ndarray, total: int) -> float:
    # H = log2(N) - (1/N) * sum c * log2 c, with 0 log 0 := 0.
    c = counts[counts > 0].astype(np.float64)
    return float(np.log2(total) - np.dot(c, np.log2(c)) / total)


def entropy_report(jc: JointCounts) -> EntropyReport:
    """Shannon entropies in bits from the empirical joint distribution.

    The chain-rule identities MI = H_B - H_B|I = H_I - H_I|B hold because all
    five fields derive from the three plug-in entropies H_I, H_B, H_joint.
    """
    if jc.total < 1:
        raise EmptyDatasetError("entropy_report: empty counts")
    item_counts: Counter = Counter()
    behavior_counts: Counter = Counter()
    for (item, behavior), c in jc.counts.items():
        item_counts[item] += c
        behavior_counts[behavior] += c

    H_I = _entropy_bits(np.array(list(item_counts.values())), jc.total)
    H_B = _entropy_bits(np.array(list(behavior_counts.values())), jc.total)
    H_J = _entropy_bits(np.array(list(jc.counts.values())), jc.total)
    return EntropyReport(
        H_I=H_I,
        H_B=H_B,
        H_B_given_I=H_J - H_I,
        H_I_given_B=H_J - H_B,
        MI=H_I + H_B - H_J,
    )
