"""Ranking metrics, behavior-stratified evaluation, few-shot omission, and
hyperparameter sweeps.

Evaluation is leave-one-out over the full catalog: for each test triple the
target item's rank is computed among all items (ties broken by ascending id)
and Recall@K / NDCG@K are averaged overall and per target behavior.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import Config, derive_seed
from .data import (ConfigError, EmptyDatasetError, Interaction, Sequence,
                   Vocab, build_sequences)
from .pipeline import (Bundle, SplitData, guided_scores, slot_latents,
                       train_all, user_noise)

log = logging.getLogger(__name__)

EVAL_MODES = ("diffusion", "encoder", "encoder-agnostic")


def recall_at_k(rank: int | None, k: int) -> float:
    """1 if the target ranked within the top k, else 0; rank is 1-based."""
    if rank is not None and rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return 1.0 if rank is not None and rank <= k else 0.0


def ndcg_at_k(rank: int | None, k: int) -> float:
    """1/log2(rank+1) within the cutoff, else 0; single-relevant-item form
    with ideal DCG = 1.
    """
    if rank is not None and rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def ranks_of_targets(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each row's target item under descending-logit order
    with ascending-id tie-breaking.
    """
    B, V = logits.shape
    target_logits = logits[np.arange(B), targets]
    higher = (logits > target_logits[:, None]).sum(axis=1)
    tied_before = np.zeros(B, dtype=np.int64)
    for i in range(B):
        row = logits[i]
        tied_before[i] = int(np.count_nonzero(
            (row[:targets[i]] == target_logits[i])))
    return higher + tied_before + 1


@dataclass
class EvalReport:
    ks: list[int]
    mode: str
    count: int
    recall: dict[int, float]
    ndcg: dict[int, float]
    behavior_counts: dict[int, int]
    behavior_recall: dict[int, dict[int, float]]
    behavior_ndcg: dict[int, dict[int, float]]
    behavior_labels: dict[int, str] = field(default_factory=dict)
    config_echo: list[str] = field(default_factory=list)

    def _label(self, b: int) -> str:
        return self.behavior_labels.get(b, f"b{b}")

    def format(self) -> str:
        cols = [f"R@{k}" for k in self.ks] + [f"N@{k}" for k in self.ks]
        lines = [f"mode={self.mode} count={self.count}"]
        lines.append("  ".join(["behavior".ljust(12), "n".rjust(6)]
                               + [c.rjust(8) for c in cols]))
        def row(label, n, rec, nd):
            vals = [f"{rec[k]:.4f}" for k in self.ks] \
                + [f"{nd[k]:.4f}" for k in self.ks]
            return "  ".join([label.ljust(12), str(n).rjust(6)]
                             + [v.rjust(8) for v in vals])
        lines.append(row("overall", self.count, self.recall, self.ndcg))
        for b in sorted(self.behavior_counts):
            lines.append(row(self._label(b), self.behavior_counts[b],
                             self.behavior_recall[b], self.behavior_ndcg[b]))
        return "\n".join(lines)

    def record_lines(self) -> list[str]:
        """Machine-readable key=value block."""
        out = [f"mode={self.mode}", f"count={self.count}"]
        for k in self.ks:
            out.append(f"recall@{k}={self.recall[k]!r}")
            out.append(f"ndcg@{k}={self.ndcg[k]!r}")
        for b in sorted(self.behavior_counts):
            out.append(f"behavior.{b}.label={self._label(b)}")
            out.append(f"behavior.{b}.count={self.behavior_counts[b]}")
            for k in self.ks:
                out.append(f"behavior.{b}.recall@{k}="
                           f"{self.behavior_recall[b][k]!r}")
                out.append(f"behavior.{b}.ndcg@{k}="
                           f"{self.behavior_ndcg[b][k]!r}")
        return out


def _score_batch(bundle: Bundle, prefixes: list[Sequence],
                 behaviors: np.ndarray, mode: str, seed: int) -> np.ndarray:
    if mode == "diffusion":
        uids = [p.user_id for p in prefixes]
        z0 = user_noise(bundle, uids, seed)
        return guided_scores(bundle, prefixes, behaviors, z0)
    if mode == "encoder":
        z = slot_latents(bundle.model, prefixes, behaviors)
    elif mode == "encoder-agnostic":
        z = slot_latents(bundle.model, prefixes)
    else:
        raise ConfigError(f"unknown eval mode {mode!r}; "
                          f"expected one of {EVAL_MODES}")
    with torch.no_grad():
        return bundle.model.decode(z).numpy()


def evaluate(bundle: Bundle, test_splits: list[tuple[Sequence, int, int]],
             ks: list[int], seed: int, mode: str = "diffusion",
             batch_size: int = 256) -> EvalReport:
    """Score every test triple under its target behavior and aggregate."""
    if not test_splits:
        raise EmptyDatasetError("evaluate: empty test set")
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode {mode!r}")
    if mode == "diffusion" and bundle.denoiser is None:
        raise ValueError("diffusion-mode evaluation needs a trained denoiser")
    bundle.model.eval()

    all_ranks = np.zeros(len(test_splits), dtype=np.int64)
    behaviors = np.array([b for _, _, b in test_splits], dtype=np.int64)
    targets = np.array([t for _, t, _ in test_splits], dtype=np.int64)
    for start in range(0, len(test_splits), batch_size):
        chunk = test_splits[start:start + batch_size]
        prefixes = [p for p, _, _ in chunk]
        logits = _score_batch(bundle, prefixes,
                              behaviors[start:start + len(chunk)], mode, seed)
        all_ranks[start:start + len(chunk)] = ranks_of_targets(
            logits, targets[start:start + len(chunk)])

    def metrics(ranks: np.ndarray):
        rec = {k: float(np.mean([recall_at_k(int(r), k) for r in ranks]))
               for k in ks}
        nd = {k: float(np.mean([ndcg_at_k(int(r), k) for r in ranks]))
              for k in ks}
        return rec, nd

    recall, ndcg = metrics(all_ranks)
    behavior_counts: dict[int, int] = {}
    behavior_recall: dict[int, dict[int, float]] = {}
    behavior_ndcg: dict[int, dict[int, float]] = {}
    for b in sorted(set(behaviors.tolist())):
        sel = behaviors == b
        behavior_counts[b] = int(sel.sum())
        behavior_recall[b], behavior_ndcg[b] = metrics(all_ranks[sel])

    labels = {b: (bundle.behavior_names[b]
                  if 0 <= b < len(bundle.behavior_names) else f"b{b}")
              for b in behavior_counts}
    return EvalReport(list(ks), mode, len(test_splits), recall, ndcg,
                      behavior_counts, behavior_recall, behavior_ndcg,
                      labels, bundle.conf.echo_lines())


# ---------------------------------------------------------------------------
# Few-shot omission


def few_shot_drop(train_users: dict[int, list[Interaction]],
                  target_behavior: int, ratio: float,
                  seed: int) -> dict[int, list[Interaction]]:
    """Uniformly remove floor(ratio * n_b) of the target behavior's training
    interactions; other behaviors and the held-out test set are untouched.
    Users left with an empty log are dropped from the result.

    For a fixed seed the removals are nested: a larger ratio removes a
    superset of a smaller one, so a ratio sweep varies only the amount of
    supervision, never which examples happen to be resampled.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"omission ratio must lie in [0, 1], got {ratio}")
    slots = [(u, i) for u, inters in train_users.items()
             for i, inter in enumerate(inters)
             if inter.behavior_id == target_behavior]
    k = int(math.floor(ratio * len(slots)))
    rng = np.random.default_rng(derive_seed(seed, "fewshot"))
    order = rng.permutation(len(slots))
    removed = {slots[int(c)] for c in order[:k]}
    out: dict[int, list[Interaction]] = {}
    for u, inters in train_users.items():
        kept = [inter for i, inter in enumerate(inters)
                if (u, i) not in removed]
        if kept:
            out[u] = kept
    return out


def few_shot_curve(split: SplitData, conf: Config, target_behavior: int,
                   ratios: list[float], eval_seed: int,
                   mode: str = "diffusion") -> list[tuple[float, EvalReport]]:
    """Retrain the full pipeline per omission ratio and evaluate on the
    untouched test split.
    """
    if not 0 <= target_behavior < split.vocab.num_behaviors:
        raise ValueError(f"unknown behavior id {target_behavior}")
    rows = []
    for ratio in ratios:
        dropped = few_shot_drop(split.train_users, target_behavior, ratio,
                                conf.seed)
        reduced = SplitData(
            split.vocab, split.behavior_names, dropped,
            build_sequences(dropped, conf["data.L"], split.vocab),
            split.test_splits)
        bundle = train_all(reduced, conf)
        report = evaluate(bundle, split.test_splits, conf.ks(), eval_seed,
                          mode)
        log.info("few-shot ratio %.2f recall@%d %.4f", ratio, conf.ks()[0],
                 report.recall[conf.ks()[0]])
        rows.append((ratio, report))
    return rows


# ---------------------------------------------------------------------------
# Hyperparameter sweeps

SWEEP_AXES = {
    "rho": "train.rho",
    "sigma": "train.sigma",
    "T": "diffusion.T",
    "dt": "diffusion.stride",
    "omega": "diffusion.omega",
}


def _axis_valid(axis: str, value, conf: Config) -> bool:
    if axis in ("rho", "sigma"):
        return 0.0 < value <= 1.0
    if axis == "T":
        return value >= 1 and value % conf["diffusion.stride"] == 0
    if axis == "dt":
        return value >= 1 and conf["diffusion.T"] % value == 0
    return value >= 0.0  # omega


def sweep(split: SplitData, conf: Config, axis: str, values: list,
          eval_seed: int) -> list[tuple[object, EvalReport]]:
    """Full retrain per value with shared seeds; invalid values are skipped
    with a warning.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; "
                          f"expected one of {sorted(SWEEP_AXES)}")
    rows = []
    for value in values:
        if not _axis_valid(axis, value, conf):
            log.warning("sweep: skipping invalid %s value %r", axis, value)
            continue
        run_conf = conf.with_values({SWEEP_AXES[axis]: value})
        bundle = train_all(split, run_conf)
        report = evaluate(bundle, split.test_splits, run_conf.ks(), eval_seed)
        log.info("sweep %s=%r recall@%d %.4f", axis, value, run_conf.ks()[0],
                 report.recall[run_conf.ks()[0]])
        rows.append((value, report))
    return rows


def sweep_table(axis: str, rows: list[tuple[object, EvalReport]]) -> str:
    if not rows:
        return f"axis={axis}\n(no valid values)"
    ks = rows[0][1].ks
    cols = [f"R@{k}" for k in ks] + [f"N@{k}" for k in ks]
    lines = [f"axis={axis}",
             "  ".join([axis.ljust(8)] + [c.rjust(8) for c in cols])]
    for value, report in rows:
        vals = [f"{report.recall[k]:.4f}" for k in ks] \
            + [f"{report.ndcg[k]:.4f}" for k in ks]
        lines.append("  ".join([str(value).ljust(8)]
                               + [v.rjust(8) for v in vals]))
    return "\n".join(lines)


def sweep_plot(axis: str, rows: list[tuple[object, EvalReport]],
               out_path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = [v for v, _ in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    k = rows[0][1].ks[0] if rows else 10
    ax.plot(values, [r.recall[k] for _, r in rows], marker="o",
            label=f"Recall@{k}")
    ax.plot(values, [r.ndcg[k] for _, r in rows], marker="s",
            label=f"NDCG@{k}")
    ax.set_xlabel(axis)
    ax.set_ylabel("metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
