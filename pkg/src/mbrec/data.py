"""Interaction logs, fixed-length multi-behavior sequences, Cloze masking,
leave-one-out splits, and planted synthetic datasets.

File formats
------------
Interaction file: UTF-8 text, one interaction per line, four tab-separated
decimal integers ``user_id  item_id  behavior_id  timestamp``. Lines need not
be globally sorted. A sibling header file at ``<path>.header`` holds
``key=value`` lines declaring ``num_users``, ``num_items``, ``num_behaviors``
and optionally ``behavior_names`` (comma separated).

Synthetic manifest (``<path>.manifest``): ``key=value`` lines for the
generator parameters, ``archetype.<user>=<a>`` lines for the per-user
assignments, and one ``cluster <a> <b> <item> <item> ...`` line per planted
cluster.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class DatasetError(Exception):
    """Base class for dataset problems."""


class ParseError(DatasetError):
    """Malformed line in an interaction file."""


class ValidationError(DatasetError):
    """An id is outside the vocabulary declared in the header."""


class EmptyDatasetError(DatasetError):
    """The interaction file contains no interactions."""


class ConfigError(ValueError):
    """Invalid configuration value (L <= 0, infeasible clusters, ...)."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    behavior_id: int
    timestamp: int


@dataclass(frozen=True)
class Vocab:
    """Item/behavior vocabulary sizes plus the shared pad and mask token ids.

    The reserved ids are shared between the item and behavior vocabularies
    and sit outside both ranges; embedding tables append one pad and one mask
    row after their real rows, so token ids are remapped to table rows with
    :meth:`item_rows` / :meth:`behavior_rows`.
    """

    num_items: int
    num_behaviors: int
    pad_token: int
    mask_token: int

    @classmethod
    def for_sizes(cls, num_items: int, num_behaviors: int) -> "Vocab":
        if num_items < 1 or num_behaviors < 1:
            raise ConfigError("vocabulary sizes must be positive")
        base = max(num_items, num_behaviors)
        return cls(num_items, num_behaviors, pad_token=base, mask_token=base + 1)

    def _rows(self, tokens: np.ndarray, size: int) -> np.ndarray:
        rows = np.asarray(tokens).copy()
        rows[rows == self.pad_token] = size
        rows[rows == self.mask_token] = size + 1
        return rows

    def item_rows(self, tokens: np.ndarray) -> np.ndarray:
        """Map item tokens (real ids or pad/mask) to item-table row indices."""
        return self._rows(tokens, self.num_items)

    def behavior_rows(self, tokens: np.ndarray) -> np.ndarray:
        return self._rows(tokens, self.num_behaviors)


@dataclass
class Sequence:
    """Fixed-length, left-padded (item, behavior) record for one user.

    Pad positions form a contiguous prefix: indices ``< L - length_real``.
    """

    items: np.ndarray
    behaviors: np.ndarray
    length_real: int
    user_id: int = -1

    def __len__(self) -> int:
        return len(self.items)

    def real_positions(self) -> np.ndarray:
        L = len(self.items)
        return np.arange(L - self.length_real, L)

    def copy(self) -> "Sequence":
        return Sequence(self.items.copy(), self.behaviors.copy(),
                        self.length_real, self.user_id)


@dataclass
class MaskedBatch:
    """Cloze-masked sequences plus the reconstruction targets.

    ``masked_positions[i]``, ``target_items[i]`` and ``behavior_masked[i]``
    run in parallel over the masked positions of ``sequences[i]``.
    """

    sequences: list[Sequence]
    masked_positions: list[np.ndarray]
    target_items: list[np.ndarray]
    behavior_masked: list[np.ndarray]

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flatten to (sequence_index, position, target_item) arrays."""
        idx, pos, tgt = [], [], []
        for i, positions in enumerate(self.masked_positions):
            idx.append(np.full(len(positions), i, dtype=np.int64))
            pos.append(positions)
            tgt.append(self.target_items[i])
        return (np.concatenate(idx), np.concatenate(pos), np.concatenate(tgt))


def read_header(path: Path) -> dict[str, str]:
    header_path = Path(str(path) + ".header")
    out: dict[str, str] = {}
    for line in header_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_header(path: Path, fields: dict) -> Path:
    header_path = Path(str(path) + ".header")
    header_path.write_text("".join(f"{k}={v}\n" for k, v in fields.items()))
    return header_path


def load_interactions(path: Path, vocab: Vocab) -> dict[int, list[Interaction]]:
    """Read an interaction file and group by user.

    Per-user lists are sorted by (timestamp, line number); groups are keyed
    by user id in ascending order. Raises :class:`ParseError` with the
    offending 1-based line number, :class:`ValidationError` for out-of-range
    ids, and :class:`EmptyDatasetError` for a file with no interactions.
    """
    rows: list[tuple[int, int, Interaction]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 tab-separated fields, "
                                 f"got {len(parts)}")
            try:
                user, item, behavior, ts = (int(p) for p in parts)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer field: {exc}") from None
            if user < 0 or item < 0 or behavior < 0 or ts < 0:
                raise ParseError(f"{path}:{lineno}: negative id or timestamp")
            if item >= vocab.num_items:
                raise ValidationError(f"{path}:{lineno}: item_id {item} out of range "
                                      f"[0, {vocab.num_items})")
            if behavior >= vocab.num_behaviors:
                raise ValidationError(f"{path}:{lineno}: behavior_id {behavior} out of "
                                      f"range [0, {vocab.num_behaviors})")
            rows.append((user, lineno, Interaction(user, item, behavior, ts)))
    if not rows:
        raise EmptyDatasetError(f"{path}: no interactions")

    grouped: dict[int, list[tuple[int, Interaction]]] = {}
    for user, lineno, inter in rows:
        grouped.setdefault(user, []).append((lineno, inter))
    out: dict[int, list[Interaction]] = {}
    for user in sorted(grouped):
        pairs = sorted(grouped[user], key=lambda p: (p[1].timestamp, p[0]))
        out[user] = [inter for _, inter in pairs]
    return out


@dataclass
class Dataset:
    """A loaded interaction dataset: vocabulary plus per-user ordered logs."""

    vocab: Vocab
    users: dict[int, list[Interaction]]
    behavior_names: list[str] = field(default_factory=list)

    @classmethod
    def load(cls, path: Path, min_interactions: int = 1) -> "Dataset":
        path = Path(path)
        if not path.is_file():
            raise DatasetError(f"no such data file: {path}")
        if not Path(str(path) + ".header").is_file():
            raise DatasetError(f"missing header file: {path}.header")
        header = read_header(path)
        try:
            num_users = int(header["num_users"])
            num_items = int(header["num_items"])
            num_behaviors = int(header["num_behaviors"])
        except KeyError as exc:
            raise ParseError(f"{path}.header: missing key {exc}") from None
        vocab = Vocab.for_sizes(num_items, num_behaviors)
        users = load_interactions(Path(path), vocab)
        for user in users:
            if user >= num_users:
                raise ValidationError(f"user_id {user} out of range [0, {num_users})")
        if min_interactions > 1:
            users = {u: inters for u, inters in users.items()
                     if len(inters) >= min_interactions}
            if not users:
                raise EmptyDatasetError(f"{path}: no user has >= {min_interactions} "
                                        "interactions")
        names = header.get("behavior_names", "")
        behavior_names = [n for n in names.split(",") if n] if names else []
        return cls(vocab, users, behavior_names)

    def interactions(self):
        for inters in self.users.values():
            yield from inters

    def behavior_label(self, b: int) -> str:
        if 0 <= b < len(self.behavior_names):
            return self.behavior_names[b]
        return f"b{b}"


def build_sequences(users: dict[int, list[Interaction]], L: int,
                    vocab: Vocab) -> list[Sequence]:
    """Left-pad or truncate each user's log to a fixed length L.

    Users with more than L interactions keep the most recent L; items and
    behaviors stay positionally paired.
    """
    if L <= 0:
        raise ConfigError(f"sequence length must be positive, got {L}")
    out = []
    for user, inters in users.items():
        kept = inters[-L:]
        n = len(kept)
        items = np.full(L, vocab.pad_token, dtype=np.int64)
        behaviors = np.full(L, vocab.pad_token, dtype=np.int64)
        items[L - n:] = [it.item_id for it in kept]
        behaviors[L - n:] = [it.behavior_id for it in kept]
        out.append(Sequence(items, behaviors, n, user_id=user))
    return out


def cloze_mask(sequences: list[Sequence], rho: float, sigma: float,
               rng: np.random.Generator, vocab: Vocab) -> MaskedBatch:
    """Apply Cloze masking: each non-pad item position is masked with
    probability rho; each masked position's behavior is additionally masked
    with probability sigma. A sequence that would receive zero masks gets one
    forced mask at a uniformly random non-pad position.

    Draw order per sequence (for reproducibility): item Bernoullis over the
    non-pad positions in index order, then the forced-position draw if
    needed, then behavior Bernoullis over the masked positions in order.
    """
    if not 0.0 <= rho <= 1.0 or not 0.0 <= sigma <= 1.0:
        raise ConfigError("mask probabilities must lie in [0, 1]")
    if not sequences:
        raise EmptyDatasetError("cloze_mask: no sequences")

    masked_seqs, all_pos, all_tgt, all_bm = [], [], [], []
    for seq in sequences:
        real = seq.real_positions()
        hit = rng.random(len(real)) < rho
        if not hit.any():
            hit[rng.integers(len(real))] = True
        positions = real[hit]
        bmask = rng.random(len(positions)) < sigma

        out = seq.copy()
        targets = out.items[positions].copy()
        out.items[positions] = vocab.mask_token
        out.behaviors[positions[bmask]] = vocab.mask_token
        masked_seqs.append(out)
        all_pos.append(positions.astype(np.int64))
        all_tgt.append(targets)
        all_bm.append(bmask)
    return MaskedBatch(masked_seqs, all_pos, all_tgt, all_bm)


def next_item_split(sequences: list[Sequence],
                    vocab: Vocab) -> list[tuple[Sequence, int, int]]:
    """Leave-one-out split: drop each sequence's final real pair and replace
    it with a trailing (mask, mask) slot at position L-1; the dropped pair is
    the target. Sequences with fewer than 2 real interactions are skipped
    with a counted warning.
    """
    out = []
    skipped = 0
    for seq in sequences:
        if seq.length_real < 2:
            skipped += 1
            continue
        L = len(seq)
        target_item = int(seq.items[L - 1])
        target_behavior = int(seq.behaviors[L - 1])
        n_prefix = seq.length_real - 1
        items = np.full(L, vocab.pad_token, dtype=np.int64)
        behaviors = np.full(L, vocab.pad_token, dtype=np.int64)
        items[L - 1 - n_prefix:L - 1] = seq.items[L - seq.length_real:L - 1]
        behaviors[L - 1 - n_prefix:L - 1] = seq.behaviors[L - seq.length_real:L - 1]
        items[L - 1] = vocab.mask_token
        behaviors[L - 1] = vocab.mask_token
        prefix = Sequence(items, behaviors, n_prefix + 1, user_id=seq.user_id)
        out.append((prefix, target_item, target_behavior))
    if skipped:
        log.warning("next_item_split: skipped %d sequence(s) with fewer than 2 "
                    "real interactions", skipped)
    return out


def leave_one_out(users: dict[int, list[Interaction]]) -> tuple[
        dict[int, list[Interaction]], dict[int, Interaction]]:
    """Split each user's log into (everything but the last, the last).

    Users with a single interaction have nothing to hold out and are skipped
    with a counted warning. Training stages see only the first component;
    the held-out interaction is the evaluation target.
    """
    train: dict[int, list[Interaction]] = {}
    test: dict[int, Interaction] = {}
    skipped = 0
    for user, inters in users.items():
        if len(inters) < 2:
            skipped += 1
            continue
        train[user] = inters[:-1]
        test[user] = inters[-1]
    if skipped:
        log.warning("leave_one_out: skipped %d user(s) with a single "
                    "interaction", skipped)
    return train, test


def stack_sequences(sequences: list[Sequence]) -> tuple[np.ndarray, np.ndarray,
                                                        np.ndarray, np.ndarray]:
    """Stack into (items, behaviors, lengths, user_ids) arrays of shape (N, L)."""
    items = np.stack([s.items for s in sequences])
    behaviors = np.stack([s.behaviors for s in sequences])
    lengths = np.array([s.length_real for s in sequences], dtype=np.int64)
    users = np.array([s.user_id for s in sequences], dtype=np.int64)
    return items, behaviors, lengths, users


# ---------------------------------------------------------------------------
# Planted synthetic datasets


DEFAULT_BEHAVIOR_NAMES = ["click", "fav", "cart", "buy"]


@dataclass
class SyntheticSpec:
    """Parameters of the planted generator.

    Every user belongs to one archetype; for each (archetype, behavior) pair
    a disjoint item cluster of ``cluster_size`` items is fixed, and the
    user's interactions draw a behavior from ``behavior_frequencies`` and an
    item uniformly from the matching cluster. The planted clusters give
    behavior-specific prediction an unambiguous right answer.
    """

    num_users: int
    num_items: int
    num_behaviors: int
    archetypes: int
    cluster_size: int
    behavior_frequencies: tuple[float, ...]
    seq_len_range: tuple[int, int] = (8, 40)
    seed: int = 0

    def validate(self) -> None:
        if min(self.num_users, self.num_items, self.num_behaviors,
               self.archetypes, self.cluster_size) < 1:
            raise ConfigError("all synthetic sizes must be positive")
        if len(self.behavior_frequencies) != self.num_behaviors:
            raise ConfigError("behavior_frequencies length must equal num_behaviors")
        if abs(sum(self.behavior_frequencies) - 1.0) > 1e-12:
            raise ConfigError("behavior_frequencies must sum to 1")
        if self.archetypes * self.num_behaviors * self.cluster_size > self.num_items:
            raise ConfigError("cluster allocation infeasible: archetypes * behaviors "
                              "* cluster_size exceeds num_items")
        lo, hi = self.seq_len_range
        if lo < 1 or hi < lo:
            raise ConfigError("invalid seq_len_range")


def gen_synthetic(spec: SyntheticSpec, out_path: Path) -> tuple[Path, Path]:
    """Write a planted dataset to ``out_path`` (plus header and manifest
    siblings). Fully deterministic given ``spec.seed``; returns the data and
    manifest paths.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    # Disjoint clusters over a seeded permutation of the catalog.
    perm = rng.permutation(spec.num_items)
    clusters: dict[tuple[int, int], np.ndarray] = {}
    k = 0
    for a in range(spec.archetypes):
        for b in range(spec.num_behaviors):
            clusters[(a, b)] = np.sort(perm[k:k + spec.cluster_size])
            k += spec.cluster_size

    archetype = rng.integers(spec.archetypes, size=spec.num_users)
    freqs = np.asarray(spec.behavior_frequencies, dtype=np.float64)

    out_path = Path(out_path)
    lo, hi = spec.seq_len_range
    with open(out_path, "w", encoding="utf-8") as fh:
        for user in range(spec.num_users):
            n = int(rng.integers(lo, hi + 1))
            behaviors = rng.choice(spec.num_behaviors, size=n, p=freqs)
            for t in range(n):
                b = int(behaviors[t])
                cluster = clusters[(int(archetype[user]), b)]
                item = int(cluster[rng.integers(len(cluster))])
                fh.write(f"{user}\t{item}\t{b}\t{t}\n")

    names = (DEFAULT_BEHAVIOR_NAMES if spec.num_behaviors == 4
             else [f"b{i}" for i in range(spec.num_behaviors)])
    write_header(out_path, {
        "num_users": spec.num_users,
        "num_items": spec.num_items,
        "num_behaviors": spec.num_behaviors,
        "behavior_names": ",".join(names),
    })

    manifest_path = Path(str(out_path) + ".manifest")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(f"num_users={spec.num_users}\n")
        fh.write(f"num_items={spec.num_items}\n")
        fh.write(f"num_behaviors={spec.num_behaviors}\n")
        fh.write(f"archetypes={spec.archetypes}\n")
        fh.write(f"cluster_size={spec.cluster_size}\n")
        fh.write(f"seed={spec.seed}\n")
        fh.write("behavior_frequencies=" +
                 ",".join(repr(f) for f in spec.behavior_frequencies) + "\n")
        for user in range(spec.num_users):
            fh.write(f"archetype.{user}={int(archetype[user])}\n")
        for (a, b), items in clusters.items():
            fh.write(f"cluster {a} {b} " + " ".join(str(i) for i in items) + "\n")
    return out_path, manifest_path


@dataclass
class SyntheticManifest:
    """Parsed ground truth of a planted dataset."""

    archetype: dict[int, int]
    clusters: dict[tuple[int, int], np.ndarray]
    params: dict[str, str]

    @classmethod
    def load(cls, path: Path) -> "SyntheticManifest":
        archetype: dict[int, int] = {}
        clusters: dict[tuple[int, int], np.ndarray] = {}
        params: dict[str, str] = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("cluster "):
                parts = line.split()
                a, b = int(parts[1]), int(parts[2])
                clusters[(a, b)] = np.array([int(x) for x in parts[3:]], dtype=np.int64)
            elif line.startswith("archetype."):
                key, _, value = line.partition("=")
                archetype[int(key.split(".", 1)[1])] = int(value)
            else:
                key, _, value = line.partition("=")
                params[key] = value
        return cls(archetype, clusters, params)

    def cluster_of(self, user: int, behavior: int) -> np.ndarray:
        return self.clusters[(self.archetype[user], behavior)]
