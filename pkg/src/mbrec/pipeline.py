"""Three-stage training, checkpointed bundles, and guided next-item inference.

Stage 1 pretrains the sequence autoencoder on the Cloze reconstruction task.
Stage 2 freezes it and trains the denoiser to predict the noise added to
behavior-specific latents, conditioned on the agnostic latent read at the
same slot. Stage 3 freezes encoder and denoiser and fine-tunes only the
decoder on next-item prediction from fully sampled latents.

Determinism: every stage reseeds the global torch generator and draws the
rest from explicit streams derived via config.derive_seed, so the triple
(dataset seed, train seed, inference seed) pins every reported number.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from . import checkpoint as ckpt
from .config import Config, derive_seed, resolve_config
from .data import (Dataset, Interaction, Sequence, Vocab, build_sequences,
                   cloze_mask, leave_one_out, next_item_split, stack_sequences)
from .denoiser import build_denoiser
from .diffusion import (NoiseSchedule, forward_sample, make_schedule,
                        null_mask, sample, sample_timesteps)
from .model import SeqAutoencoder, mbae_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class Bundle:
    """Everything needed to run inference: models, schedule, config, vocab."""

    vocab: Vocab
    conf: Config
    model: SeqAutoencoder
    denoiser: torch.nn.Module | None
    schedule: NoiseSchedule
    behavior_names: list[str]
    stage: int

    @property
    def L(self) -> int:
        return self.conf["data.L"]


@dataclass
class SplitData:
    """Leave-one-out view of a dataset at fixed sequence length."""

    vocab: Vocab
    behavior_names: list[str]
    train_users: dict[int, list[Interaction]]
    train_sequences: list[Sequence]
    test_splits: list[tuple[Sequence, int, int]]

    @classmethod
    def from_users(cls, users: dict[int, list[Interaction]], vocab: Vocab,
                   L: int, behavior_names: list[str] | None = None
                   ) -> "SplitData":
        test_splits = next_item_split(build_sequences(users, L, vocab), vocab)
        train_users, _ = leave_one_out(users)
        train_sequences = build_sequences(train_users, L, vocab)
        return cls(vocab, behavior_names or [], train_users,
                   train_sequences, test_splits)

    @classmethod
    def from_dataset(cls, dataset: Dataset, L: int) -> "SplitData":
        return cls.from_users(dataset.users, dataset.vocab, L,
                              dataset.behavior_names)

    def stage3_splits(self) -> list[tuple[Sequence, int, int]]:
        return next_item_split(self.train_sequences, self.vocab)


def _batches(n: int, batch_size: int,
             rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _to_tensors(items: np.ndarray, behaviors: np.ndarray,
                lengths: np.ndarray):
    return (torch.from_numpy(items), torch.from_numpy(behaviors),
            torch.from_numpy(lengths))


def _check_finite(loss: torch.Tensor, stage: int, epoch: int) -> None:
    if not math.isfinite(loss.item()):
        raise DivergenceError(f"stage {stage} diverged: non-finite loss in "
                              f"epoch {epoch}")


def stage1_pretrain(sequences: list[Sequence], vocab: Vocab,
                    conf: Config) -> SeqAutoencoder:
    """Cloze pretraining of the autoencoder; returns the trained model."""
    seed = conf.seed
    torch.manual_seed(derive_seed(seed, "stage1/init"))
    model = SeqAutoencoder(vocab, conf.model_config(), conf["data.L"])
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=conf["train.lr"],
                            weight_decay=conf["train.weight_decay"])
    mask_rng = np.random.default_rng(derive_seed(seed, "stage1/mask"))
    shuffle_rng = np.random.default_rng(derive_seed(seed, "stage1/shuffle"))
    rho, sigma = conf["train.rho"], conf["train.sigma"]

    for epoch in range(1, conf["train.epochs1"] + 1):
        total_loss = total_hits = total_masked = 0.0
        for idx in _batches(len(sequences), conf["train.batch"], shuffle_rng):
            batch = cloze_mask([sequences[i] for i in idx], rho, sigma,
                               mask_rng, vocab)
            items, behaviors, lengths, _ = stack_sequences(batch.sequences)
            seq_idx, pos, targets = batch.flat()
            items_t, behaviors_t, lengths_t = _to_tensors(items, behaviors,
                                                          lengths)
            hidden, _ = model.forward_hidden(items_t, behaviors_t, lengths_t)
            z = hidden[torch.from_numpy(seq_idx), torch.from_numpy(pos)]
            logits = model.decode(z)
            targets_t = torch.from_numpy(targets)
            loss = mbae_loss(logits, targets_t)
            _check_finite(loss, 1, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = len(targets)
            total_loss += loss.item() * n
            total_hits += (logits.argmax(dim=-1) == targets_t).sum().item()
            total_masked += n
        log.info("epoch %d loss %.6f acc %.4f", epoch,
                 total_loss / total_masked, total_hits / total_masked)
    model.eval()
    return model


def _masked_slot_arrays(items: np.ndarray, behaviors: np.ndarray,
                        pos: np.ndarray, vocab: Vocab):
    """Copy the batch with the item masked at each row's slot; returns the
    item array, behavior-visible and behavior-masked arrays, and the real
    behavior ids at the slots.
    """
    rows = np.arange(len(pos))
    it = items.copy()
    b_target = behaviors[rows, pos].copy()
    it[rows, pos] = vocab.mask_token
    bh_masked = behaviors.copy()
    bh_masked[rows, pos] = vocab.mask_token
    return it, behaviors, bh_masked, b_target


def stage2_train(sequences: list[Sequence], vocab: Vocab,
                 model: SeqAutoencoder, conf: Config):
    """Noise-prediction training with the autoencoder frozen.

    Returns (denoiser, schedule). Per example and epoch a fresh non-pad slot
    is chosen; the item there is masked and the sequence encoded twice, once
    with the behavior visible (the diffusion target latent) and once with it
    masked (the conditioning latent).
    """
    seed = conf.seed
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)

    torch.manual_seed(derive_seed(seed, "stage2/init"))
    denoiser = build_denoiser(conf["denoiser.kind"], conf["model.d"],
                              vocab.num_behaviors, conf["denoiser.depth"],
                              conf["denoiser.shared"], conf["denoiser.private"])
    schedule = make_schedule(conf["diffusion.T"], conf["diffusion.beta_start"],
                             conf["diffusion.beta_end"])
    opt = torch.optim.AdamW(denoiser.parameters(), lr=conf["train.lr"],
                            weight_decay=conf["train.weight_decay"])
    draw_gen = torch.Generator().manual_seed(derive_seed(seed, "stage2/draws"))
    pos_rng = np.random.default_rng(derive_seed(seed, "stage2/pos"))
    shuffle_rng = np.random.default_rng(derive_seed(seed, "stage2/shuffle"))

    items_all, behaviors_all, lengths_all, _ = stack_sequences(sequences)
    L = items_all.shape[1]
    null_prob = conf["diffusion.null_prob"]

    for epoch in range(1, conf["train.epochs2"] + 1):
        total_loss = total_n = 0.0
        for idx in _batches(len(sequences), conf["train.batch"], shuffle_rng):
            lengths = lengths_all[idx]
            pos = (L - lengths) + pos_rng.integers(0, lengths)
            it, bh_vis, bh_msk, b_target = _masked_slot_arrays(
                items_all[idx], behaviors_all[idx], pos, vocab)
            B = len(idx)
            items_t = torch.from_numpy(np.concatenate([it, it]))
            behaviors_t = torch.from_numpy(np.concatenate([bh_vis, bh_msk]))
            lengths_t = torch.from_numpy(np.concatenate([lengths, lengths]))
            with torch.no_grad():
                hidden = model.encode(items_t, behaviors_t, lengths_t)
            rows = torch.arange(B)
            pos_t = torch.from_numpy(pos)
            z_b = hidden[:B][rows, pos_t]
            z_a = hidden[B:][rows, pos_t]

            t = sample_timesteps(B, schedule.T, draw_gen)
            eps = torch.randn(B, z_b.shape[1], generator=draw_gen)
            z_t = forward_sample(schedule, z_b, t, eps)
            nulls = null_mask(B, null_prob, draw_gen)
            b_cond = torch.where(nulls,
                                 torch.full((B,), denoiser.null_behavior,
                                            dtype=torch.int64),
                                 torch.from_numpy(b_target))
            eps_hat = denoiser(z_t, t, z_a, b_cond)
            loss = F.mse_loss(eps_hat, eps)
            _check_finite(loss, 2, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * B
            total_n += B
        log.info("epoch %d loss %.6f", epoch, total_loss / total_n)
    denoiser.eval()
    return denoiser, schedule


def slot_latents(model: SeqAutoencoder, prefixes: list[Sequence],
                 behaviors: np.ndarray | None = None) -> torch.Tensor:
    """Encode prefixes (each carrying a masked slot at the last position) and
    read the latent there. With `behaviors` given, the slot's behavior token
    is replaced by the target id first, producing behavior-specific latents;
    otherwise the slot stays masked and the latents are behavior-agnostic.
    """
    items, beh, lengths, _ = stack_sequences(prefixes)
    L = items.shape[1]
    if behaviors is not None:
        beh = beh.copy()
        beh[:, L - 1] = behaviors
    items_t, behaviors_t, lengths_t = _to_tensors(items, beh, lengths)
    with torch.no_grad():
        hidden = model.encode(items_t, behaviors_t, lengths_t)
    return hidden[:, L - 1]


def stage3_finetune(splits: list[tuple[Sequence, int, int]], vocab: Vocab,
                    model: SeqAutoencoder, denoiser, schedule: NoiseSchedule,
                    conf: Config) -> SeqAutoencoder:
    """Decoder-only fine-tuning on next-item prediction.

    Fresh noise is sampled per example per epoch; the sampled latent enters
    the decoder as a constant, so gradients reach only decoder parameters.
    """
    seed = conf.seed
    model.eval()
    denoiser.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    for p in denoiser.parameters():
        p.requires_grad_(False)
    for p in model.decoder.parameters():
        p.requires_grad_(True)

    torch.manual_seed(derive_seed(seed, "stage3/init"))
    opt = torch.optim.AdamW(model.decoder.parameters(), lr=conf["train.lr"],
                            weight_decay=conf["train.weight_decay"])
    shuffle_rng = np.random.default_rng(derive_seed(seed, "stage3/shuffle"))
    omega, stride = conf["diffusion.omega"], conf["diffusion.stride"]

    prefixes = [s for s, _, _ in splits]
    targets_all = np.array([t for _, t, _ in splits], dtype=np.int64)
    behaviors_all = np.array([b for _, _, b in splits], dtype=np.int64)

    for epoch in range(1, conf["train.epochs3"] + 1):
        gen = torch.Generator().manual_seed(
            derive_seed(seed, f"stage3/sample/epoch{epoch}"))
        total_loss = total_hits = total_n = 0.0
        for idx in _batches(len(splits), conf["train.batch"], shuffle_rng):
            batch_prefixes = [prefixes[i] for i in idx]
            b_t = torch.from_numpy(behaviors_all[idx])
            z_a = slot_latents(model, batch_prefixes)
            z_b = sample(schedule, denoiser, z_a, b_t, omega, stride,
                         generator=gen)
            logits = model.decode(z_b)
            targets_t = torch.from_numpy(targets_all[idx])
            loss = F.cross_entropy(logits, targets_t)
            _check_finite(loss, 3, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = len(idx)
            total_loss += loss.item() * n
            total_hits += (logits.argmax(dim=-1) == targets_t).sum().item()
            total_n += n
        log.info("epoch %d loss %.6f acc %.4f", epoch, total_loss / total_n,
                 total_hits / total_n)
    model.eval()
    return model


def train_all(split: SplitData, conf: Config) -> Bundle:
    """Run the three stages back to back on a prepared split."""
    model = stage1_pretrain(split.train_sequences, split.vocab, conf)
    denoiser, schedule = stage2_train(split.train_sequences, split.vocab,
                                      model, conf)
    stage3_finetune(split.stage3_splits(), split.vocab, model, denoiser,
                    schedule, conf)
    return Bundle(split.vocab, conf, model, denoiser, schedule,
                  split.behavior_names, stage=3)


# ---------------------------------------------------------------------------
# Checkpoint round trip


def save_bundle(base, bundle: Bundle) -> None:
    meta = {
        "stage": str(bundle.stage),
        "num_items": str(bundle.vocab.num_items),
        "num_behaviors": str(bundle.vocab.num_behaviors),
        "behavior_names": ",".join(bundle.behavior_names),
    }
    for key, value in bundle.conf.items():
        meta[key] = ("true" if value is True else
                     "false" if value is False else str(value))
    tensors: dict[str, torch.Tensor] = {}
    for name, tensor in bundle.model.state_dict().items():
        tensors["model." + name] = tensor
    if bundle.denoiser is not None:
        for name, tensor in bundle.denoiser.state_dict().items():
            tensors["denoiser." + name] = tensor
    ckpt.save_checkpoint(base, meta, tensors)


def load_bundle(base) -> Bundle:
    meta, tensors = ckpt.load_checkpoint(base)
    from .config import DEFAULTS
    conf = resolve_config({k: v for k, v in meta.items() if k in DEFAULTS})
    vocab = Vocab.for_sizes(int(meta["num_items"]), int(meta["num_behaviors"]))
    behavior_names = [n for n in meta.get("behavior_names", "").split(",") if n]
    stage = int(meta["stage"])

    torch.manual_seed(0)
    model = SeqAutoencoder(vocab, conf.model_config(), conf["data.L"])
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items()
                           if k.startswith("model.")}, strict=True)
    model.eval()

    denoiser = None
    denoiser_state = {k[len("denoiser."):]: v for k, v in tensors.items()
                      if k.startswith("denoiser.")}
    if denoiser_state:
        denoiser = build_denoiser(conf["denoiser.kind"], conf["model.d"],
                                  vocab.num_behaviors, conf["denoiser.depth"],
                                  conf["denoiser.shared"],
                                  conf["denoiser.private"])
        denoiser.load_state_dict(denoiser_state, strict=True)
        denoiser.eval()
    schedule = make_schedule(conf["diffusion.T"], conf["diffusion.beta_start"],
                             conf["diffusion.beta_end"])
    return Bundle(vocab, conf, model, denoiser, schedule, behavior_names,
                  stage)


# ---------------------------------------------------------------------------
# Inference


def rank_items(logits: np.ndarray) -> np.ndarray:
    """Item ids sorted by descending logit, ties broken by ascending id."""
    ids = np.arange(len(logits))
    return np.lexsort((ids, -logits))


def guided_scores(bundle: Bundle, prefixes: list[Sequence],
                  behaviors: np.ndarray,
                  z_init: torch.Tensor) -> np.ndarray:
    """Full-catalog logits (B, |V|) for prefixes under target behaviors,
    transferring the agnostic latent through guided sampling started from
    the provided noise rows.
    """
    if bundle.denoiser is None:
        raise ValueError("bundle has no trained denoiser")
    z_a = slot_latents(bundle.model, prefixes)
    z_b = sample(bundle.schedule, bundle.denoiser, z_a,
                 torch.from_numpy(np.asarray(behaviors, dtype=np.int64)),
                 bundle.conf["diffusion.omega"], bundle.conf["diffusion.stride"],
                 z_init=z_init)
    with torch.no_grad():
        return bundle.model.decode(z_b).numpy()


def user_noise(bundle: Bundle, user_ids, seed: int) -> torch.Tensor:
    """Per-user starting noise rows from independent derived streams, so
    results do not depend on how users are batched.
    """
    d = bundle.conf["model.d"]
    rows = []
    for uid in user_ids:
        gen = torch.Generator().manual_seed(
            derive_seed(seed, f"user:{int(uid)}"))
        rows.append(torch.randn(d, generator=gen))
    return torch.stack(rows)


def infer_next_item(bundle: Bundle, prefix: Sequence, behavior: int, K: int,
                    seed: int) -> np.ndarray:
    """Ranked top-K item ids for one prefix sequence and target behavior."""
    if not 0 <= behavior < bundle.vocab.num_behaviors:
        raise ValueError(f"unknown behavior id {behavior}")
    if K > bundle.vocab.num_items:
        log.warning("K=%d exceeds catalog size %d; clipping", K,
                    bundle.vocab.num_items)
        K = bundle.vocab.num_items
    z0 = user_noise(bundle, [prefix.user_id], seed)
    logits = guided_scores(bundle, [prefix],
                           np.array([behavior], dtype=np.int64), z0)[0]
    return rank_items(logits)[:K]


def inference_prefix(items: np.ndarray, behaviors: np.ndarray, L: int,
                     vocab: Vocab, user_id: int = -1) -> Sequence:
    """Build the inference-time sequence: the most recent L-1 interactions
    left-padded, with a fully masked slot appended at position L-1.
    """
    if L < 2:
        raise ValueError(f"need L >= 2 for an inference prefix, got {L}")
    items = np.asarray(items, dtype=np.int64)[-(L - 1):]
    behaviors = np.asarray(behaviors, dtype=np.int64)[-(L - 1):]
    n = len(items)
    out_items = np.full(L, vocab.pad_token, dtype=np.int64)
    out_behaviors = np.full(L, vocab.pad_token, dtype=np.int64)
    out_items[L - 1 - n:L - 1] = items
    out_behaviors[L - 1 - n:L - 1] = behaviors
    out_items[L - 1] = vocab.mask_token
    out_behaviors[L - 1] = vocab.mask_token
    return Sequence(out_items, out_behaviors, n + 1, user_id=user_id)
