"""Bidirectional transformer autoencoder over (item, behavior) sequences.

The encoder embeds item and behavior tokens, runs stacked pre-norm
self-attention layers with one of three position schemes (learned absolute,
rotary, behavior-modulated rotary), and reads latent preference vectors at
masked or final positions. The decoder maps a latent back to a query vector
scored against the item embedding table over the full catalog.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import ConfigError, Sequence, Vocab, stack_sequences
from .rotary import BehaviorRotary

POSITION_MODES = ("ape", "rope", "brope")


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    layers: int = 2
    dropout: float = 0.1
    position_mode: str = "brope"
    behavior_input: bool = True
    rotary_base: float = 10000.0

    @property
    def d_k(self) -> int:
        return self.d // self.heads

    def validate(self) -> None:
        if self.position_mode not in POSITION_MODES:
            raise ConfigError(f"unknown position_mode {self.position_mode!r}")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.position_mode != "ape" and self.d_k % 2 != 0:
            raise ConfigError(f"per-head dimension {self.d_k} must be even for "
                              "rotary pairing")
        if self.layers < 1:
            raise ConfigError("need at least one encoder layer")


@dataclass
class LatentPreference:
    """A d-dimensional preference vector; behavior is None when the vector
    was read at a position whose behavior token was masked (behavior-agnostic).
    """

    z: torch.Tensor
    behavior: int | None


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d
        self.heads = cfg.heads
        self.d_k = cfg.d_k
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)
        self.ffn = nn.Sequential(
            nn.Linear(d, 4 * d),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(4 * d, d),
        )
        self.attn_dropout = nn.Dropout(cfg.dropout)
        self.resid_dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, real_mask, rotary_fn=None):
        """x: (B, L, d); real_mask: (B, L) bool. Returns (x, attn_probs) with
        attn_probs (B, heads, L, L) post-softmax.
        """
        B, L, d = x.shape
        a = self.norm1(x)
        q = self.wq(a).view(B, L, self.heads, self.d_k).transpose(1, 2)
        k = self.wk(a).view(B, L, self.heads, self.d_k).transpose(1, 2)
        v = self.wv(a).view(B, L, self.heads, self.d_k).transpose(1, 2)
        if rotary_fn is not None:
            q, k = rotary_fn(q), rotary_fn(k)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_k)
        logits = logits.masked_fill(~real_mask[:, None, None, :], float("-inf"))
        probs = torch.softmax(logits, dim=-1)
        ctx = self.attn_dropout(probs) @ v
        ctx = ctx.transpose(1, 2).reshape(B, L, d)
        x = x + self.resid_dropout(self.wo(ctx))
        x = x * real_mask[..., None]
        x = x + self.ffn(self.norm2(x))
        x = x * real_mask[..., None]
        return x, probs


class SeqAutoencoder(nn.Module):
    """Encoder/decoder pair over fixed-length multi-behavior sequences.

    Inputs are token tensors (real ids or the vocab's pad/mask tokens); the
    pad structure is carried by per-sequence real lengths, so whatever ids an
    implementation leaves in pad slots never influences any output.
    """

    def __init__(self, vocab: Vocab, cfg: ModelConfig, L: int):
        super().__init__()
        cfg.validate()
        self.vocab = vocab
        self.cfg = cfg
        self.L = L
        d = cfg.d
        self.item_emb = nn.Embedding(vocab.num_items + 2, d,
                                     padding_idx=vocab.num_items)
        self.behavior_emb = nn.Embedding(vocab.num_behaviors + 2, d,
                                         padding_idx=vocab.num_behaviors)
        self.pos_emb = nn.Embedding(L, d) if cfg.position_mode == "ape" else None
        self.rotary = (BehaviorRotary(d, cfg.heads, cfg.d_k, cfg.rotary_base)
                       if cfg.position_mode != "ape" else None)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(d)
        self.decoder = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self._init_weights()

    def _init_weights(self):
        with torch.no_grad():
            for emb in (self.item_emb, self.behavior_emb, self.pos_emb):
                if emb is not None:
                    emb.weight.normal_(0.0, 0.02)
                    if emb.padding_idx is not None:
                        emb.weight[emb.padding_idx].zero_()

    def _rows(self, tokens: torch.Tensor, size: int) -> torch.Tensor:
        valid = (tokens >= 0) & ((tokens < size) | (tokens == self.vocab.pad_token)
                                 | (tokens == self.vocab.mask_token))
        if not bool(valid.all()):
            raise RuntimeError("token outside embedding table range")
        rows = tokens.clone()
        rows[tokens == self.vocab.pad_token] = size
        rows[tokens == self.vocab.mask_token] = size + 1
        return rows

    def real_mask(self, lengths: torch.Tensor) -> torch.Tensor:
        """(B,) real lengths -> (B, L) bool mask; pads are a left prefix."""
        pos = torch.arange(self.L, device=lengths.device)
        return pos[None, :] >= (self.L - lengths[:, None])

    def embed(self, items: torch.Tensor, behaviors: torch.Tensor,
              lengths: torch.Tensor) -> torch.Tensor:
        """Initial embedding matrix (B, L, d); pad positions are zero rows.

        Absolute mode sums item, behavior and position embeddings; rotary
        modes sum item and (by default) behavior, position entering later
        through the rotation.
        """
        mask = self.real_mask(lengths)
        h = self.item_emb(self._rows(items, self.vocab.num_items))
        if self.cfg.position_mode == "ape" or self.cfg.behavior_input:
            h = h + self.behavior_emb(self._rows(behaviors, self.vocab.num_behaviors))
        if self.pos_emb is not None:
            h = h + self.pos_emb(torch.arange(self.L, device=items.device))
        return h * mask[..., None]

    def _rotary_fn(self, behaviors: torch.Tensor):
        if self.rotary is None:
            return None
        positions = torch.arange(self.L, device=behaviors.device)
        b_emb = None
        if self.cfg.position_mode == "brope":
            b_emb = self.behavior_emb(self._rows(behaviors, self.vocab.num_behaviors))
        return lambda x: self.rotary(x, positions, b_emb)

    def forward_hidden(self, items, behaviors, lengths, collect_attention=False):
        """Run the full encoder stack. Returns (hidden (B, L, d), attn list);
        attn holds one (B, heads, L, L) tensor per layer when requested.
        """
        mask = self.real_mask(lengths)
        if not bool(mask.any(dim=1).all()):
            raise ValueError("every sequence needs at least one real token")
        x = self.embed(items, behaviors, lengths)
        rotary_fn = self._rotary_fn(behaviors)
        attns = []
        for layer in self.layers:
            x, probs = layer(x, mask, rotary_fn)
            if collect_attention:
                attns.append(probs)
        x = self.final_norm(x) * mask[..., None]
        return x, attns

    def encode(self, items, behaviors, lengths) -> torch.Tensor:
        hidden, _ = self.forward_hidden(items, behaviors, lengths)
        return hidden

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latents (B, d) -> logits (B, |V|) over real items only."""
        q = self.decoder(z)
        table = self.item_emb.weight[:self.vocab.num_items]
        return q @ table.t()

    @torch.no_grad()
    def attention_map(self, items, behaviors, lengths) -> torch.Tensor:
        """Mean over layers and heads of the post-softmax attention, (B, L, L).

        Requires eval mode so the maps are deterministic.
        """
        if self.training:
            raise RuntimeError("attention_map requires eval mode")
        _, attns = self.forward_hidden(items, behaviors, lengths,
                                       collect_attention=True)
        return torch.stack(attns).mean(dim=(0, 2))


def mbae_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over all masked positions in the batch."""
    return F.cross_entropy(logits, targets)


def dump_attention_map(map_LL: torch.Tensor, path) -> None:
    """Serialize an L x L attention map: first line L, then L rows of L
    decimal reals. Values are written with full precision so a parse-back
    round trip is exact.
    """
    grid = map_LL.detach().cpu().numpy()
    L = grid.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{L}\n")
        for row in grid:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_attention_map(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        L = int(fh.readline())
        rows = [[float(v) for v in fh.readline().split()] for _ in range(L)]
    out = np.array(rows, dtype=np.float64)
    if out.shape != (L, L):
        raise ValueError(f"{path}: expected an {L}x{L} grid")
    return out


def attention_legend(seq: Sequence, vocab: Vocab,
                     behavior_names: list[str]) -> list[str]:
    """Per-position `item_behavior` labels for an attention map, one per
    line; pad slots are labeled `pad`.
    """
    def blabel(token: int) -> str:
        if token == vocab.mask_token:
            return "mask"
        if 0 <= token < len(behavior_names):
            return behavior_names[token]
        return f"b{token}"

    labels = []
    for i in range(len(seq)):
        if i < len(seq) - seq.length_real:
            labels.append("pad")
            continue
        item = int(seq.items[i])
        item_part = "mask" if item == vocab.mask_token else str(item)
        labels.append(f"{item_part}_{blabel(int(seq.behaviors[i]))}")
    return labels


def sequences_to_tensors(sequences: list[Sequence]) -> tuple[torch.Tensor,
                                                             torch.Tensor,
                                                             torch.Tensor]:
    items, behaviors, lengths, _ = stack_sequences(sequences)
    return (torch.from_numpy(items), torch.from_numpy(behaviors),
            torch.from_numpy(lengths))


def encode_latents(model: SeqAutoencoder, sequences: list[Sequence],
                   positions: np.ndarray) -> list[LatentPreference]:
    """Read one latent per sequence at the given positions, tagged
    behavior-agnostic when the behavior token there is masked. Extraction at
    a pad position is a usage error.
    """
    items, behaviors, lengths = sequences_to_tensors(sequences)
    positions = np.asarray(positions)
    for seq, pos in zip(sequences, positions):
        if pos < len(seq) - seq.length_real:
            raise ValueError(f"extraction position {pos} is padded")
    with torch.no_grad():
        hidden = model.encode(items, behaviors, lengths)
    idx = torch.arange(len(sequences))
    z = hidden[idx, torch.from_numpy(positions)]
    out = []
    for i, seq in enumerate(sequences):
        token = int(seq.behaviors[positions[i]])
        behavior = None if token == model.vocab.mask_token else token
        out.append(LatentPreference(z[i], behavior))
    return out
