"""Central finite-difference verification of analytic gradients.

Each named case builds a small double-precision module with fixed inputs,
randomizes every parameter (so zero-initialized layers sit at a generic
point), and compares autograd gradients against central differences with
step 1e-5 on a deterministic subsample of entries per parameter. The
relative error for one entry is |a - n| / max(|a|, |n|, 1e-6).
"""

from __future__ import annotations

from collections.abc import Callable, Iterable

import numpy as np
import torch
from torch.nn import functional as F

from .config import derive_seed
from .data import ConfigError, Vocab
from .denoiser import MCGLNDenoiser
from .model import ModelConfig, SeqAutoencoder

STEP = 1e-5
FLOOR = 1e-6


def _scramble(module: torch.nn.Module, seed: int, scale: float = 0.5) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen,
                                        dtype=p.dtype))


def _case_linear():
    torch.manual_seed(101)
    module = torch.nn.Linear(6, 4).double()
    _scramble(module, 102)
    x = torch.randn(3, 6, dtype=torch.float64,
                    generator=torch.Generator().manual_seed(103))
    y = torch.randn(3, 4, dtype=torch.float64,
                    generator=torch.Generator().manual_seed(104))

    def loss_fn():
        return 0.5 * ((module(x) - y) ** 2).sum()

    return module, loss_fn, None


def _case_attention():
    torch.manual_seed(111)
    vocab = Vocab.for_sizes(11, 3)
    cfg = ModelConfig(d=8, heads=2, layers=1, dropout=0.0,
                      position_mode="brope")
    model = SeqAutoencoder(vocab, cfg, L=6).double()
    model.eval()
    _scramble(model, 112)
    items = torch.tensor([
        [vocab.pad_token, 3, 1, vocab.mask_token, 7, 2],
        [0, 4, 5, 6, vocab.mask_token, 9],
        [vocab.pad_token, vocab.pad_token, vocab.pad_token, 10, 8,
         vocab.mask_token],
    ])
    behaviors = torch.tensor([
        [vocab.pad_token, 0, 1, vocab.mask_token, 2, 0],
        [1, 1, 0, 2, 2, 1],
        [vocab.pad_token, vocab.pad_token, vocab.pad_token, 0,
         vocab.mask_token, 2],
    ])
    lengths = torch.tensor([5, 6, 3])

    def loss_fn():
        hidden, _ = model.forward_hidden(items, behaviors, lengths)
        return 0.5 * (hidden ** 2).sum()

    return model, loss_fn, None


def _case_decoder():
    torch.manual_seed(121)
    vocab = Vocab.for_sizes(9, 2)
    cfg = ModelConfig(d=8, heads=2, layers=1, dropout=0.0,
                      position_mode="rope")
    model = SeqAutoencoder(vocab, cfg, L=4).double()
    model.eval()
    _scramble(model, 122)
    z = torch.randn(5, 8, dtype=torch.float64,
                    generator=torch.Generator().manual_seed(123))
    targets = torch.tensor([0, 3, 8, 2, 5])

    def loss_fn():
        return F.cross_entropy(model.decode(z), targets)

    keep = ("decoder.", "item_emb.")
    return model, loss_fn, keep


def _case_denoiser():
    torch.manual_seed(131)
    denoiser = MCGLNDenoiser(d=8, num_behaviors=3, depth=1, m_s=2,
                             m_p=1).double()
    denoiser.eval()
    _scramble(denoiser, 132)
    gen = torch.Generator().manual_seed(133)
    z_t = torch.randn(4, 8, dtype=torch.float64, generator=gen)
    z_cond = torch.randn(4, 8, dtype=torch.float64, generator=gen)
    eps = torch.randn(4, 8, dtype=torch.float64, generator=gen)
    t = torch.tensor([1, 3, 5, 7])
    behavior = torch.tensor([0, 2, 3, 1])  # includes the null id 3

    def loss_fn():
        return 0.5 * ((denoiser(z_t, t, z_cond, behavior) - eps) ** 2).sum()

    return denoiser, loss_fn, None


CASES: dict[str, Callable] = {
    "linear": _case_linear,
    "attention": _case_attention,
    "decoder": _case_decoder,
    "denoiser": _case_denoiser,
}


def _subsample(numel: int, limit: int, rng: np.random.Generator) -> Iterable[int]:
    if numel <= limit:
        return range(numel)
    return sorted(int(i) for i in rng.choice(numel, size=limit,
                                             replace=False))


def check_case(name: str, step: float = STEP, entries_per_param: int = 16,
               seed: int = 0) -> dict[str, float]:
    """Max relative error per parameter for one case."""
    if name not in CASES:
        raise ConfigError(f"unknown grad-check case {name!r}; "
                          f"expected one of {sorted(CASES)}")
    module, loss_fn, keep = CASES[name]()
    params = [(pname, p) for pname, p in module.named_parameters()
              if keep is None or any(pname.startswith(k) for k in keep)]

    module.zero_grad()
    loss_fn().backward()
    analytic = {pname: (p.grad.detach().clone() if p.grad is not None
                        else torch.zeros_like(p))
                for pname, p in params}

    report: dict[str, float] = {}
    for pname, p in params:
        rng = np.random.default_rng(derive_seed(seed, f"{name}/{pname}"))
        flat = p.detach().view(-1)
        grad_flat = analytic[pname].view(-1)
        worst = 0.0
        for idx in _subsample(flat.numel(), entries_per_param, rng):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + step
                l_plus = loss_fn().item()
                flat[idx] = orig - step
                l_minus = loss_fn().item()
                flat[idx] = orig
            numeric = (l_plus - l_minus) / (2.0 * step)
            a = grad_flat[idx].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), FLOOR)
            worst = max(worst, rel)
        report[pname] = worst
    return report


def run_grad_check(selector: str = "all", step: float = STEP,
                   entries_per_param: int = 16,
                   seed: int = 0) -> dict[str, dict[str, float]]:
    names = sorted(CASES) if selector == "all" else [selector]
    return {name: check_case(name, step, entries_per_param, seed)
            for name in names}
