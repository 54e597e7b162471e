"""Non-autoregressive language model and the autoregressive comparison decoder."""
from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from .denoiser import ConditionProjection, DenoiserBlock
from .errors import ConfigError
from .layers import Attention, FeedForward, LayerNorm, LearnedPositions, Linear, causal_mask
from .numkernel import RngState, droppath, softmax
from .textcodec import EOS, MASK, PAD, EmbeddingTable, TokenSeq, Vocabulary, decode_ids


class LMLayer(nn.Module):
    """Pre-LN encoder layer.

    With ``residual_attn=False`` the attention sub-layer output replaces its
    input instead of being added to it (the first layer of the stack).
    """

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, drop_path: float = 0.0,
                 residual_attn: bool = True):
        super().__init__()
        self.ln_attn = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult)
        self.drop_path = drop_path
        self.residual_attn = residual_attn

    def forward(self, h, rng: Optional[RngState] = None):
        dp = lambda x: droppath(x, self.drop_path, self.training, rng)  # noqa: E731
        a = dp(self.attn(self.ln_attn(h)))
        h = a + h if self.residual_attn else a
        return dp(self.ffn(self.ln_ffn(h))) + h


class NARLanguageModel(nn.Module):
    """Maps x0_hat (B, N_v, d) to per-position vocabulary logits in one pass."""

    def __init__(self, n_v: int, dim: int, vocab_size: int, n_layers: int = 6, heads: int = 4,
                 ffn_mult: int = 4, drop_path: float = 0.0, residual_first_layer: bool = False):
        super().__init__()
        if n_layers < 1:
            raise ConfigError("language model needs at least one layer")
        self.n_v = n_v
        self.dim = dim
        self.pos = LearnedPositions(n_v, dim)
        self.layers = nn.ModuleList(
            LMLayer(dim, heads, ffn_mult, drop_path,
                    residual_attn=(i > 0 or residual_first_layer))
            for i in range(n_layers))
        self.fc = Linear(dim, vocab_size)

    def forward(self, x0_hat: torch.Tensor, rng: Optional[RngState] = None) -> torch.Tensor:
        if x0_hat.shape[-1] != self.dim or x0_hat.shape[-2] > self.n_v:
            raise ConfigError(f"LM expects (N<={self.n_v}, {self.dim}), got {tuple(x0_hat.shape)}")
        h = x0_hat + self.pos(x0_hat.shape[-2])
        for layer in self.layers:
            h = layer(h, rng=rng)
        return self.fc(h)


def lm_forward(x0_hat, model: NARLanguageModel, rng=None) -> torch.Tensor:
    """Sentence distribution s = softmax(FC(h_L)); rows sum to one."""
    return softmax(model(x0_hat, rng=rng), axis=-1)


def argmax_lowest(s: torch.Tensor) -> torch.Tensor:
    """Argmax over the last axis; ties go to the lowest index."""
    best = s.amax(dim=-1, keepdim=True)
    idx = torch.arange(s.shape[-1]).expand_as(s)
    return torch.where(s == best, idx, s.shape[-1]).amin(dim=-1)


def decode(s: torch.Tensor, vocab: Vocabulary) -> TokenSeq | list[TokenSeq]:
    """Parallel per-position argmax, EOS truncation, MASK/PAD stripping.

    Accepts one distribution (N_v, |V|) or a batch (B, N_v, |V|).
    """
    if s.shape[-1] != len(vocab):
        raise ConfigError(f"distribution width {s.shape[-1]} != vocabulary size {len(vocab)}")
    ids = argmax_lowest(s)
    if ids.dim() == 1:
        return decode_ids(ids.tolist(), vocab)
    return [decode_ids(row, vocab) for row in ids.tolist()]


class ARCaptioner(nn.Module):
    """Causal decoder over the same block stack, conditioned by cross-attention.

    EOS doubles as the start symbol for teacher forcing and greedy decoding.
    """

    def __init__(self, n_v: int, dim: int, d_f: int, vocab_size: int, n_layers: int = 6,
                 heads: int = 4, ffn_mult: int = 4, drop_path: float = 0.0):
        super().__init__()
        self.n_v = n_v
        self.embedding = EmbeddingTable(vocab_size, dim)
        self.pos = LearnedPositions(n_v + 1, dim)
        self.cond = ConditionProjection(d_f, dim)
        self.blocks = nn.ModuleList(
            DenoiserBlock(dim, heads, ffn_mult, drop_path) for _ in range(n_layers))
        self.ln_out = LayerNorm(dim)
        self.fc = Linear(dim, vocab_size)

    def forward(self, prefix: torch.Tensor, v: torch.Tensor, rng=None,
                cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        """prefix: (B, L) ids starting with EOS. Returns logits (B, L, |V|)."""
        n = prefix.shape[-1]
        h = self.embedding(prefix) + self.pos(n)
        cond = self.cond(v) if cond is None else cond
        mask = causal_mask(n)
        for block in self.blocks:
            h = block(h, cond, mask=mask, rng=rng)
        return self.fc(self.ln_out(h))


def teacher_forcing_inputs(targets: torch.Tensor) -> torch.Tensor:
    start = torch.full_like(targets[:, :1], EOS)
    return torch.cat([start, targets[:, :-1]], dim=1)


@torch.no_grad()
def ar_decode_baseline(v: torch.Tensor, model: ARCaptioner, vocab: Vocabulary,
                       max_len: Optional[int] = None, min_len: int = 0,
                       return_passes: bool = False):
    """Greedy left-to-right decoding of one condition (N_f, d_f).

    Each emitted token costs one full forward pass over the prefix (no key/value
    cache). EOS is suppressed until ``min_len`` tokens exist; decoding stops at
    EOS or after ``max_len`` tokens.
    """
    max_len = model.n_v if max_len is None else max_len
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    model.eval()
    v = v.unsqueeze(0)
    cond = model.cond(v)
    prefix = [EOS]
    passes = 0
    out = []
    while len(out) < max_len:
        logits = model(torch.tensor([prefix]), v, cond=cond)[0, -1]
        passes += 1
        logits = logits.clone()
        logits[[PAD, MASK]] = float("-inf")  # never valid caption tokens
        if len(out) < min_len:
            logits[EOS] = float("-inf")
        tok = int(argmax_lowest(logits))
        if tok == EOS:
            break
        out.append(tok)
        prefix.append(tok)
    seq = decode_ids(out, vocab)
    return (seq, passes) if return_passes else seq
