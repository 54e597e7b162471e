"""Vocabulary, tokenizer, caption <-> id conversion and the embedding table."""
from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from .errors import CodecError, IngestionError

PAD, MASK, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<mask>", "<eos>", "<unk>")

_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def tokenize(text: str) -> list[str]:
    """Lowercase, replace ASCII punctuation with spaces, split on whitespace."""
    return text.lower().translate(_PUNCT).split()


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


class Vocabulary:
    def __init__(self, tokens: Sequence[str], min_freq: int = 1):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise CodecError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise CodecError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {tok: i for i, tok in enumerate(tokens)}
        self.min_freq = min_freq

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def to_json(self) -> dict:
        return {"tokens": list(self.itos), "min_freq": self.min_freq}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], obj.get("min_freq", 1))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (KeyError, json.JSONDecodeError) as exc:
            raise CodecError(f"bad vocabulary file {path}: {exc}") from exc


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Ids ordered by (frequency desc, token asc); rare tokens are left to UNK."""
    counts = Counter()
    n = 0
    for text in corpus:
        counts.update(tokenize(text))
        n += 1
    if n == 0:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq and tok not in RESERVED),
                  key=lambda tok: (-counts[tok], tok))
    return Vocabulary(list(RESERVED) + kept, min_freq)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple
    length: int  # positions before EOS

    @property
    def words(self) -> tuple:
        return self.ids[: self.length]


def encode_caption(text: str, vocab: Vocabulary, n_v: int) -> TokenSeq:
    """Tokens, then EOS, then MASK up to ``n_v``. Overlong text keeps n_v - 1 tokens."""
    if n_v < 2:
        raise CodecError(f"canvas length must be >= 2, got {n_v}")
    ids = [vocab.id(tok) for tok in tokenize(text)][: n_v - 1]
    length = len(ids)
    ids = ids + [EOS] + [MASK] * (n_v - length - 1)
    return TokenSeq(tuple(ids), length)


def decode_ids(ids: Sequence[int], vocab: Vocabulary) -> TokenSeq:
    """Truncate at the first EOS and drop MASK/PAD positions."""
    kept = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (MASK, PAD):
            continue
        kept.append(i)
    return TokenSeq(tuple(kept), len(kept))


def to_text(seq: TokenSeq, vocab: Vocabulary) -> str:
    return " ".join(vocab.itos[i] for i in seq.words)


class EmbeddingTable(nn.Module):
    """Learned |V| x d table standing in for a pretrained text encoder.

    Row PAD is zero and receives no gradient.
    """

    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(vocab_size, dim))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.weight.shape[0]):
            raise CodecError(f"token id out of range [0, {self.weight.shape[0]})")
        # padding_idx keeps the PAD row out of the gradient
        return nn.functional.embedding(ids, self.weight, padding_idx=PAD)


def embed(ids: torch.Tensor, table: EmbeddingTable) -> torch.Tensor:
    return table(ids)
