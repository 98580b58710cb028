"""Masked language model backend.

The reasoner only needs three things from a model: token ids for a rendered
prompt, the hidden vector at a given position, and the embedding of each
answer word. :class:`Backend` provides them for a small bidirectional
self-attention encoder trained from scratch over a closed vocabulary. A
pretrained encoder can be dropped in by subclassing and overriding
:meth:`Backend.hidden` and :meth:`Backend.word_embeddings`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import EmptyCandidateSet, SequenceTooLong
from .prompt import MASK, PromptInstance, is_virtual

PAD = "[PAD]"
UNK = "[UNK]"
SPECIAL_TOKENS = (PAD, UNK, MASK)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class SlotDistribution:
    """Probabilities over an ordered candidate list."""

    candidates: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "probs", probs)
        if probs.shape != (len(self.candidates),):
            raise ValueError("probability vector and candidate list differ in length")

    def argmax(self) -> int:
        # np.argmax returns the first maximal index: ties go to the lowest index
        return int(np.argmax(self.probs))

    def top(self) -> str:
        return self.candidates[self.argmax()]

    def __getitem__(self, symbol: str) -> float:
        return float(self.probs[self.candidates.index(symbol)])

    def to_dict(self) -> dict:
        return {"candidates": list(self.candidates), "probs": [float(p) for p in self.probs]}

    @classmethod
    def from_dict(cls, d: dict) -> "SlotDistribution":
        return cls(tuple(d["candidates"]), np.asarray(d["probs"], dtype=np.float64))


class Vocabulary:
    """Closed token vocabulary. Ordinary tokens are matched case-insensitively;
    virtual words (``<ns:symbol>``) only exactly."""

    def __init__(self, tokens: Sequence[str]):
        seen = list(SPECIAL_TOKENS)
        for tok in tokens:
            key = tok if is_virtual(tok) or tok in SPECIAL_TOKENS else tok.lower()
            if key not in seen:
                seen.append(key)
        self.tokens: tuple[str, ...] = tuple(seen)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index or token.lower() in self._index

    def id(self, token: str) -> int:
        i = self._index.get(token)
        if i is None and not is_virtual(token):
            i = self._index.get(token.lower())
        return self._index[UNK] if i is None else i

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def mask_id(self) -> int:
        return self._index[MASK]

    @property
    def virtual_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if is_virtual(t)]


@dataclass(frozen=True)
class BackboneConfig:
    hidden_size: int = 32
    num_layers: int = 2
    num_heads: int = 4
    ffn_size: Optional[int] = None  # defaults to 4 * hidden_size
    max_length: int = 64
    dtype: str = "float64"

    @property
    def ffn(self) -> int:
        return self.ffn_size or 4 * self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(config: BackboneConfig, vocab_size: int) -> int:
    """Closed-form parameter count of the reference encoder."""
    d, f, n = config.hidden_size, config.ffn, config.num_layers
    embeddings = vocab_size * d + config.max_length * d
    attention = 4 * (d * d + d)  # q, k, v, out projections with bias
    ffn = d * f + f + f * d + d
    norms = 2 * 2 * d
    return embeddings + n * (attention + ffn + norms) + 2 * d


class _Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        if d % heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ffn)
        self.ff2 = nn.Linear(ffn, d)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(self.norm1(x)).split(d, dim=-1)
        q, k, v = (t.view(b, n, self.heads, hd).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        x = x + self.out(att.transpose(1, 2).reshape(b, n, d))
        return x + self.ff2(nn.functional.gelu(self.ff1(self.norm2(x))))


class Encoder(nn.Module):
    def __init__(self, vocab_size: int, config: BackboneConfig):
        super().__init__()
        d = config.hidden_size
        self.tok = nn.Embedding(vocab_size, d)
        self.pos = nn.Embedding(config.max_length, d)
        self.blocks = nn.ModuleList(
            _Block(d, config.num_heads, config.ffn) for _ in range(config.num_layers)
        )
        self.norm = nn.LayerNorm(d)

    def forward(self, ids: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.tok(ids) + self.pos(positions)[None]
        for block in self.blocks:
            x = block(x, key_mask)
        return self.norm(x)


class Backend(nn.Module):
    """Tokenizer plus encoder plus answer-word embeddings."""

    def __init__(self, vocab: Vocabulary, config: BackboneConfig):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.encoder = Encoder(len(vocab), config).to(_DTYPES[config.dtype])

    @property
    def hidden_size(self) -> int:
        return self.config.hidden_size

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.config.dtype]

    def token_ids(self, prompt: PromptInstance) -> list[int]:
        if len(prompt.tokens) > self.config.max_length:
            raise SequenceTooLong(
                f"prompt has {len(prompt.tokens)} tokens, maximum is {self.config.max_length}"
            )
        return [self.vocab.id(t) for t in prompt.tokens]

    def hidden(self, prompts: Sequence[PromptInstance]) -> torch.Tensor:
        """Hidden states ``[batch, max_len, d]`` for right-padded prompts."""
        rows = [self.token_ids(p) for p in prompts]
        width = max(len(r) for r in rows)
        ids = torch.full((len(rows), width), self.vocab.pad_id, dtype=torch.long)
        key_mask = torch.zeros((len(rows), width), dtype=torch.bool)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r, dtype=torch.long)
            key_mask[i, : len(r)] = True
        return self.encoder(ids, key_mask)

    def hidden_at(self, prompts: Sequence[PromptInstance], positions: Sequence[int]) -> torch.Tensor:
        states = self.hidden(prompts)
        return states[torch.arange(len(prompts)), torch.as_tensor(list(positions))]

    def word_ids(self, words: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.vocab.id(w) for w in words], dtype=torch.long)

    def word_embeddings(self, words: Sequence[str]) -> torch.Tensor:
        return self.encoder.tok(self.word_ids(words))

    def candidate_log_probs(self, h: torch.Tensor, words: Sequence[str]) -> torch.Tensor:
        """Restricted log-softmax of ``e_v . h`` over the candidate words."""
        if len(words) == 0:
            raise EmptyCandidateSet("no candidate words")
        logits = h @ self.word_embeddings(words).T
        return torch.log_softmax(logits, dim=-1)

    @torch.no_grad()
    def encode(self, prompt: PromptInstance, positions: Optional[Sequence[int]] = None) -> np.ndarray:
        """Hidden vectors at ``positions`` (default: ``[A]`` then each ``[C]``)."""
        if positions is None:
            positions = (prompt.answer_position, *prompt.convertible_positions)
        states = self.hidden([prompt])[0]
        return states[list(positions)].cpu().numpy()

    @torch.no_grad()
    def score_slot(
        self, h, candidates: Sequence[str], symbols: Optional[Sequence[str]] = None
    ) -> SlotDistribution:
        if len(candidates) == 0:
            raise EmptyCandidateSet("no candidate words")
        h = torch.as_tensor(np.asarray(h), dtype=self.dtype)
        probs = torch.exp(self.candidate_log_probs(h, candidates)).cpu().numpy()
        return SlotDistribution(tuple(symbols or candidates), probs)


def restricted_softmax(h: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """``exp(e_v . h) / sum_u exp(e_u . h)`` with max subtraction."""
    embeddings = np.atleast_2d(embeddings)
    if embeddings.shape[0] == 0:
        raise EmptyCandidateSet("no candidate words")
    logits = embeddings @ np.asarray(h, dtype=np.float64)
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def reference_backbone(config: BackboneConfig, vocabulary: Sequence[str], seed: int) -> Backend:
    """Freshly initialised reference encoder over ``vocabulary``.

    Virtual words get a seeded standard-normal draw rescaled to the mean norm
    of the ordinary token embeddings.
    """
    vocab = vocabulary if isinstance(vocabulary, Vocabulary) else Vocabulary(vocabulary)
    gen = torch.Generator().manual_seed(seed)
    backend = Backend(vocab, config)
    with torch.no_grad():
        for module in backend.modules():
            if isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, nn.Embedding):
                w = module.weight
                w.copy_(torch.randn(w.shape, generator=gen, dtype=w.dtype) * 0.1)
            elif isinstance(module, nn.Linear):
                w = module.weight
                w.copy_(torch.randn(w.shape, generator=gen, dtype=w.dtype) / math.sqrt(w.shape[1]))
                module.bias.zero_()

        table = backend.encoder.tok.weight
        virtual = vocab.virtual_ids
        if virtual:
            plain = [i for i in range(len(vocab)) if i not in set(virtual)]
            target = table[plain].norm(dim=1).mean()
            draw = torch.randn((len(virtual), table.shape[1]), generator=gen, dtype=table.dtype)
            table[virtual] = draw / draw.norm(dim=1, keepdim=True) * target
    return backend
