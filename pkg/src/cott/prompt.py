"""Cloze templates with text, answer and convertible slots, plus verbalizers.

A template is written as a plain string with ``[T]`` (text), ``[A]`` (answer)
and one or more ``[C]`` (convertible) markers::

    >>> t = compile_template("[T], the domain is [C], the area is [A].")
    >>> [s.kind for s in t.slots]
    ['T', 'C', 'A']

In step I every ``[C]`` is filled with a mask token and the model predicts the
intermediate step there. In step II the ``[C]`` slots receive the verbalized
intermediate step and only ``[A]`` stays masked.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

from .errors import (
    ArityMismatch,
    EmptyText,
    MalformedTemplate,
    UnknownSymbol,
    UnknownWord,
)

MASK = "[MASK]"

_SLOT_RE = re.compile(r"\[([TAC])\]")
_WORD_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Split a literal run into word and punctuation tokens."""
    return _WORD_RE.findall(text)


@dataclass(frozen=True)
class Slot:
    kind: str  # "T", "A" or "C"
    index: int = 0  # position among slots of the same kind


@dataclass(frozen=True)
class Template:
    pattern: str
    segments: tuple  # str literal runs and Slot objects, in textual order

    @property
    def slots(self) -> tuple[Slot, ...]:
        return tuple(s for s in self.segments if isinstance(s, Slot))

    @property
    def num_convertible(self) -> int:
        return sum(1 for s in self.slots if s.kind == "C")


def compile_template(pattern: str) -> Template:
    segments: list = []
    counts = {"T": 0, "A": 0, "C": 0}
    pos = 0
    for m in _SLOT_RE.finditer(pattern):
        if m.start() > pos:
            segments.append(pattern[pos : m.start()])
        kind = m.group(1)
        segments.append(Slot(kind, counts[kind]))
        counts[kind] += 1
        pos = m.end()
    if pos < len(pattern):
        segments.append(pattern[pos:])

    for lit in segments:
        if isinstance(lit, str) and ("[" in lit or "]" in lit):
            raise MalformedTemplate(f"unbalanced or unknown bracket in {pattern!r}")
    if counts["T"] != 1:
        raise MalformedTemplate(f"expected exactly one [T], found {counts['T']}")
    if counts["A"] != 1:
        raise MalformedTemplate(f"expected exactly one [A], found {counts['A']}")
    if counts["C"] < 1:
        raise MalformedTemplate("template needs at least one [C] slot")
    return Template(pattern, tuple(segments))


def is_virtual(word: str) -> bool:
    return len(word) > 2 and word.startswith("<") and word.endswith(">")


@dataclass(frozen=True)
class Verbalizer:
    """Injective map from symbols (labels or steps) to answer words.

    Words wrapped in angle brackets, e.g. ``<label:Genetics>``, are learnable
    virtual words: they are resolved to their own embedding rows by the
    backend instead of going through the tokenizer.
    """

    symbols: tuple[str, ...]
    words: tuple[str, ...]
    _by_symbol: dict = field(init=False, repr=False, compare=False)
    _by_word: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        symbols, words = tuple(self.symbols), tuple(self.words)
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "words", words)
        if len(symbols) != len(words):
            raise ValueError("symbols and words must have the same length")
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbol in verbalizer")
        if len(set(words)) != len(words):
            raise ValueError("verbalizer is not injective: duplicate word")
        object.__setattr__(self, "_by_symbol", dict(zip(symbols, words)))
        object.__setattr__(self, "_by_word", dict(zip(words, symbols)))

    @classmethod
    def virtual(cls, symbols: Sequence[str], namespace: str) -> "Verbalizer":
        """One fresh virtual word per symbol, ``<namespace:symbol>``."""
        symbols = tuple(symbols)
        return cls(symbols, tuple(f"<{namespace}:{s}>" for s in symbols))

    def __len__(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise UnknownSymbol(symbol) from None

    def verbalize(self, symbol: str) -> str:
        try:
            return self._by_symbol[symbol]
        except KeyError:
            raise UnknownSymbol(symbol) from None

    def unverbalize(self, word: str) -> str:
        try:
            return self._by_word[word]
        except KeyError:
            raise UnknownWord(word) from None

    def to_text(self) -> str:
        return "".join(f"{s}\t{w}\n" for s, w in zip(self.symbols, self.words))

    @classmethod
    def from_text(cls, text: str) -> "Verbalizer":
        symbols, words = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'symbol<TAB>word'")
            symbols.append(parts[0])
            words.append(parts[1])
        return cls(tuple(symbols), tuple(words))


def read_verbalizer(path: Union[str, Path]) -> Verbalizer:
    return Verbalizer.from_text(Path(path).read_text(encoding="utf-8"))


def write_verbalizer(v: Verbalizer, path: Union[str, Path]) -> None:
    Path(path).write_text(v.to_text(), encoding="utf-8")


def verbalize(v: Verbalizer, symbol: str) -> str:
    return v.verbalize(symbol)


def unverbalize(v: Verbalizer, word: str) -> str:
    return v.unverbalize(word)


@dataclass(frozen=True)
class PromptInstance:
    tokens: tuple[str, ...]
    answer_position: int
    convertible_positions: tuple[int, ...]
    # None for a masked convertible slot, otherwise the injected step symbol
    fills: tuple[Optional[str], ...]

    @property
    def masked_positions(self) -> tuple[int, ...]:
        return tuple(i for i, tok in enumerate(self.tokens) if tok == MASK)

    @property
    def is_step_one(self) -> bool:
        return all(f is None for f in self.fills)


def _render(
    t: Template,
    text: Sequence[str],
    fill_words: Sequence[Optional[str]],
    fills: Sequence[Optional[str]],
    anchors: Optional[Mapping[str, Sequence[str]]],
    tokenizer: Callable[[str], list[str]],
) -> PromptInstance:
    tokens: list[str] = []
    answer = -1
    conv: list[int] = []
    for seg in t.segments:
        if isinstance(seg, str):
            for tok in tokenizer(seg):
                if anchors and tok in anchors:
                    tokens.extend(anchors[tok])
                else:
                    tokens.append(tok)
        elif seg.kind == "T":
            tokens.extend(text)
        elif seg.kind == "A":
            answer = len(tokens)
            tokens.append(MASK)
        else:
            conv.append(len(tokens))
            word = fill_words[seg.index]
            if word is None:
                tokens.append(MASK)
            elif is_virtual(word):
                tokens.append(word)
            else:
                tokens.extend(tokenizer(word))
    return PromptInstance(tuple(tokens), answer, tuple(conv), tuple(fills))


def render_step1(
    t: Template,
    text: Sequence[str],
    anchors: Optional[Mapping[str, Sequence[str]]] = None,
    tokenizer: Callable[[str], list[str]] = tokenize,
) -> PromptInstance:
    """Text into ``[T]``; a mask into every ``[C]`` and into ``[A]``.

    ``anchors`` maps literal template words (``SUBJ``, ``OBJ``) to the token
    runs that replace them.
    """
    if len(text) == 0:
        raise EmptyText("text must contain at least one token")
    k = t.num_convertible
    return _render(t, text, [None] * k, [None] * k, anchors, tokenizer)


def render_step2(
    t: Template,
    text: Sequence[str],
    step: Sequence[str],
    vI: Union[Verbalizer, Sequence[Verbalizer]],
    anchors: Optional[Mapping[str, Sequence[str]]] = None,
    tokenizer: Callable[[str], list[str]] = tokenize,
) -> PromptInstance:
    """Text into ``[T]``, the verbalized step into the ``[C]`` slots, mask into ``[A]``.

    ``vI`` is either one verbalizer shared by all ``[C]`` slots or one per slot.
    """
    if len(text) == 0:
        raise EmptyText("text must contain at least one token")
    k = t.num_convertible
    if len(step) != k:
        raise ArityMismatch(f"template has {k} [C] slots, step has {len(step)} components")
    verbalizers = [vI] * k if isinstance(vI, Verbalizer) else list(vI)
    if len(verbalizers) != k:
        raise ArityMismatch(f"expected {k} step verbalizers, got {len(verbalizers)}")
    words = [v.verbalize(s) for v, s in zip(verbalizers, step)]
    return _render(t, text, words, list(step), anchors, tokenizer)
