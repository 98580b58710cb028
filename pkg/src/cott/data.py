"""Instances, task specifications, JSONL corpora and the synthetic generator.

Two JSONL schemas are read and written, one record per line.

Hierarchical classification (HC)::

    {"id": "wos-1", "text": "...", "domain": "Biochemistry", "area": "Genetics"}

Relation extraction (RE), TACRED-style with inclusive span ends::

    {"id": "r1", "tokens": [...], "subj_start": 0, "subj_end": 1,
     "obj_start": 5, "obj_end": 5, "subj_type": "PERSON",
     "obj_type": "TITLE", "relation": "per:title"}

``token`` is accepted as an alias of ``tokens``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DataError, EmptyDataset, InvalidConfig, MissingField, SpanOutOfBounds, UnknownLabel
from .prompt import Template, Verbalizer, compile_template, is_virtual, tokenize

HC_TEMPLATE = "[T], the domain is [C], the area is [A]."
RE_TEMPLATE = "[T], the SUBJ [C] is [A] of the OBJ [C]."

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Instance:
    id: str
    text: tuple[str, ...]
    step: Optional[tuple[str, ...]] = None
    label: Optional[str] = None
    subj_span: Optional[tuple[int, int]] = None  # inclusive token span
    obj_span: Optional[tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "text", tuple(self.text))
        if self.step is not None:
            object.__setattr__(self, "step", tuple(self.step))
        for span in (self.subj_span, self.obj_span):
            if span is not None:
                s, e = span
                if not (0 <= s <= e < len(self.text)):
                    raise SpanOutOfBounds(f"{self.id}: span {span} outside 0..{len(self.text) - 1}")

    def anchors(self) -> Optional[dict[str, tuple[str, ...]]]:
        if self.subj_span is None or self.obj_span is None:
            return None
        (ss, se), (os_, oe) = self.subj_span, self.obj_span
        return {"SUBJ": self.text[ss : se + 1], "OBJ": self.text[os_ : oe + 1]}


@dataclass(frozen=True)
class TaskSpec:
    """Template, intermediate-step sets per ``[C]`` slot, label set, verbalizers."""

    kind: str
    template: str
    step_sets: tuple[tuple[str, ...], ...]
    labels: tuple[str, ...]
    step_verbalizers: tuple[Verbalizer, ...] = ()
    label_verbalizer: Optional[Verbalizer] = None
    negative_label: Optional[str] = None
    compiled: Template = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        step_sets = tuple(tuple(s) for s in self.step_sets)
        object.__setattr__(self, "step_sets", step_sets)
        object.__setattr__(self, "labels", tuple(self.labels))
        compiled = compile_template(self.template)
        object.__setattr__(self, "compiled", compiled)
        if compiled.num_convertible != len(step_sets):
            raise InvalidConfig(
                f"template has {compiled.num_convertible} [C] slots but {len(step_sets)} step sets given"
            )
        if not self.step_verbalizers:
            object.__setattr__(
                self,
                "step_verbalizers",
                tuple(Verbalizer.virtual(s, f"step{i}") for i, s in enumerate(step_sets)),
            )
        if self.label_verbalizer is None:
            object.__setattr__(self, "label_verbalizer", Verbalizer.virtual(self.labels, "label"))
        for v, s in zip(self.step_verbalizers, step_sets):
            if v.symbols != s:
                raise InvalidConfig("step verbalizer symbols differ from the step set")
        if self.label_verbalizer.symbols != self.labels:
            raise InvalidConfig("label verbalizer symbols differ from the label set")
        virtual = [w for v in self.verbalizers for w in v.words if is_virtual(w)]
        if len(set(virtual)) != len(virtual):
            raise InvalidConfig("virtual word identifiers must be unique across verbalizers")

    @property
    def verbalizers(self) -> tuple[Verbalizer, ...]:
        return (*self.step_verbalizers, self.label_verbalizer)

    @property
    def arity(self) -> int:
        return len(self.step_sets)

    @property
    def joint_size(self) -> int:
        return int(np.prod([len(s) for s in self.step_sets]))

    def vocabulary(self, instances: Iterable[Instance] = ()) -> list[str]:
        """Template literals, verbalizer words and every token seen in ``instances``."""
        tokens: list[str] = []
        for seg in self.compiled.segments:
            if isinstance(seg, str):
                tokens.extend(t for t in tokenize(seg) if t not in ("SUBJ", "OBJ"))
        for v in self.verbalizers:
            tokens.extend(v.words)
        for inst in instances:
            tokens.extend(inst.text)
        return tokens

    def check(self, inst: Instance) -> None:
        if inst.step is not None:
            for i, (sym, allowed) in enumerate(zip(inst.step, self.step_sets)):
                if sym not in allowed:
                    raise UnknownLabel(f"{inst.id}: step symbol {sym!r} not in slot {i} set")
        if inst.label is not None and inst.label not in self.labels:
            raise UnknownLabel(f"{inst.id}: label {inst.label!r} not in label set")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "template": self.template,
            "step_sets": [list(s) for s in self.step_sets],
            "labels": list(self.labels),
            "step_verbalizers": [v.to_text() for v in self.step_verbalizers],
            "label_verbalizer": self.label_verbalizer.to_text(),
            "negative_label": self.negative_label,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        return cls(
            kind=d["kind"],
            template=d["template"],
            step_sets=tuple(tuple(s) for s in d["step_sets"]),
            labels=tuple(d["labels"]),
            step_verbalizers=tuple(Verbalizer.from_text(t) for t in d.get("step_verbalizers", ())),
            label_verbalizer=(
                Verbalizer.from_text(d["label_verbalizer"]) if d.get("label_verbalizer") else None
            ),
            negative_label=d.get("negative_label"),
        )

    def save(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: PathLike) -> "TaskSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------- JSONL


def _split_paths(path: Union[PathLike, Mapping[str, PathLike]]) -> dict[str, Path]:
    if isinstance(path, Mapping):
        return {k: Path(v) for k, v in path.items()}
    path = Path(path)
    if path.is_dir():
        return {p.stem: p for p in sorted(path.glob("*.jsonl"))}
    return {path.stem: path}


def _records(path: Path) -> list[tuple[int, dict]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append((lineno, json.loads(line)))
                except json.JSONDecodeError as e:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
    if not out:
        raise EmptyDataset(f"{path}: no records")
    return out


def _field(rec: dict, name: str, path: Path, lineno: int, *aliases: str):
    for key in (name, *aliases):
        if key in rec:
            return rec[key]
    raise MissingField(f"{path}:{lineno}: missing field {name!r}")


def _text_tokens(text) -> tuple[str, ...]:
    return tuple(text) if isinstance(text, list) else tuple(tokenize(text))


def _check_declared(spec: Optional[TaskSpec], splits: dict[str, list[Instance]]) -> None:
    if spec is None:
        return
    for instances in splits.values():
        for inst in instances:
            spec.check(inst)


def load_hc(
    path: Union[PathLike, Mapping[str, PathLike]],
    declared: Optional[TaskSpec] = None,
    template: str = HC_TEMPLATE,
) -> tuple[TaskSpec, dict[str, list[Instance]]]:
    """Read HC JSONL. ``path`` is a file, a directory of ``<split>.jsonl``
    files, or a ``{split: file}`` mapping. Label sets are induced from the data
    unless ``declared`` is given, in which case records are checked against it."""
    splits: dict[str, list[Instance]] = {}
    for name, p in _split_paths(path).items():
        items = []
        for lineno, rec in _records(p):
            text = _field(rec, "text", p, lineno)
            domain = _field(rec, "domain", p, lineno)
            area = _field(rec, "area", p, lineno)
            items.append(
                Instance(str(rec.get("id", f"{name}-{lineno}")), _text_tokens(text), (domain,), area)
            )
        splits[name] = items
    if not splits:
        raise EmptyDataset(f"{path}: no JSONL files")
    if declared is not None:
        _check_declared(declared, splits)
        return declared, splits
    everything = [i for items in splits.values() for i in items]
    spec = TaskSpec(
        kind="hc",
        template=template,
        step_sets=(tuple(sorted({i.step[0] for i in everything})),),
        labels=tuple(sorted({i.label for i in everything})),
    )
    return spec, splits


def load_re(
    path: Union[PathLike, Mapping[str, PathLike]],
    declared: Optional[TaskSpec] = None,
    template: str = RE_TEMPLATE,
    negative_label: str = "no_relation",
) -> tuple[TaskSpec, dict[str, list[Instance]]]:
    """Read RE JSONL; the intermediate step is ``(subj_type, obj_type)``."""
    splits: dict[str, list[Instance]] = {}
    for name, p in _split_paths(path).items():
        items = []
        for lineno, rec in _records(p):
            tokens = tuple(_field(rec, "tokens", p, lineno, "token"))
            spans = [
                (int(_field(rec, f"{r}_start", p, lineno)), int(_field(rec, f"{r}_end", p, lineno)))
                for r in ("subj", "obj")
            ]
            for s, e in spans:
                if not (0 <= s <= e < len(tokens)):
                    raise SpanOutOfBounds(f"{p}:{lineno}: span ({s}, {e}) outside 0..{len(tokens) - 1}")
            step = (_field(rec, "subj_type", p, lineno), _field(rec, "obj_type", p, lineno))
            relation = _field(rec, "relation", p, lineno)
            items.append(
                Instance(
                    str(rec.get("id", f"{name}-{lineno}")), tokens, step, relation, spans[0], spans[1]
                )
            )
        splits[name] = items
    if not splits:
        raise EmptyDataset(f"{path}: no JSONL files")
    if declared is not None:
        _check_declared(declared, splits)
        return declared, splits
    everything = [i for items in splits.values() for i in items]
    spec = TaskSpec(
        kind="re",
        template=template,
        step_sets=(
            tuple(sorted({i.step[0] for i in everything})),
            tuple(sorted({i.step[1] for i in everything})),
        ),
        labels=tuple(sorted({i.label for i in everything})),
        negative_label=negative_label,
    )
    return spec, splits


def load_dataset(path, kind: str = "hc", declared: Optional[TaskSpec] = None):
    if kind == "re":
        return load_re(path, declared)
    return load_hc(path, declared)


def _atomic_write_lines(path: Path, lines: Iterable[str]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    os.replace(tmp, path)


def save_hc(instances: Sequence[Instance], path: PathLike) -> None:
    _atomic_write_lines(
        Path(path),
        (
            json.dumps({"id": i.id, "text": " ".join(i.text), "domain": i.step[0], "area": i.label})
            for i in instances
        ),
    )


def save_re(instances: Sequence[Instance], path: PathLike) -> None:
    def rec(i: Instance) -> str:
        return json.dumps(
            {
                "id": i.id,
                "tokens": list(i.text),
                "subj_start": i.subj_span[0],
                "subj_end": i.subj_span[1],
                "obj_start": i.obj_span[0],
                "obj_end": i.obj_span[1],
                "subj_type": i.step[0],
                "obj_type": i.step[1],
                "relation": i.label,
            }
        )

    _atomic_write_lines(Path(path), (rec(i) for i in instances))


# ----------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic two-step task.

    Each text holds one step token and one label-cue token among filler
    words. The step token is the cue of the gold step with probability
    ``p_clue`` and an uninformative distractor otherwise. The label cue only
    says *which* of the step's compatible labels is meant, so the label is
    recoverable from the text only through the step.

    ``noise_mode="uniform"`` flips any label with probability ``noise``;
    ``"clueless"`` flips only labels of texts whose step cue was replaced by a
    distractor.
    """

    n_train: int = 5000
    n_dev: int = 0
    n_test: int = 1000
    num_steps: int = 7
    labels_per_step: int = 2
    compatibility: Optional[Mapping[str, Sequence[str]]] = None
    p_clue: float = 1.0
    noise: float = 0.0
    noise_mode: str = "uniform"
    text_length: int = 8
    cues_per_step: int = 1  # synonymous cue words per step
    num_fillers: int = 20
    num_distractors: int = 4
    seed: int = 0

    def compat(self) -> dict[str, tuple[str, ...]]:
        if self.compatibility is not None:
            return {k: tuple(v) for k, v in self.compatibility.items()}
        k = self.labels_per_step
        return {
            f"D{i}": tuple(f"A{i * k + j}" for j in range(k)) for i in range(self.num_steps)
        }


def step_cue(step_index: int, variant: int = 0) -> str:
    return f"cue{step_index}" if variant == 0 else f"cue{step_index}v{variant}"


def label_cue(position: int) -> str:
    return f"mark{position}"


def synth_generate(config: SynthConfig) -> tuple[TaskSpec, dict[str, list[Instance]]]:
    compat = config.compat()
    if not 0.0 <= config.p_clue <= 1.0:
        raise InvalidConfig(f"p_clue must lie in [0, 1], got {config.p_clue}")
    if not 0.0 <= config.noise <= 1.0:
        raise InvalidConfig(f"noise must lie in [0, 1], got {config.noise}")
    if config.noise_mode not in ("uniform", "clueless"):
        raise InvalidConfig(f"unknown noise_mode {config.noise_mode!r}")
    if not compat or any(len(v) == 0 for v in compat.values()):
        raise InvalidConfig("every step needs at least one compatible label")
    if config.cues_per_step < 1:
        raise InvalidConfig("cues_per_step must be at least 1")
    if config.text_length < 2:
        raise InvalidConfig("text_length must be at least 2")
    steps = tuple(compat)
    labels = tuple(dict.fromkeys(l for v in compat.values() for l in v))

    rng = np.random.default_rng(config.seed)
    fillers = [f"w{i}" for i in range(config.num_fillers)]
    distractors = [f"other{i}" for i in range(config.num_distractors)]
    total = config.n_train + config.n_dev + config.n_test
    instances = []
    for n in range(total):
        si = int(rng.integers(len(steps)))
        step = steps[si]
        j = int(rng.integers(len(compat[step])))
        label = compat[step][j]
        clue = bool(rng.random() < config.p_clue)
        words = [fillers[int(i)] for i in rng.integers(config.num_fillers, size=config.text_length)]
        a, b = rng.choice(config.text_length, size=2, replace=False)
        variant = int(rng.integers(config.cues_per_step))
        words[int(a)] = step_cue(si, variant) if clue else distractors[int(rng.integers(config.num_distractors))]
        words[int(b)] = label_cue(j)
        flip = rng.random() < config.noise
        if flip and len(labels) > 1 and (config.noise_mode == "uniform" or not clue):
            others = [l for l in labels if l != label]
            label = others[int(rng.integers(len(others)))]
        instances.append(Instance(f"syn-{n}", tuple(words), (step,), label))

    spec = TaskSpec(kind="synthetic", template=HC_TEMPLATE, step_sets=(steps,), labels=labels)
    out = {"train": instances[: config.n_train]}
    if config.n_dev:
        out["dev"] = instances[config.n_train : config.n_train + config.n_dev]
    out["test"] = instances[config.n_train + config.n_dev :]
    return spec, out


def synth_vocabulary(config: SynthConfig) -> list[str]:
    """Every token the generator can emit."""
    k = max(len(v) for v in config.compat().values())
    return (
        [f"w{i}" for i in range(config.num_fillers)]
        + [f"other{i}" for i in range(config.num_distractors)]
        + [step_cue(i, v) for i in range(len(config.compat())) for v in range(config.cues_per_step)]
        + [label_cue(j) for j in range(k)]
    )
