"""Two-step cloze reasoning, counterfactual sampling and probability rectification.

Step I renders the prompt with every ``[C]`` and ``[A]`` masked; the ``[C]``
positions give the intermediate-step distribution and ``[A]`` gives an
intuitive label distribution in the same forward pass. Step II injects the
predicted step into the ``[C]`` slots and reads a rational label distribution
from ``[A]``. The two are mixed with the step's confidence as the weight.

The ``*_batch`` functions are differentiable and are what training uses; the
single-instance functions run without gradients and return plain numpy data.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .backend import Backend, SlotDistribution
from .data import Instance, TaskSpec
from .errors import (
    CandidateMismatch,
    NoCounterfactualAvailable,
    PreconditionError,
    SpaceTooLarge,
)
from .prompt import render_step1, render_step2

TRACE_SCHEMA_VERSION = 1
MAX_ENUMERATION = 1000
PROB_FLOOR = 1e-12


# ------------------------------------------------------------------ batched core


@dataclass
class StepOneOutput:
    step_log_probs: list[torch.Tensor]  # one [B, |I_slot|] tensor per [C] slot
    label_log_probs: torch.Tensor  # [B, |Y|]
    h: torch.Tensor  # [B, d] hidden vector at [A]


def step_one_batch(b: Backend, task: TaskSpec, instances: Sequence[Instance]) -> StepOneOutput:
    t = task.compiled
    prompts = [render_step1(t, x.text, x.anchors()) for x in instances]
    states = b.hidden(prompts)
    rows = torch.arange(len(prompts))
    h = states[rows, torch.tensor([p.answer_position for p in prompts])]
    step_lp = []
    for slot, v in enumerate(task.step_verbalizers):
        hc = states[rows, torch.tensor([p.convertible_positions[slot] for p in prompts])]
        step_lp.append(b.candidate_log_probs(hc, v.words))
    label_lp = b.candidate_log_probs(h, task.label_verbalizer.words)
    return StepOneOutput(step_lp, label_lp, h)


def step_two_batch(
    b: Backend, task: TaskSpec, instances: Sequence[Instance], steps: Sequence[Sequence[str]]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Label log-probabilities ``[B, |Y|]`` and ``[A]`` vectors given injected steps."""
    t = task.compiled
    prompts = [
        render_step2(t, x.text, s, task.step_verbalizers, x.anchors()) for x, s in zip(instances, steps)
    ]
    h = b.hidden_at(prompts, [p.answer_position for p in prompts])
    return b.candidate_log_probs(h, task.label_verbalizer.words), h


def argmax_steps(task: TaskSpec, step_log_probs: Sequence[torch.Tensor]) -> list[tuple[str, ...]]:
    # torch.argmax does not promise first-index tie breaking; numpy does
    idx = [np.argmax(lp.detach().cpu().numpy(), axis=1) for lp in step_log_probs]
    return [
        tuple(task.step_sets[s][int(idx[s][i])] for s in range(task.arity))
        for i in range(len(idx[0]))
    ]


def _chunks(items: Sequence, size: int) -> Iterator[Sequence]:
    for i in range(0, len(items), size):
        yield items[i : i + size]


# -------------------------------------------------------------------- traces


@dataclass
class StepOneResult:
    step_dists: list[SlotDistribution]
    step: tuple[str, ...]
    confidence: float
    label_dist: SlotDistribution
    intuitive: str
    h_x: np.ndarray


@dataclass
class ReasoningTrace:
    id: str
    step_dists: list[SlotDistribution]  # p(I|x), one per [C] slot
    step: tuple[str, ...]  # predicted intermediate step
    confidence: float  # joint probability of the predicted step
    label_dist_x: SlotDistribution  # p(y|x), step I
    intuitive: str
    label_dist_step: SlotDistribution  # p(y|x, step), step II
    rational: str
    rectified: SlotDistribution
    prediction: str
    h_x: Optional[np.ndarray] = None
    h_step: Optional[np.ndarray] = None
    h_counterfactual: Optional[np.ndarray] = None
    counterfactual: Optional[tuple[str, ...]] = None

    @property
    def self_consistent(self) -> bool:
        return self.intuitive == self.rational

    def to_dict(self) -> dict:
        def vec(v):
            return None if v is None else [float(a) for a in v]

        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "id": self.id,
            "step_dists": [d.to_dict() for d in self.step_dists],
            "step": list(self.step),
            "confidence": float(self.confidence),
            "label_dist_x": self.label_dist_x.to_dict(),
            "intuitive": self.intuitive,
            "label_dist_step": self.label_dist_step.to_dict(),
            "rational": self.rational,
            "rectified": self.rectified.to_dict(),
            "prediction": self.prediction,
            "h_x": vec(self.h_x),
            "h_step": vec(self.h_step),
            "h_counterfactual": vec(self.h_counterfactual),
            "counterfactual": None if self.counterfactual is None else list(self.counterfactual),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReasoningTrace":
        version = d.get("schema_version")
        if version != TRACE_SCHEMA_VERSION:
            raise PreconditionError(f"trace schema version {version}, expected {TRACE_SCHEMA_VERSION}")

        def vec(v):
            return None if v is None else np.asarray(v, dtype=np.float64)

        return cls(
            id=d["id"],
            step_dists=[SlotDistribution.from_dict(s) for s in d["step_dists"]],
            step=tuple(d["step"]),
            confidence=float(d["confidence"]),
            label_dist_x=SlotDistribution.from_dict(d["label_dist_x"]),
            intuitive=d["intuitive"],
            label_dist_step=SlotDistribution.from_dict(d["label_dist_step"]),
            rational=d["rational"],
            rectified=SlotDistribution.from_dict(d["rectified"]),
            prediction=d["prediction"],
            h_x=vec(d.get("h_x")),
            h_step=vec(d.get("h_step")),
            h_counterfactual=vec(d.get("h_counterfactual")),
            counterfactual=None if d.get("counterfactual") is None else tuple(d["counterfactual"]),
        )


def write_traces(traces: Sequence[ReasoningTrace], fh) -> None:
    for tr in traces:
        fh.write(json.dumps(tr.to_dict()) + "\n")


def read_traces(fh) -> list[ReasoningTrace]:
    return [ReasoningTrace.from_dict(json.loads(line)) for line in fh if line.strip()]


# ------------------------------------------------------------- public operations


def _dists(task: TaskSpec, out: StepOneOutput, i: int) -> tuple[list[SlotDistribution], SlotDistribution]:
    steps = [
        SlotDistribution(task.step_sets[s], torch.exp(lp[i]).cpu().numpy())
        for s, lp in enumerate(out.step_log_probs)
    ]
    label = SlotDistribution(task.labels, torch.exp(out.label_log_probs[i]).cpu().numpy())
    return steps, label


def _step_one_results(b: Backend, task: TaskSpec, instances: Sequence[Instance]) -> list[StepOneResult]:
    out = step_one_batch(b, task, instances)
    results = []
    for i in range(len(instances)):
        step_dists, label = _dists(task, out, i)
        idx = [d.argmax() for d in step_dists]
        step = tuple(d.candidates[j] for d, j in zip(step_dists, idx))
        conf = float(np.prod([d.probs[j] for d, j in zip(step_dists, idx)]))
        results.append(
            StepOneResult(step_dists, step, conf, label, label.top(), out.h[i].cpu().numpy())
        )
    return results


@torch.no_grad()
def step_one(b: Backend, task: TaskSpec, x: Instance) -> StepOneResult:
    """Intermediate-step distribution per ``[C]`` slot and the parallel label distribution."""
    return _step_one_results(b, task, [x])[0]


@torch.no_grad()
def step_two(
    b: Backend, task: TaskSpec, x: Instance, step: Sequence[str]
) -> tuple[SlotDistribution, np.ndarray, str]:
    lp, h = step_two_batch(b, task, [x], [tuple(step)])
    dist = SlotDistribution(task.labels, torch.exp(lp[0]).cpu().numpy())
    return dist, h[0].cpu().numpy(), dist.top()


def joint_distribution(step_dists: Sequence[SlotDistribution]) -> tuple[list[tuple[str, ...]], np.ndarray]:
    """All step tuples in row-major order with product probabilities."""
    tuples = list(itertools.product(*(d.candidates for d in step_dists)))
    probs = np.ones(1)
    for d in step_dists:
        probs = np.multiply.outer(probs, d.probs).ravel()
    return tuples, probs


def counterfactual_distribution(
    step_dists: Sequence[SlotDistribution], step: Sequence[str]
) -> tuple[list[tuple[str, ...]], np.ndarray]:
    """Joint step distribution with ``step`` removed and the rest renormalised."""
    tuples, probs = joint_distribution(step_dists)
    if len(tuples) < 2:
        raise NoCounterfactualAvailable("intermediate-step space has a single element")
    masked = probs.copy()
    masked[tuples.index(tuple(step))] = 0.0
    total = masked.sum()
    if total > 0:
        return tuples, masked / total
    # every other tuple underflowed to zero mass; fall back to uniform
    masked = np.ones_like(probs)
    masked[tuples.index(tuple(step))] = 0.0
    return tuples, masked / masked.sum()


def sample_counterfactual(
    step_dists: Sequence[SlotDistribution],
    step: Sequence[str],
    rng: np.random.Generator,
    size: Optional[int] = None,
):
    """One counterfactual step tuple, or a list of ``size`` independent draws."""
    tuples, probs = counterfactual_distribution(step_dists, step)
    if size is None:
        return tuples[int(rng.choice(len(tuples), p=probs))]
    return [tuples[int(i)] for i in rng.choice(len(tuples), size=size, p=probs)]


def rectify_probs(conf: float, p_step1, p_step2) -> np.ndarray:
    p1 = np.asarray(p_step1, dtype=np.float64)
    p2 = np.asarray(p_step2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise CandidateMismatch(f"distribution shapes differ: {p1.shape} vs {p2.shape}")
    if not 0.0 <= conf <= 1.0:
        raise PreconditionError(f"confidence must lie in [0, 1], got {conf}")
    return conf * p2 + (1.0 - conf) * p1


def rectify(conf: float, p_step1: SlotDistribution, p_step2: SlotDistribution) -> SlotDistribution:
    """Confidence-weighted mix of the intuitive and the rational label distribution."""
    if p_step1.candidates != p_step2.candidates:
        raise CandidateMismatch("step I and step II distributions cover different candidates")
    return SlotDistribution(p_step1.candidates, rectify_probs(conf, p_step1.probs, p_step2.probs))


@torch.no_grad()
def predict_batch(
    b: Backend,
    task: TaskSpec,
    instances: Sequence[Instance],
    batch_size: int = 128,
    keep_hidden: bool = True,
) -> list[ReasoningTrace]:
    traces = []
    for chunk in _chunks(instances, batch_size):
        first = _step_one_results(b, task, chunk)
        lp, h2 = step_two_batch(b, task, chunk, [r.step for r in first])
        for i, (x, r) in enumerate(zip(chunk, first)):
            p2 = SlotDistribution(task.labels, torch.exp(lp[i]).cpu().numpy())
            rect = rectify(r.confidence, r.label_dist, p2)
            traces.append(
                ReasoningTrace(
                    id=x.id,
                    step_dists=r.step_dists,
                    step=r.step,
                    confidence=r.confidence,
                    label_dist_x=r.label_dist,
                    intuitive=r.intuitive,
                    label_dist_step=p2,
                    rational=p2.top(),
                    rectified=rect,
                    prediction=rect.top(),
                    h_x=r.h_x if keep_hidden else None,
                    h_step=h2[i].cpu().numpy() if keep_hidden else None,
                )
            )
    return traces


def predict(b: Backend, task: TaskSpec, x: Instance) -> ReasoningTrace:
    return predict_batch(b, task, [x])[0]


def _enumerate_steps(task: TaskSpec) -> list[tuple[str, ...]]:
    if task.joint_size > MAX_ENUMERATION:
        raise SpaceTooLarge(f"{task.joint_size} step tuples exceed the limit of {MAX_ENUMERATION}")
    return list(itertools.product(*task.step_sets))


@torch.no_grad()
def _conditional_label_probs(b: Backend, task: TaskSpec, x: Instance, tuples) -> np.ndarray:
    rows = []
    for chunk in _chunks(tuples, 256):
        lp, _ = step_two_batch(b, task, [x] * len(chunk), chunk)
        rows.append(torch.exp(lp).cpu().numpy())
    return np.concatenate(rows)


def exact_total_probability(b: Backend, task: TaskSpec, x: Instance) -> SlotDistribution:
    """Sum over every step tuple of p(I|x) p(y|x,I); runs step II once per tuple."""
    tuples = _enumerate_steps(task)
    first = step_one(b, task, x)
    _, weights = joint_distribution(first.step_dists)
    cond = _conditional_label_probs(b, task, x, tuples)
    return SlotDistribution(task.labels, weights @ cond)


def kl_divergence(p, q, floor: float = PROB_FLOOR) -> float:
    p = np.maximum(np.asarray(p, dtype=np.float64), floor)
    q = np.maximum(np.asarray(q, dtype=np.float64), floor)
    return float(np.sum(p * (np.log(p) - np.log(q))))


@dataclass(frozen=True)
class KLEntry:
    step: tuple[str, ...]
    kl_to_intuitive: float  # D(p(y|x,I) || p(y|x))
    kl_to_predicted: float  # D(p(y|x,I) || p(y|x,step_hat))
    holds: bool


@dataclass(frozen=True)
class KLReport:
    predicted_step: tuple[str, ...]
    entries: tuple[KLEntry, ...]

    @property
    def satisfaction_rate(self) -> float:
        if not self.entries:
            return float("nan")
        return sum(e.holds for e in self.entries) / len(self.entries)


def kl_assumption_report(
    predicted_step: Sequence[str],
    p_intuitive,
    conditionals: dict[tuple[str, ...], np.ndarray],
) -> KLReport:
    """Compare, for every non-predicted step, how far its conditional label
    distribution is from the intuitive one versus the predicted-step one."""
    predicted_step = tuple(predicted_step)
    p_hat = conditionals[predicted_step]
    entries = []
    for step, p_i in conditionals.items():
        if step == predicted_step:
            continue
        a = kl_divergence(p_i, p_intuitive)
        c = kl_divergence(p_i, p_hat)
        entries.append(KLEntry(step, a, c, a < c))
    return KLReport(predicted_step, tuple(entries))


def kl_assumption_check(b: Backend, task: TaskSpec, x: Instance) -> KLReport:
    tuples = _enumerate_steps(task)
    first = step_one(b, task, x)
    cond = _conditional_label_probs(b, task, x, tuples)
    return kl_assumption_report(first.step, first.label_dist.probs, dict(zip(tuples, cond)))
