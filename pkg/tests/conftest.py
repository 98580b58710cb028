import numpy as np
import pytest
import torch

from cott.backend import BackboneConfig, reference_backbone
from cott.contrastive import ProjectionHead
from cott.data import HC_TEMPLATE, RE_TEMPLATE, Instance, SynthConfig, TaskSpec, synth_generate


def central_difference(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``x`` (in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        up = float(f())
        flat[i] = old - eps
        down = float(f())
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """|a - b| / max(|a|, |b|); entries below ``floor`` in magnitude are
    compared against ``floor`` since their relative error is pure roundoff."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def hc_task():
    return TaskSpec(
        kind="hc",
        template=HC_TEMPLATE,
        step_sets=(("Bio", "CS", "Med"),),
        labels=("Gene", "PCR", "ML", "Vision", "HA"),
    )


@pytest.fixture
def re_task():
    return TaskSpec(
        kind="re",
        template=RE_TEMPLATE,
        step_sets=(("PERSON", "ORG"), ("TITLE", "CITY", "PERSON")),
        labels=("no_relation", "per:title", "org:city"),
        negative_label="no_relation",
    )


@pytest.fixture
def hc_instances():
    return [
        Instance("a", ("rodents", "decline", "in", "europe"), ("Bio",), "Gene"),
        Instance("b", ("neural", "networks", "learn"), ("CS",), "ML"),
        Instance("c", ("tuberculosis", "in", "china"), ("Med",), "HA"),
    ]


@pytest.fixture
def re_instance():
    return Instance(
        "r",
        ("john", "smith", "is", "the", "ceo", "of", "acme"),
        ("PERSON", "TITLE"),
        "per:title",
        subj_span=(0, 1),
        obj_span=(4, 4),
    )


@pytest.fixture
def tiny_backend(hc_task, hc_instances):
    cfg = BackboneConfig(hidden_size=16, num_layers=2, num_heads=2, max_length=32)
    return reference_backbone(cfg, hc_task.vocabulary(hc_instances), seed=0)


@pytest.fixture
def tiny_head():
    return ProjectionHead(16, seed=1)


@pytest.fixture(scope="session")
def separable():
    """Small clean synthetic task shared by the slower tests."""
    return synth_generate(SynthConfig(n_train=600, n_test=200, seed=0, p_clue=1.0, noise=0.0))
