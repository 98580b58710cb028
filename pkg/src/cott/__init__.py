"""Two-step cloze reasoning for masked language models (chain-of-thought tuning)."""

from .backend import Backend, BackboneConfig, SlotDistribution, reference_backbone
from .contrastive import ProjectionHead, contrastive_loss, project, similarity
from .data import Instance, SynthConfig, TaskSpec, load_hc, load_re, synth_generate
from .evaluation import apply_monitors, hamming_loss, micro_macro_f1, relation_f1
from .prompt import Template, Verbalizer, compile_template, render_step1, render_step2
from .reasoner import (
    ReasoningTrace,
    exact_total_probability,
    kl_assumption_check,
    predict,
    predict_batch,
    rectify,
    sample_counterfactual,
    step_one,
    step_two,
)
from .training import TrainConfig, instance_loss, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
