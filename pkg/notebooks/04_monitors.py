# %% [markdown]
# # Reasoning monitors
#
# Monitors never change a prediction; they decide which predictions to report.
# M1 flags traces whose intuitive and rational labels disagree, M2 flags
# traces whose predicted step differs from the gold step.
#
# Here the label noise sits on texts whose step cue was replaced by a
# distractor, so wrong steps and wrong labels go together.

# %%
from cott.data import SynthConfig, synth_generate
from cott.evaluation import apply_monitors, format_report
from cott.reasoner import predict_batch
from cott.training import DESK_SCALE, TrainConfig, train

task, splits = synth_generate(
    SynthConfig(n_train=1000, n_dev=200, n_test=500, p_clue=0.7, noise=0.5, noise_mode="clueless", seed=0)
)
result = train(TrainConfig(**DESK_SCALE, epochs=6, seed=0), splits, task)
traces = predict_batch(result.backend, task, splits["test"], keep_hidden=False)

# %%
for active in ((), ("M1",), ("M2",), ("M1", "M2")):
    _, report = apply_monitors(traces, splits["test"], active)
    print(format_report(report))
    print()
