# %% [markdown]
# # Probability rectification
#
# Step I gives an intuitive label distribution `p(y|x)` and a step confidence
# `conf = p(Î|x)`. Step II gives the rational distribution `p(y|x,Î)`.
# Rectification mixes the two:
#
#     p_rect = conf * p(y|x,Î) + (1 - conf) * p(y|x)
#
# A confident step lets step II dominate; an uncertain one falls back on the
# intuitive prediction.

# %%
import numpy as np

from cott.reasoner import rectify_probs

labels = ["Gene", "PCR", "MB"]
p1 = np.array([0.19, 0.25, 0.06])
p2 = np.array([0.54, 0.19, 0.15])
for conf in (0.0, 0.25, 0.53, 0.9, 1.0):
    r = rectify_probs(conf, p1, p2)
    print(f"conf={conf:.2f}", dict(zip(labels, r.round(4))), "->", labels[int(r.argmax())])

# %% [markdown]
# An ambiguous step flips the decision back towards the intuitive label:

# %%
r = rectify_probs(0.52, [0.64, 0.04], [0.04, 0.30])
print(dict(zip(["PCR", "H/A"], r.round(4))))

# %% [markdown]
# The same mix is available from the command line:
#
#     cott rectify --conf 0.52 --p1 0.64,0.04 --p2 0.04,0.30 --labels PCR,H/A
#
# On a model the mix can be compared with the exact marginal
# `sum_I p(I|x) p(y|x,I)`, which needs one step-II pass per step.

# %%
from cott.backend import BackboneConfig, reference_backbone
from cott.data import HC_TEMPLATE, Instance, TaskSpec
from cott.reasoner import exact_total_probability, predict

task = TaskSpec("hc", HC_TEMPLATE, (("Bio", "CS", "Med"),), ("Gene", "PCR", "ML", "Vision", "HA"))
x = Instance("a", "tuberculosis cases in china".split())
b = reference_backbone(BackboneConfig(hidden_size=16, num_heads=2), task.vocabulary([x]), seed=0)
trace = predict(b, task, x)
exact = exact_total_probability(b, task, x)
print("conf", round(trace.confidence, 4))
print("rectified", trace.rectified.probs.round(4))
print("exact    ", exact.probs.round(4))
