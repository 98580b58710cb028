# %% [markdown]
# # Templates, convertible slots and verbalizers
#
# A cloze template holds the text slot `[T]`, the answer slot `[A]` and one or
# more convertible slots `[C]`. In step I every `[C]` is masked and the model
# predicts the intermediate step there. In step II the predicted step is
# written into `[C]` and only `[A]` stays masked.

# %%
from cott.data import HC_TEMPLATE, RE_TEMPLATE, Instance, TaskSpec
from cott.prompt import Verbalizer, compile_template, render_step1, render_step2

t = compile_template(HC_TEMPLATE)
[s.kind for s in t.slots]

# %%
text = "rodents decline across western europe".split()
p1 = render_step1(t, text)
print(" ".join(p1.tokens))
print("answer at", p1.answer_position, "convertible at", p1.convertible_positions)

# %% [markdown]
# Step-II prompts need a verbalizer for the intermediate step. Plain words go
# through the tokenizer; words written `<namespace:symbol>` are learnable
# virtual words with their own embedding rows.

# %%
domains = Verbalizer.virtual(["Bio", "CS", "Med"], "domain")
p2 = render_step2(t, text, ["Bio"], domains)
print(" ".join(p2.tokens))

plain = Verbalizer(("Bio", "CS"), ("biology", "computer science"))
p2_plain = render_step2(t, text, ["CS"], plain)
print(" ".join(p2_plain.tokens), "| answer moved to", p2_plain.answer_position)

# %% [markdown]
# Relation extraction uses two convertible slots, one per entity type, and
# anchors that splice the entity mentions into the template.

# %%
x = Instance(
    "r1",
    "john smith is the ceo of acme".split(),
    ("PERSON", "TITLE"),
    "per:title",
    subj_span=(0, 1),
    obj_span=(4, 4),
)
rt = compile_template(RE_TEMPLATE)
print(" ".join(render_step1(rt, x.text, x.anchors()).tokens))

task = TaskSpec(
    kind="re",
    template=RE_TEMPLATE,
    step_sets=(("PERSON", "ORG"), ("TITLE", "CITY", "PERSON")),
    labels=("no_relation", "per:title", "org:city"),
    negative_label="no_relation",
)
print(" ".join(render_step2(rt, x.text, x.step, task.step_verbalizers, x.anchors()).tokens))
