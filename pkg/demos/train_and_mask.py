"""Train the two-expert toy model, then ask which expert each answer relies on.

Each expert sees one attribute of the image: clip sees color, dinov2 sees
count. Masking an expert should cost exactly the questions it answers.

Run: python3 demos/train_and_mask.py  (about 20 s)
"""

import logging

from polyvis.analysis import MaskSpec, attention_contribution, mask_expert
from polyvis.harness.config import default_config
from polyvis.harness.experiment import _tsv, mask_table
from polyvis.harness.task import generate_task
from polyvis.training import run_pipeline

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = default_config(0)
train, evals = generate_task(cfg.task, cfg.seed)
result = run_pipeline(cfg, train_set=train, log_every=50)
model = result.model
for phase, rep in result.reports.items():
    print(f"{phase}: 100-step mean losses {[round(x, 3) for x in rep.window_means(100)]}")

batch = model.make_batch(evals)
print("\naccuracy by question type under masking")
print(_tsv(mask_table(model, batch)))

print("attention mass from answer rows, by source")
print(attention_contribution(model, batch.subset(range(64))).table())

sample = evals[1]
for hidden in ((), ("clip",), ("dinov2",)):
    tokens, rep = mask_expert(model, sample, MaskSpec(hidden))
    print(f"{sample.qtype} question, masked {list(hidden) or 'nothing'}: answer {tokens}, gold {list(sample.answer)}")
