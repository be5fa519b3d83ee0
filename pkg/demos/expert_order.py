"""Does the order in which expert tokens enter the sequence matter?

Trains one model per order on the same data and seeds.
Run: python3 demos/expert_order.py  (about 40 s)
"""

from polyvis.analysis import order_sweep
from polyvis.harness.config import default_config
from polyvis.harness.experiment import _tsv

cfg = default_config(0)
print(_tsv(order_sweep(cfg, [["clip", "dinov2"], ["dinov2", "clip"]])))
