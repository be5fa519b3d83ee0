"""How many vision tokens and positional vectors each expert costs.

Run: python3 demos/token_budget.py
"""

from polyvis.analysis import token_budget_report
from polyvis.experts import preset_specs
from polyvis.fusion import FusionConfig, check_m
from polyvis.positional import SCHEMES

specs = {s.name: s for s in preset_specs("paper")}

print("one expert at a time, no grouping, 8 prompt tokens\n")
print(f"{'expert':<12}{'patches':>8}  " + "  ".join(f"{s:>16}" for s in SCHEMES))
for name, spec in specs.items():
    fc = FusionConfig(method="mlp", expert_order=(name,), m_per_expert={name: 1})
    pes = [token_budget_report(fc, specs, s, 8).distinct_pe for s in SCHEMES]
    print(f"{name:<12}{spec.n_patches:>8}  " + "  ".join(f"{p:>16}" for p in pes))

print("\ngrouping m neighbouring patches shrinks the sequence by m")
clip = specs["clip"]
for m in (1, 2, 4, 8, 12, 24):
    try:
        check_m(m, clip.n_patches, clip.grid_cols)
    except ValueError as exc:
        print(f"  m={m:<3} rejected: {exc}")
        continue
    fc = FusionConfig(method="mlp", expert_order=("clip",), m_per_expert={"clip": m})
    rep = token_budget_report(fc, specs, "share_by_row", 8)
    print(f"  m={m:<3} tokens={rep.vision_tokens:<4} vision/text={rep.ratio:.0f}")

print("\nthree experts side by side")
fc = FusionConfig(method="mlp", expert_order=("clip", "dinov2", "sam"), m_per_expert={"clip": 4, "dinov2": 4, "sam": 16})
print(token_budget_report(fc, specs, "share_by_row", 8).table())
