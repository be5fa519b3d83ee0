"""Fuse two experts into one token sequence and look at what each PE scheme assigns.

Run: python3 demos/fusion_and_positions.py
"""

from polyvis.experts import Expert, SyntheticImage, preset
from polyvis.fusion import FusionConfig, FusionParams, fuse
from polyvis.positional import SCHEMES, assign_positions

specs = [preset("clip"), preset("dinov2")]
image = SyntheticImage(color=2, count=1, mark=0, layout=3, seed=7)
features = [Expert(s).encode(image) for s in specs]
for f in features:
    print(f"{f.expert:<7} grid {f.grid[0]}x{f.grid[1]}, features {f.features.shape}")

for method, extra in (("mlp", {"m_per_expert": {"clip": 8, "dinov2": 16}}), ("qformer", {"queries_per_expert": {"clip": 16, "dinov2": 4}, "qformer_width": 32})):
    fc = FusionConfig(method=method, expert_order=("clip", "dinov2"), **extra)
    out = fuse(features, FusionParams(fc, specs, seed=0))
    print(f"\n{method}: {out.n_tokens} tokens of width {out.tokens.shape[-1]}")
    for seg in out.segments:
        print(f"  {seg.expert:<7} positions {seg.start}..{seg.start + seg.length - 1}, grid {seg.grid}")

grids = [(24, 3), (16, 1)]
print("\nposition indices of the first tokens of each segment (mlp grids)")
for scheme in SCHEMES:
    a = assign_positions(scheme, grids)
    head = a.index[:4].tolist()
    tail = a.index[72:75].tolist()
    print(f"  {scheme:<17} distinct={a.distinct_count:<4} clip {head} ... dinov2 {tail}")
