"""The assembled network and its ablation family.

The model is assembled from three toggles: attention gates (AG), a second
lung decoder (DD), and the transformer encoder path (TrEc). Turning each off
yields the named ablation variants; shapes never change, only the graph.

Run:  python demos/02_model_variants.py
"""

import torch

from dtrattunet.config import tiny_model_config
from dtrattunet.model import VARIANT_FLAGS, build_variant, config_for_variant, layer_manifest

base = tiny_model_config(image_size=64)
x = torch.randn(1, 3, 64, 64)

print(f"{'variant':<14}{'AG':>4}{'DD':>4}{'TrEc':>6}{'params':>12}   outputs")
for name, (ag, dd, trec) in VARIANT_FLAGS.items():
    cfg = config_for_variant(name, base)
    model = build_variant(cfg, seed=0).eval()
    with torch.no_grad():
        out = model(x)
    params = sum(p.numel() for p in model.parameters())
    lung = "lung " + str(tuple(out.lung.shape)) if out.lung is not None else "no lung head"
    mark = lambda b: "on" if b else "off"
    print(
        f"{name:<14}{mark(ag):>4}{mark(dd):>4}{mark(trec):>6}{params:>12,}   "
        f"infection {tuple(out.infection.shape)}, {lung}"
    )

print("\nDiffing the manifests shows exactly what a toggle adds:")
dual = {e["name"] for e in layer_manifest(build_variant(base, seed=0))}
single = {
    e["name"] for e in layer_manifest(build_variant(config_for_variant("trattunet", base), seed=0))
}
added = sorted(dual - single)
print(f"  d-trattunet has {len(added)} parameter tensors that trattunet lacks, e.g.:")
for name in added[:5]:
    print(f"    {name}")

print("\nThe encoder bundle spans five resolutions:")
model = build_variant(base, seed=0).eval()
with torch.no_grad():
    bundle = model.encode(x)
for i, feature in enumerate(bundle, start=1):
    print(f"  stage {i}: {tuple(feature.shape)}")
