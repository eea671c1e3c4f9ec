"""
Per-layer [CLS] similarity and layer skipping
=============================================

For one image, how close each layer's [CLS] embedding is to the top layer's,
and how much the final feature changes when that layer is skipped. The first
curve is exactly the per-layer weight used by the initialization stage.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from vlattack import ImageSample, ToyBackend, ToyConfig, layer_diagnostics, layer_importance

backend = ToyBackend(ToyConfig(num_layers=6, image_size=16, patch_size=4))
rng = np.random.default_rng(0)
v = ImageSample("noise", rng.uniform(0, 1, (16, 16, 3)))

rows = layer_diagnostics(v, backend)
for r in rows:
    print(r)
print("layer weights:", layer_importance(v, backend).round(4))

layers = [r["layer"] for r in rows]
plt.plot(layers, [r["cls_similarity"] for r in rows], "o-", label="[CLS] vs top layer")
plt.plot(layers, [r["skip_similarity"] for r in rows], "s--", label="layer skipped")
plt.xlabel("layer")
plt.ylabel("cosine")
plt.legend()
plt.savefig("layer_diagnostics.png", dpi=120)
