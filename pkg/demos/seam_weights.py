"""Compare overlap weighting schemes on the stub sliding-window task.

The stub denoiser knows the exact clean target of every window, and the
targets of neighbouring windows disagree by a fixed offset. Whatever jump
remains at the seams after sampling comes from the fusion weights alone.

    python3 demos/seam_weights.py
"""

import numpy as np

from lff.windowing import log_weights, stub_weighting_ablation, weight_curve

for m in (3, 4, 8):
    print(f"log weights, m={m}:", np.round(log_weights(m), 4))
print("fixed, m=4:   ", weight_curve(4, "fixed").w)
print("uniform, m=4: ", weight_curve(4, "uniform").w)
print()

res = stub_weighting_ablation(L=64, l=16, m=4, steps=10)
for scheme, jump in res.items():
    print(f"{scheme:12s} seam discontinuity {jump:.4f}")
