"""Walk one image through the two-stream model and look at every scale.

The frozen encoder downsamples 16x; the side adapter rides along at a reduced
width; tapped encoder activations accumulate into an H/8 + H/4 hierarchy; the
fusion decoder climbs back to full resolution.
"""

import numpy as np

import sideseg as ss

model = ss.build(ss.toy_config())
print("trainable parameters:", ss.count_parameters(model.store, "trainable"))
print("frozen parameters:   ", ss.count_parameters(model.store, "frozen"))

image = ss.generate_synthetic(1, (64, 64), seed=0)[0].image[None]
capture = {}
logits, _ = model.run(image, mode="eval", capture=capture)

print("\ninput image:          ", image.shape)
print("encoder activations:  ", [a.shape for a in capture["per_block"]])
print("side stream feature:  ", capture["side"].shape)
print("hierarchy (H/8, H/4): ", [h.shape for h in capture["hierarchy"]])
print("logits:               ", logits.data.shape)

probs = 1.0 / (1.0 + np.exp(-logits.data))
print("\nprediction stats: min %.3f  mean %.3f  max %.3f" %
      (probs.min(), probs.mean(), probs.max()))
print("untrained output carries no signal yet; training shapes it (see demo 03)")
