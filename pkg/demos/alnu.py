"""What the adaptive layer normalization unit does to a feature map."""

import numpy as np

from ccnet import normalization as nrm

rng = np.random.default_rng(1)
f = 3.0 * rng.normal(size=(4, 4, 8)) + 5.0
mu, sigma = nrm.layer_stats(f)
print("input mean %.3f, std %.3f" % (mu, sigma))

# fresh unit: the last ALB layer is zero, so gamma = beta = 0.5
p = nrm.init_alnu(rng, 8)
out, _ = nrm.alnu_forward(p, f)
print("fresh ALNU output mean %.3f, std %.3f" % nrm.layer_stats(out))

# perturb the ALB weights: gamma and beta now depend on the input
p = nrm.AlnuParams.from_arrays({k: v + 0.2 * rng.normal(size=np.shape(v)) for k, v in p.arrays().items()})
gamma, _ = nrm.alb_forward(p.gamma_block, f)
beta, _ = nrm.alb_forward(p.beta_block, f)
out, _ = nrm.alnu_forward(p, f)
print("gamma %.3f beta %.3f -> output mean %.3f std %.3f" % ((gamma, beta) + nrm.layer_stats(out)))

# order within the feature survives (gamma > 0)
print("argsort preserved:", np.array_equal(np.argsort(f, axis=None), np.argsort(out, axis=None)))

# a per-capture gain on the input is gone after the standardization step
for gain in (0.3, 1.0, 4.0):
    fh = nrm.normalize(gain * f, *nrm.layer_stats(gain * f))
    print(f"gain {gain:3.1f}: first normalized values {np.round(fh.ravel()[:4], 4)}")

# the baselines it is compared against
batch = 3.0 * rng.normal(size=(2, 4, 4, 8)) + 1.0
for mode in ("IN", "LN"):
    y, _ = nrm.baseline_norm(batch, mode)
    print(mode, "per-sample mean/std:", np.round(y.mean(axis=(1, 2, 3)), 6), np.round(y.std(axis=(1, 2, 3)), 4))
