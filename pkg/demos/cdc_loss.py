"""Cross-directional center loss on a hand-sized batch, then on a random one."""

import numpy as np

from ccnet import losses
from ccnet.numkit import finite_diff_grad, relative_error

# one identity, two samples, two modalities, 1-d features 0, 2 | 4, 6
F = np.array([[[[0.0], [2.0]], [[4.0], [6.0]]]])
print("sample centers  ", losses.sample_centers(F).ravel())     # 1, 5
print("modality centers", losses.modality_centers(F).ravel())   # 2, 4
print("L_S =", losses.cdc_sample_loss(F), " L_M =", losses.cdc_modality_loss(F))
print("L_CdC(alpha=0.6) =", losses.cdc_loss(F, 0.6))

# closed-form gradient vs central differences
g = losses.cdc_gradient(F, 1.0)
print("dL/df (alpha=1):", g.ravel())
print("numeric        :", finite_diff_grad(lambda x: losses.cdc_loss(x, 1.0), F).ravel())

# a realistic batch: 8 ids x 4 samples x 3 modalities x 16 dims
rng = np.random.default_rng(0)
F = rng.normal(size=(8, 4, 3, 16))
g = losses.cdc_gradient(F)
n = finite_diff_grad(losses.cdc_loss, F)
print("relative error on a P=8,K=4 batch: %.2e" % relative_error(g, n))
print("largest per-identity gradient sum: %.1e" % np.abs(g.sum(axis=(1, 2))).max())

# shifting one identity leaves the loss alone
moved = F.copy()
moved[3] += 10.0
print("translation invariant:", np.isclose(losses.cdc_loss(F), losses.cdc_loss(moved)))

# gradient descent on the features themselves pulls both kinds of center together
X = F.copy()
for step in range(81):
    if step % 20 == 0:
        print(f"step {step:3d}  L_S {losses.cdc_sample_loss(X):8.4f}  L_M {losses.cdc_modality_loss(X):8.4f}")
    X -= 0.5 * losses.cdc_gradient(X)
