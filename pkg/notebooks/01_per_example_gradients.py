"""Per-example gradients, and why a single backward pass is enough.

DP-SGD clips each example's gradient on its own, so the backward pass has
to keep the batch axis instead of summing it away.  This script builds a
small MLP, computes per-example gradients for a batch, and checks them two
ways: against one backward pass per example, and against central finite
differences.
"""
import numpy as np

from privtrain.tensor import backward, backward_per_example, init_params, mlp, model_forward, numeric_gradient

rng = np.random.default_rng(0)
spec = mlp(4, [8], 3)
params = init_params(spec, rng, "double")
x = rng.standard_normal((16, 4))
y = rng.integers(0, 3, 16)

fwd = model_forward(spec, params, x, y)
peg = backward_per_example(spec, params, fwd, y)
print(f"loss {fwd.loss:.4f}; per-example gradient of 0.weight has shape {peg['0.weight'].shape}")

# slice i must equal a backward pass over example i alone
worst = 0.0
for i in range(16):
    one = backward(spec, params, model_forward(spec, params, x[i : i + 1], y[i : i + 1]), y[i : i + 1])
    worst = max(worst, max(np.abs(peg[n][i] - one[n]).max() for n in params))
print(f"largest gap to single-example passes: {worst:.1e}")

# the mean of the slices is the gradient of the mean loss
num = numeric_gradient(spec, params, x, y)
for n in params:
    err = np.abs(peg[n].mean(axis=0) - num[n]).max()
    print(f"{n:>9}: max |analytic - finite difference| = {err:.1e}")

# per-example norms are what the clip bound acts on
norms = np.sqrt(sum((peg[n].reshape(16, -1) ** 2).sum(axis=1) for n in params))
print("per-example gradient norms:", np.round(norms, 3))
