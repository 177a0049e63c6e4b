"""One differentially private update, taken apart.

Each example's gradient is clipped to norm B (over all parameters
together), the clipped gradients are summed, one Gaussian draw with
standard deviation sigma*B is added per parameter tensor, and the result
is divided by the lot size.  The sum is computed example by example, so
the answer does not depend on how the lot was split into micro-batches.
"""
import numpy as np

from privtrain.dp import PrivacyParams, clip_grad, dp_sgd_step, gaussian_sigma_for, make_rng
from privtrain.tensor import backward_per_example, init_params, mlp, model_forward

print("clip (3, 4) to B=1:", clip_grad(np.array([3.0, 4.0]), 1.0))
print(f"single-release Gaussian noise for eps=4, delta=1e-5: sigma = {gaussian_sigma_for(4, 1e-5, 1):.4f}")

rng = np.random.default_rng(2)
spec = mlp(5, [6], 2)
params = init_params(spec, rng)
x = rng.standard_normal((32, 5)).astype(np.float32)
y = rng.integers(0, 2, 32)
pp = PrivacyParams(epsilon_target=4, delta=1e-5, clip_bound=1.0, lot_size=32, dataset_size=3200,
                   noise_multiplier=1.1, total_steps=100, learning_rate=0.1)


def per_example(lo, hi):
    return backward_per_example(spec, params, model_forward(spec, params, x[lo:hi], y[lo:hi]), y[lo:hi])


whole = dp_sgd_step(params, per_example(0, 32), pp, make_rng(0))
split = dp_sgd_step(params, [per_example(0, 5), per_example(5, 20), per_example(20, 32)], pp, make_rng(0))
print("whole lot vs three micro-batches, bit-identical:", whole.equal(split))

delta = {n: float(np.abs(whole[n] - params[n]).max()) for n in params}
print("largest parameter change per tensor:", delta)
