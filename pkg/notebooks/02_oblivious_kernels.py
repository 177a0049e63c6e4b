"""Data-oblivious kernels and the trace harness.

A kernel is oblivious when the sequence of operations it performs depends
only on input shapes.  ``with_trace`` records that sequence, so the
property can be checked directly: run on different values, compare traces.
A deliberately leaky argmax shows what a failure looks like.
"""
import numpy as np

from privtrain.oblivious import OpKind, _emit, oargmax, omaxpool2d, scrub_subnormals, subnormal_mask, traceable, with_trace

rng = np.random.default_rng(1)

a = rng.standard_normal(8)
b = np.zeros(8)
(_, ta), (_, tb) = with_trace(oargmax, a), with_trace(oargmax, b)
print(f"oargmax: {len(ta)} traced operations; traces equal across inputs: {ta == tb}")


@traceable
def leaky_argmax(v):
    best = 0
    for i in range(1, len(v)):
        _emit(OpKind.COMPARE, ())
        if v[i] > v[best]:
            best = i
            _emit(OpKind.SELECT, ())
    return best


(_, la), (_, lb) = with_trace(leaky_argmax, np.arange(8.0)), with_trace(leaky_argmax, np.arange(8.0)[::-1])
print(f"leaky argmax: {len(la)} vs {len(lb)} operations; traces equal: {la == lb}")

# max-pooling returns a one-hot mask per window instead of argmax indices
x = rng.standard_normal((3, 8, 8))
(out, mask), trace = with_trace(omaxpool2d, x, 2)
print(f"maxpool output {out.shape}, mask {mask.shape}, {len(trace)} operations")
upstream = np.ones_like(out)
dx = (mask * upstream[..., None, None]).transpose(0, 1, 3, 2, 4).reshape(3, 8, 8)
print(f"backward routes gradient to {int(dx.sum())} of {x.size} inputs")

# subnormals are slow on common hardware; the scrub lifts them
t = np.array([0.0, 5e-324, -1e-310, 1e-20, 3.0])
s = scrub_subnormals(t)
print("before:", t, "subnormal:", subnormal_mask(t))
print("after: ", s, "subnormal:", subnormal_mask(s))
